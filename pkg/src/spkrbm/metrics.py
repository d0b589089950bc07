"""Trial construction and detection-cost evaluation.

A score is accepted when it is >= the threshold (ties accept). The
threshold sweep visits the midpoints of adjacent distinct scores plus
both infinities, which covers every achievable (FA, FR) operating
point. The detection cost is FR + fa_cost * FA with fa_cost = 100 by
default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IVectorCorpus
from .errors import ValidationError
from .mathutil import format_float
from .scoring import ScoreFile, Trial


@dataclass(frozen=True)
class MetricReport:
    eer: float
    eer_discrete: float
    min_dcf: float
    dcf_threshold: float
    n_target: int
    n_nontarget: int
    det_points: tuple  # ((fa, fr), ...) in threshold order


def build_trials(model_corpus: IVectorCorpus, test_corpus: IVectorCorpus) -> list:
    """Cross product of model speakers and test vectors.

    Labels are attached where the test record carries a speaker id;
    unlabelled test records produce unlabelled trials.
    """
    if not model_corpus.speakers:
        raise ValidationError("model corpus has no labelled speakers")
    if not test_corpus.records:
        raise ValidationError("test corpus is empty")
    enrollment_ids = {
        sid: tuple(model_corpus.records[i].vector_id for i in idx)
        for sid, idx in model_corpus.speakers.items()
    }
    trials = []
    for sid, eids in enrollment_ids.items():
        for rec in test_corpus.records:
            if rec.speaker_id is None:
                label = None
            else:
                label = "target" if rec.speaker_id == sid else "nontarget"
            trials.append(Trial(sid, eids, rec.vector_id, label))
    return trials


def _sweep(scores: np.ndarray):
    distinct = np.unique(scores)
    return np.concatenate(([-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]))


def compute_metrics(score_file: ScoreFile, fa_cost: float = 100.0) -> MetricReport:
    """EER and minimum detection cost from a labelled score file."""
    labels = score_file.labels
    if any(lab is None for lab in labels):
        raise ValidationError("metrics need labels on every trial")
    scores = score_file.scores
    if not np.all(np.isfinite(scores)):
        raise ValidationError("metrics need finite scores")
    is_target = np.array([lab == "target" for lab in labels])
    tar = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    if tar.size == 0 or non.size == 0:
        raise ValidationError("metrics need both target and nontarget trials")

    thresholds = _sweep(scores)
    # FR: targets strictly below the threshold; FA: nontargets at or above it.
    fr = np.searchsorted(tar, thresholds, side="left") / tar.size
    fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    dcf = fr + fa_cost * fa
    imin = int(np.argmin(dcf))

    diff = fr - fa
    icross = int(np.argmax(diff >= 0.0))
    if diff[icross] == 0.0:
        eer = float(fr[icross])
    else:
        fa1, fr1 = fa[icross - 1], fr[icross - 1]
        fa2, fr2 = fa[icross], fr[icross]
        t = (fa1 - fr1) / ((fr2 - fr1) + (fa1 - fa2))
        eer = float(fr1 + t * (fr2 - fr1))
    eer_discrete = float(np.min(np.maximum(fa, fr)))

    return MetricReport(
        eer=eer,
        eer_discrete=eer_discrete,
        min_dcf=float(dcf[imin]),
        dcf_threshold=float(thresholds[imin]),
        n_target=int(tar.size),
        n_nontarget=int(non.size),
        det_points=tuple(zip(fa.tolist(), fr.tolist())),
    )


def export_det(report: MetricReport, path) -> None:
    """Write the (fa, fr) staircase as CSV for external DET plotting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("fa,fr\n")
        for fa, fr in report.det_points:
            fh.write(f"{format_float(fa)},{format_float(fr)}\n")


def load_det(path) -> tuple:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "fa,fr":
            raise ValidationError(f"{path}: not a DET file")
        for line in fh:
            if line.strip():
                fa, fr = line.split(",")
                points.append((float(fa), float(fr)))
    return tuple(points)


def write_metrics(report: MetricReport, path, fa_cost: float = 100.0) -> None:
    """Flat key-value metrics file."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"eer {format_float(report.eer)}\n")
        fh.write(f"eer_discrete {format_float(report.eer_discrete)}\n")
        fh.write(f"min_dcf {format_float(report.min_dcf)}\n")
        fh.write(f"dcf_threshold {format_float(report.dcf_threshold)}\n")
        fh.write(f"n_target {report.n_target}\n")
        fh.write(f"n_nontarget {report.n_nontarget}\n")
        fh.write(f"fa_cost {format_float(fa_cost)}\n")
