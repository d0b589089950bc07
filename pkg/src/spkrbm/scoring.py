"""Verification trial scoring and score-file handling.

Four scoring rules share the trial layout (an enrollment set against a
single test vector): the model log-likelihood ratio, cosine and
normalized cosine on speaker-subspace projections, and PLDA applied to
the projected, sphere-normalized vectors. Linear fusion combines score
files from several systems with logistic-regression weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .data import IVectorCorpus
from .errors import ValidationError
from .grbm import GrbmParams, LogPartition, SpeakerData, log_partition, params_hash
from .mathutil import format_float, sigmoid, softplus
from .plda import PldaParams, PldaScorer, plda_hash


class Trial(NamedTuple):
    model_speaker_id: str
    enrollment_ids: tuple
    test_vector_id: str
    label: Optional[str]  # "target" | "nontarget" | None


@dataclass(frozen=True)
class ScoreFile:
    """Scores aligned with their trials, plus provenance metadata."""

    trials: tuple
    scores: np.ndarray
    scorer: str
    model_hashes: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (len(self.trials),):
            raise ValidationError("one score per trial required")
        if not np.all(np.isfinite(scores)):
            raise ValidationError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "trials", tuple(self.trials))

    @property
    def labels(self) -> tuple:
        return tuple(t.label for t in self.trials)


def score_llr(
    params: GrbmParams,
    enrollment: SpeakerData,
    test,
    log_z_triplet: Optional[tuple] = None,
) -> float:
    """Log-likelihood ratio of shared vs independent speaker factor.

    Only the speaker-factor terms survive the ratio; channel and
    quadratic terms cancel. `log_z_triplet` = (Z_N, Z_1, Z_{N+1}) adds
    the partition correction; leaving it out shifts every fixed-N score
    by the same constant, so rankings are unaffected when all trials
    share one enrollment size.
    """
    test = np.asarray(test, dtype=np.float64)
    if test.shape != (params.dim_p,) or enrollment.X.shape[1] != params.dim_p:
        raise ValidationError("score_llr: dimension mismatch")
    sig2 = params.sigma_sq
    n = enrollment.n
    b_n = n * params.f + params.F.T @ (enrollment.xbar / sig2)
    c_t = params.f + params.F.T @ (test / sig2)
    a_nt = (n + 1) * params.f + params.F.T @ ((enrollment.xbar + test) / sig2)
    score = float(np.sum(softplus(a_nt) - softplus(b_n) - softplus(c_t)))
    if log_z_triplet is not None:
        z_n, z_1, z_np1 = log_z_triplet
        for lz, expected in ((z_n, n), (z_1, 1), (z_np1, n + 1)):
            if not isinstance(lz, LogPartition) or lz.n_order != expected:
                raise ValidationError(
                    f"log_z_triplet must hold orders ({n}, 1, {n + 1}) as LogPartition"
                )
        score += z_n.log_z + z_1.log_z - z_np1.log_z
    return score


def project_f(params: GrbmParams, x) -> np.ndarray:
    """Project a vector onto the speaker subspace: F^T x (un-normalized)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim_p,):
        raise ValidationError("project_f: dimension mismatch")
    y = params.F.T @ x
    if np.linalg.norm(y) == 0.0:
        raise ValidationError("zero-norm speaker-subspace projection")
    return y


def project_f_unit(params: GrbmParams, x) -> np.ndarray:
    y = project_f(params, x)
    return y / np.linalg.norm(y)


def project_corpus_f(params: GrbmParams, corpus: IVectorCorpus) -> np.ndarray:
    """Unit-normalized F-projections of all records, one row each."""
    Y = corpus.matrix() @ params.F
    norms = np.linalg.norm(Y, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise ValidationError(
            f"zero-norm speaker-subspace projection for {corpus.records[zero[0]].vector_id!r}"
        )
    return Y / norms[:, None]


def score_cosine(y_enroll, y_test) -> float:
    """Cosine between the enrollment mean direction and the test vector."""
    y_sp, norm_sp, y_test = _enrollment_mean(y_enroll, y_test)
    return float(y_test @ (y_sp / norm_sp))


def score_cosine_normalized(y_enroll, y_test) -> float:
    """Cosine score divided by the within-set average cosine ||y_sp||."""
    y_sp, norm_sp, y_test = _enrollment_mean(y_enroll, y_test)
    return float(y_test @ (y_sp / norm_sp)) / norm_sp


def _enrollment_mean(y_enroll, y_test):
    Y = np.atleast_2d(np.asarray(y_enroll, dtype=np.float64))
    y_test = np.asarray(y_test, dtype=np.float64)
    norms = np.linalg.norm(Y, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9) or abs(np.linalg.norm(y_test) - 1.0) > 1e-9:
        raise ValidationError("cosine scoring expects unit-norm inputs")
    y_sp = Y.mean(axis=0)
    norm_sp = float(np.linalg.norm(y_sp))
    if norm_sp == 0.0:
        raise ValidationError("zero-norm enrollment mean (antipodal enrollment)")
    return y_sp, norm_sp, y_test


def score_plda_projected(grbm: GrbmParams, plda_f: PldaParams, enrollment, test) -> float:
    """PLDA LLR on speaker-subspace projections mapped to the unit sphere."""
    enrollment = np.atleast_2d(np.asarray(enrollment, dtype=np.float64))
    y_enroll = np.stack([project_f_unit(grbm, x) for x in enrollment])
    y_test = project_f_unit(grbm, np.asarray(test, dtype=np.float64))
    return PldaScorer(plda_f).score(y_enroll, y_test)


def _resolve(corpus: IVectorCorpus):
    ids = [r.vector_id for r in corpus.records]
    index = {vid: i for i, vid in enumerate(ids)}
    return index, corpus.matrix()


def score_trial_file(
    trials: Sequence[Trial],
    scorer: str,
    model_corpus: IVectorCorpus,
    test_corpus: IVectorCorpus,
    grbm: Optional[GrbmParams] = None,
    plda: Optional[PldaParams] = None,
    exact_z: bool = False,
) -> ScoreFile:
    """Score a trial list with one of the scoring rules.

    scorer is one of llr, cos, cosnorm, plda, plda-fproj. The llr rule
    without exact_z requires every model speaker to have the same
    enrollment count, otherwise the omitted partition terms would not
    cancel between trials.
    """
    if scorer in ("llr", "cos", "cosnorm", "plda-fproj") and grbm is None:
        raise ValidationError(f"scorer {scorer!r} needs a GRBM model")
    if scorer in ("plda", "plda-fproj") and plda is None:
        raise ValidationError(f"scorer {scorer!r} needs a PLDA model")
    test_index, test_matrix = _resolve(test_corpus)
    hashes = {}
    if grbm is not None:
        hashes["grbm"] = params_hash(grbm)
    if plda is not None:
        hashes["plda"] = plda_hash(plda)

    speaker_ids = sorted({t.model_speaker_id for t in trials})
    enroll = {sid: model_corpus.speaker_matrix(sid) for sid in speaker_ids}

    scores = np.empty(len(trials))
    if scorer == "llr":
        counts = {E.shape[0] for E in enroll.values()}
        triplets = {}
        if exact_z:
            z1 = log_partition(grbm, 1)
            for n in counts:
                triplets[n] = (log_partition(grbm, n), z1, log_partition(grbm, n + 1))
        elif len(counts) > 1:
            raise ValidationError(
                "llr with mixed enrollment sizes requires exact partition terms "
                f"(enrollment counts seen: {sorted(counts)})"
            )
        sdata = {sid: SpeakerData(E) for sid, E in enroll.items()}
        for i, t in enumerate(trials):
            sd = sdata[t.model_speaker_id]
            scores[i] = score_llr(
                grbm, sd, test_matrix[test_index[t.test_vector_id]],
                triplets.get(sd.n) if exact_z else None,
            )
    elif scorer in ("cos", "cosnorm"):
        y_enroll = {
            sid: np.stack([project_f_unit(grbm, x) for x in E]) for sid, E in enroll.items()
        }
        y_test = project_corpus_f(grbm, test_corpus)
        fn = score_cosine_normalized if scorer == "cosnorm" else score_cosine
        for i, t in enumerate(trials):
            scores[i] = fn(y_enroll[t.model_speaker_id], y_test[test_index[t.test_vector_id]])
    elif scorer == "plda":
        ps = PldaScorer(plda)
        for i, t in enumerate(trials):
            scores[i] = ps.score(enroll[t.model_speaker_id], test_matrix[test_index[t.test_vector_id]])
    elif scorer == "plda-fproj":
        ps = PldaScorer(plda)
        y_enroll = {
            sid: np.stack([project_f_unit(grbm, x) for x in E]) for sid, E in enroll.items()
        }
        y_test_rows = project_corpus_f(grbm, test_corpus)
        for i, t in enumerate(trials):
            scores[i] = ps.score(y_enroll[t.model_speaker_id], y_test_rows[test_index[t.test_vector_id]])
    else:
        raise ValidationError(f"unknown scorer {scorer!r}")
    return ScoreFile(trials=tuple(trials), scores=scores, scorer=scorer, model_hashes=hashes)


def score_corpus_cosine(
    params: GrbmParams,
    model_corpus: IVectorCorpus,
    test_corpus: IVectorCorpus,
    trials: Sequence[Trial],
    normalized: bool = False,
) -> ScoreFile:
    return score_trial_file(
        trials, "cosnorm" if normalized else "cos", model_corpus, test_corpus, grbm=params
    )


@dataclass(frozen=True)
class FusionWeights:
    weights: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))


def _check_aligned(score_files: Sequence[ScoreFile]):
    if not score_files:
        raise ValidationError("no score files given")
    keys = [(t.model_speaker_id, t.test_vector_id) for t in score_files[0].trials]
    for sf in score_files[1:]:
        other = [(t.model_speaker_id, t.test_vector_id) for t in sf.trials]
        if other != keys:
            raise ValidationError("score files cover different trial sets")


def fuse_train(score_files: Sequence[ScoreFile], seed: int = 0) -> FusionWeights:
    """Class-balanced logistic regression on the stacked system scores.

    Targets and nontargets carry equal total weight. The optimizer is
    deterministic (full-batch L-BFGS from a zero start, 500 iteration
    budget); `seed` is accepted for interface stability but unused.
    """
    del seed
    if len(score_files) < 2:
        raise ValidationError("fusion needs at least 2 systems")
    _check_aligned(score_files)
    labels = score_files[0].labels
    if any(lab is None for lab in labels):
        raise ValidationError("fusion training requires labels on every trial")
    y = np.array([1.0 if lab == "target" else 0.0 for lab in labels])
    if y.min() == y.max():
        raise ValidationError("fusion training needs both target and nontarget trials")
    X = np.stack([sf.scores for sf in score_files], axis=1)
    w = np.where(y == 1.0, 0.5 / y.sum(), 0.5 / (len(y) - y.sum()))

    def objective(theta):
        a = X @ theta[:-1] + theta[-1]
        loss = float(np.sum(w * (softplus(a) - y * a)))
        resid = w * (sigmoid(a) - y)
        return loss, np.concatenate([X.T @ resid, [resid.sum()]])

    res = minimize(
        objective,
        np.zeros(X.shape[1] + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12},
    )
    return FusionWeights(weights=res.x[:-1], offset=float(res.x[-1]))


def fusion_objective(weights: FusionWeights, score_files: Sequence[ScoreFile]) -> float:
    """Weighted logistic loss of a fused combination on labelled scores."""
    _check_aligned(score_files)
    labels = score_files[0].labels
    y = np.array([1.0 if lab == "target" else 0.0 for lab in labels])
    X = np.stack([sf.scores for sf in score_files], axis=1)
    w = np.where(y == 1.0, 0.5 / y.sum(), 0.5 / (len(y) - y.sum()))
    a = X @ weights.weights + weights.offset
    return float(np.sum(w * (softplus(a) - y * a)))


def fuse_apply(weights: FusionWeights, score_files: Sequence[ScoreFile]) -> ScoreFile:
    """Affine per-trial combination of the systems' scores."""
    _check_aligned(score_files)
    if weights.weights.shape != (len(score_files),):
        raise ValidationError(
            f"{weights.weights.shape[0]} fusion weights for {len(score_files)} systems"
        )
    X = np.stack([sf.scores for sf in score_files], axis=1)
    fused = X @ weights.weights + weights.offset
    hashes = {}
    for i, sf in enumerate(score_files):
        for k, v in sf.model_hashes.items():
            hashes[f"sys{i}.{k}"] = v
    return ScoreFile(
        trials=score_files[0].trials, scores=fused, scorer="fuse", model_hashes=hashes
    )


def save_fusion_weights(weights: FusionWeights, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n_systems {weights.weights.shape[0]}\n")
        fh.write(f"offset {format_float(weights.offset)}\n")
        for i, wv in enumerate(weights.weights):
            fh.write(f"w{i} {format_float(wv)}\n")


def load_fusion_weights(path) -> FusionWeights:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                key, val = line.split()
                values[key] = val
    n = int(values["n_systems"])
    return FusionWeights(
        weights=np.array([float(values[f"w{i}"]) for i in range(n)]),
        offset=float(values["offset"]),
    )


def write_score_file(score_file: ScoreFile, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# scorer: {score_file.scorer}\n")
        for name, digest in sorted(score_file.model_hashes.items()):
            fh.write(f"# model: {name}={digest}\n")
        labelled = any(t.label is not None for t in score_file.trials)
        writer = csv.writer(fh)
        header = ["model_speaker_id", "test_vector_id", "score"]
        if labelled:
            header.append("label")
        writer.writerow(header)
        for t, s in zip(score_file.trials, score_file.scores):
            row = [t.model_speaker_id, t.test_vector_id, format_float(s)]
            if labelled:
                row.append(t.label or "")
            writer.writerow(row)


def read_score_file(path) -> ScoreFile:
    scorer = "unknown"
    hashes = {}
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        data_lines = []
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("scorer:"):
                    scorer = body.split(":", 1)[1].strip()
                elif body.startswith("model:"):
                    name, _, digest = body.split(":", 1)[1].strip().partition("=")
                    hashes[name] = digest
            elif line.strip():
                data_lines.append(line)
    if not data_lines:
        raise ValidationError(f"{path}: empty score file")
    reader = csv.reader(data_lines)
    header = next(reader)
    if header[:3] != ["model_speaker_id", "test_vector_id", "score"]:
        raise ValidationError(f"{path}: bad score file header")
    has_label = len(header) > 3 and header[3] == "label"
    trials, scores = [], []
    for row in reader:
        label = (row[3] or None) if has_label else None
        trials.append(Trial(row[0], (), row[1], label))
        scores.append(float(row[2]))
    return ScoreFile(trials=tuple(trials), scores=np.array(scores), scorer=scorer, model_hashes=hashes)
