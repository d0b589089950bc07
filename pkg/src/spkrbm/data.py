"""I-vector corpora: ingestion, labelling, whitening, projection, partitioning.

A corpus is an immutable list of fixed-dimension real vectors, each with
an opaque id, an optional speaker label, and a duration. CSV is the
canonical interchange format; a binary format with identical round-trip
semantics exists for bulk data.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .mathutil import format_float

CSV_ID_COLUMNS = ("vector_id", "speaker_id", "duration")
BINARY_MAGIC = b"IVEC"
BINARY_VERSION = 1
WHITENING_MAGIC = b"WHTN"


@dataclass(frozen=True)
class IVectorRecord:
    """One labelled embedding vector."""

    vector_id: str
    speaker_id: Optional[str]
    duration_seconds: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValidationError(f"record {self.vector_id!r}: values must be a vector")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"record {self.vector_id!r}: non-finite value")
        if not (self.duration_seconds >= 0.0 and math.isfinite(self.duration_seconds)):
            raise ValidationError(f"record {self.vector_id!r}: bad duration")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class IVectorCorpus:
    """A set of records sharing one dimension, indexed by speaker.

    Immutable after construction; `speakers` maps speaker_id to record
    indices in input order. Unlabelled records are not indexed.
    """

    dim_p: int
    records: tuple
    speakers: dict = field(init=False)

    def __post_init__(self):
        if self.dim_p <= 0:
            raise ValidationError("corpus dimension must be positive")
        seen_ids = set()
        speakers: dict[str, list[int]] = {}
        for i, rec in enumerate(self.records):
            if rec.values.shape[0] != self.dim_p:
                raise ValidationError(
                    f"record {rec.vector_id!r}: dimension {rec.values.shape[0]} != corpus dimension {self.dim_p}"
                )
            if rec.vector_id in seen_ids:
                raise ValidationError(f"duplicate vector_id {rec.vector_id!r}")
            seen_ids.add(rec.vector_id)
            if rec.speaker_id is not None:
                speakers.setdefault(rec.speaker_id, []).append(i)
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "speakers", {k: tuple(v) for k, v in speakers.items()})

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def matrix(self) -> np.ndarray:
        """All vectors stacked as rows, (n_records, dim_p)."""
        if not self.records:
            return np.empty((0, self.dim_p))
        return np.stack([r.values for r in self.records])

    def speaker_matrix(self, speaker_id: str) -> np.ndarray:
        idx = self.speakers.get(speaker_id)
        if not idx:
            raise ValidationError(f"unknown speaker {speaker_id!r}")
        return np.stack([self.records[i].values for i in idx])

    def record_by_id(self, vector_id: str) -> IVectorRecord:
        for rec in self.records:
            if rec.vector_id == vector_id:
                return rec
        raise ValidationError(f"unknown vector_id {vector_id!r}")

    def replace_values(self, values: np.ndarray) -> "IVectorCorpus":
        """New corpus with the same ids/labels and the given row vectors."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(self.records):
            raise ValidationError("replacement matrix has wrong number of rows")
        recs = tuple(
            IVectorRecord(r.vector_id, r.speaker_id, r.duration_seconds, values[i])
            for i, r in enumerate(self.records)
        )
        return IVectorCorpus(dim_p=values.shape[1], records=recs)


@dataclass(frozen=True)
class WhiteningTransform:
    """Affine map x -> transform @ (x - mean) fitted on a corpus."""

    mean: np.ndarray
    transform: np.ndarray


class Partition(NamedTuple):
    train: IVectorCorpus
    model: IVectorCorpus
    test: IVectorCorpus
    model_cv: IVectorCorpus
    test_cv: IVectorCorpus


def corpus_from_records(records: Sequence[IVectorRecord]) -> IVectorCorpus:
    if not records:
        raise ValidationError("empty corpus")
    return IVectorCorpus(dim_p=records[0].values.shape[0], records=tuple(records))


def load_corpus(path, format: str = "csv") -> IVectorCorpus:
    """Read a corpus file. `format` is "csv" or "binary"."""
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValidationError(f"unknown corpus format {format!r}")


def save_corpus(corpus: IVectorCorpus, path, format: str = "csv") -> None:
    if format == "csv":
        _save_csv(corpus, path)
    elif format == "binary":
        _save_binary(corpus, path)
    else:
        raise ValidationError(f"unknown corpus format {format!r}")


def _load_csv(path) -> IVectorCorpus:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise ValidationError(f"{path}: empty corpus")
    header = rows[0]
    if tuple(header[:3]) != CSV_ID_COLUMNS:
        raise ValidationError(f"{path}: bad header, expected vector_id,speaker_id,duration,v0,...")
    p = len(header) - 3
    if p <= 0:
        raise ValidationError(f"{path}: header declares no value columns")
    if len(rows) == 1:
        raise ValidationError(f"{path}: empty corpus")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) - 3 != p:
            raise ValidationError(
                f"{path}: row {lineno} ({row[0]!r}) has dimension {len(row) - 3}, expected {p}"
            )
        vector_id = row[0]
        speaker_id = row[1] if row[1] != "" else None
        try:
            duration = float(row[2])
            values = np.array([float(v) for v in row[3:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: row {lineno}: {exc}") from exc
        records.append(IVectorRecord(vector_id, speaker_id, duration, values))
    return IVectorCorpus(dim_p=p, records=tuple(records))


def _save_csv(corpus: IVectorCorpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_ID_COLUMNS) + [f"v{i}" for i in range(corpus.dim_p)])
        for rec in corpus.records:
            writer.writerow(
                [rec.vector_id, rec.speaker_id or "", format_float(rec.duration_seconds)]
                + [format_float(v) for v in rec.values]
            )


def _load_binary(path) -> IVectorCorpus:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BINARY_MAGIC:
            raise ValidationError(f"{path}: not an i-vector binary file")
        version, p = struct.unpack("<II", fh.read(8))
        if version != BINARY_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        if count == 0:
            raise ValidationError(f"{path}: empty corpus")
        records = []
        for _ in range(count):
            vector_id = _read_string(fh)
            speaker = _read_string(fh)
            (duration,) = struct.unpack("<d", fh.read(8))
            values = np.frombuffer(fh.read(8 * p), dtype="<f8").astype(np.float64)
            if values.shape[0] != p:
                raise ValidationError(f"{path}: truncated record {vector_id!r}")
            records.append(IVectorRecord(vector_id, speaker or None, duration, values))
    return IVectorCorpus(dim_p=p, records=tuple(records))


def _save_binary(corpus: IVectorCorpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", BINARY_VERSION, corpus.dim_p))
        fh.write(struct.pack("<Q", len(corpus.records)))
        for rec in corpus.records:
            _write_string(fh, rec.vector_id)
            _write_string(fh, rec.speaker_id or "")
            fh.write(struct.pack("<d", rec.duration_seconds))
            fh.write(np.asarray(rec.values, dtype="<f8").tobytes())


def _read_string(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_string(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def filter_by_duration(corpus: IVectorCorpus, min_seconds: float) -> IVectorCorpus:
    """Drop records with duration strictly below `min_seconds`."""
    kept = tuple(r for r in corpus.records if r.duration_seconds >= min_seconds)
    return IVectorCorpus(dim_p=corpus.dim_p, records=kept)


def partition_by_count(
    corpus: IVectorCorpus,
    train_range: tuple = (3, 10),
    eval_range: tuple = (11, 15),
    cv_min: int = 15,
    enroll_per_speaker: int = 5,
) -> Partition:
    """Split speakers by how many vectors they have.

    Speakers whose count falls in `train_range` go to train; in
    `eval_range` their first `enroll_per_speaker` vectors (input order)
    go to model and the rest to test; counts above `cv_min` form the
    cross-validation split the same way. Anything else (including
    unlabelled records) is excluded.
    """
    t_lo, t_hi = train_range
    e_lo, e_hi = eval_range
    if enroll_per_speaker < 1:
        raise ValidationError("enroll_per_speaker must be >= 1")
    if t_lo > t_hi or e_lo > e_hi:
        raise ValidationError("malformed count range")
    if not (t_hi < e_lo or e_hi < t_lo):
        raise ValidationError(f"overlapping ranges {train_range} and {eval_range}")
    if t_hi > cv_min or e_hi > cv_min:
        raise ValidationError(f"cv_min {cv_min} overlaps a count range")

    train, model, test, model_cv, test_cv = [], [], [], [], []
    for speaker_id, idx in corpus.speakers.items():
        n = len(idx)
        recs = [corpus.records[i] for i in idx]
        if t_lo <= n <= t_hi:
            train.extend(recs)
        elif e_lo <= n <= e_hi:
            model.extend(recs[:enroll_per_speaker])
            test.extend(recs[enroll_per_speaker:])
        elif n > cv_min:
            model_cv.extend(recs[:enroll_per_speaker])
            test_cv.extend(recs[enroll_per_speaker:])
    p = corpus.dim_p
    return Partition(
        train=IVectorCorpus(p, tuple(train)),
        model=IVectorCorpus(p, tuple(model)),
        test=IVectorCorpus(p, tuple(test)),
        model_cv=IVectorCorpus(p, tuple(model_cv)),
        test_cv=IVectorCorpus(p, tuple(test_cv)),
    )


def fit_whitening(corpus: IVectorCorpus) -> WhiteningTransform:
    """Fit the symmetric (ZCA) whitening transform on a corpus.

    The transform is the inverse principal square root of the biased
    sample covariance, which makes it unique and independent of record
    order. The covariance must be full rank.
    """
    if len(corpus.records) < 2:
        raise ValidationError("whitening needs at least 2 records")
    X = corpus.matrix()
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / X.shape[0]
    eigval, eigvec = np.linalg.eigh(cov)
    tol = X.shape[1] * np.finfo(np.float64).eps * max(eigval[-1], 0.0)
    if eigval[0] <= tol:
        raise ValidationError(
            f"rank-deficient covariance: smallest eigenvalue {eigval[0]:.3e}"
        )
    transform = (eigvec / np.sqrt(eigval)) @ eigvec.T
    return WhiteningTransform(mean=mean, transform=transform)


def apply_whitening(transform: WhiteningTransform, corpus: IVectorCorpus) -> IVectorCorpus:
    if transform.mean.shape[0] != corpus.dim_p:
        raise ValidationError(
            f"whitening dimension {transform.mean.shape[0]} != corpus dimension {corpus.dim_p}"
        )
    X = corpus.matrix()
    return corpus.replace_values((X - transform.mean) @ transform.transform.T)


def unit_sphere_project(corpus: IVectorCorpus) -> IVectorCorpus:
    """Scale every record to Euclidean norm 1."""
    X = corpus.matrix()
    norms = np.linalg.norm(X, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise ValidationError(
            f"zero-norm record {corpus.records[zero[0]].vector_id!r} cannot be projected"
        )
    return corpus.replace_values(X / norms[:, None])


def save_whitening(transform: WhiteningTransform, path) -> None:
    p = transform.mean.shape[0]
    with open(path, "wb") as fh:
        fh.write(WHITENING_MAGIC)
        fh.write(struct.pack("<II", 1, p))
        fh.write(np.asarray(transform.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(transform.transform, dtype="<f8").tobytes())


def load_whitening(path) -> WhiteningTransform:
    with open(path, "rb") as fh:
        if fh.read(4) != WHITENING_MAGIC:
            raise ValidationError(f"{path}: not a whitening file")
        version, p = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValidationError(f"{path}: unsupported version {version}")
        mean = np.frombuffer(fh.read(8 * p), dtype="<f8").astype(np.float64)
        transform = np.frombuffer(fh.read(8 * p * p), dtype="<f8").astype(np.float64).reshape(p, p)
    return WhiteningTransform(mean=mean, transform=transform)
