"""Synthetic labelled corpora drawn from known truth models.

Each speaker is generated from its own derived RNG stream, so corpora
are reproducible per seed and independent of generation order. A truth
manifest (seed, sizes, truth-model hash) is emitted next to the corpus
so downstream checks can rebuild their oracles.
"""

from __future__ import annotations

import numpy as np

from .data import IVectorCorpus, IVectorRecord
from .errors import ValidationError
from .grbm import GrbmParams, generate_speaker, params_hash
from .mathutil import derive_rng
from .plda import PldaParams, plda_hash

SYNTH_DURATION = 60.0


def _speaker_id(k: int) -> str:
    return f"spk{k:05d}"


def synth_corpus(
    truth: GrbmParams,
    n_speakers: int,
    vectors_per_speaker: tuple,
    seed: int,
    method: str = "auto",
) -> tuple:
    """Corpus of `n_speakers` speakers from a truth GRBM; returns
    (corpus, manifest). Vector counts are uniform over the given range."""
    lo, hi = vectors_per_speaker
    if not (1 <= lo <= hi):
        raise ValidationError(f"invalid vectors_per_speaker range ({lo}, {hi})")
    if n_speakers < 1:
        raise ValidationError("n_speakers must be >= 1")
    records = []
    for k in range(n_speakers):
        rng = derive_rng(seed, k)
        n = int(rng.integers(lo, hi + 1))
        data = generate_speaker(truth, n, rng, method=method)
        sid = _speaker_id(k)
        for j in range(n):
            records.append(
                IVectorRecord(f"{sid}_u{j:03d}", sid, SYNTH_DURATION, data.X[j])
            )
    corpus = IVectorCorpus(dim_p=truth.dim_p, records=tuple(records))
    manifest = {
        "kind": "grbm",
        "seed": seed,
        "n_speakers": n_speakers,
        "per_speaker_lo": lo,
        "per_speaker_hi": hi,
        "truth_hash": params_hash(truth),
    }
    return corpus, manifest


def synth_plda_corpus(
    truth: PldaParams, n_speakers: int, vectors_per_speaker: tuple, seed: int
) -> tuple:
    """Corpus sampled from a linear-Gaussian PLDA truth model."""
    lo, hi = vectors_per_speaker
    if not (1 <= lo <= hi):
        raise ValidationError(f"invalid vectors_per_speaker range ({lo}, {hi})")
    if n_speakers < 1:
        raise ValidationError("n_speakers must be >= 1")
    p, qs, qc = truth.dim_p, truth.q_s, truth.q_c
    sigma = np.sqrt(truth.residual)
    records = []
    for k in range(n_speakers):
        rng = derive_rng(seed, k)
        n = int(rng.integers(lo, hi + 1))
        h_s = rng.standard_normal(qs)
        base = truth.mu + truth.V @ h_s
        sid = _speaker_id(k)
        for j in range(n):
            h_c = rng.standard_normal(qc)
            x = base + truth.U @ h_c + sigma * rng.standard_normal(p)
            records.append(IVectorRecord(f"{sid}_u{j:03d}", sid, SYNTH_DURATION, x))
    corpus = IVectorCorpus(dim_p=p, records=tuple(records))
    manifest = {
        "kind": "plda",
        "seed": seed,
        "n_speakers": n_speakers,
        "per_speaker_lo": lo,
        "per_speaker_hi": hi,
        "truth_hash": plda_hash(truth),
    }
    return corpus, manifest


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in manifest.items():
            fh.write(f"{key} {value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                key, _, value = line.partition(" ")
                out[key] = value.strip()
    return out
