"""Maximum-likelihood training: analytic positive phase, CD negative phase.

The data-clamped gradient of the log-likelihood has a closed form in the
factor posteriors; the model expectation is approximated by m steps of
an alternating chain started at the speaker's data. Updates are
mini-batch gradient ascent with classical momentum, normalized by the
total vector count of the batch.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import IVectorCorpus
from .errors import NumericError, ValidationError
from .grbm import (
    GrbmParams,
    SpeakerData,
    load_grbm,
    posterior_speaker,
    sample_latent,
    sample_visible,
    save_grbm,
    channel_activations,
)
from .mathutil import format_float, make_rng, sigmoid

OPT_MAGIC = b"GOPT"
OPT_VERSION = 1

TENSORS = ("f", "g", "F", "G", "b", "z")
WEIGHT_TENSORS = ("F", "G")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 0.0
    batch_speakers: int = 256
    epochs: int = 40
    cd_steps: int = 1
    learn_sigma: bool = False
    init_weight_std: float = 0.01
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError("momentum must be in [0, 1)")
        if self.cd_steps < 1:
            raise ValidationError("cd_steps must be >= 1")
        if self.batch_speakers < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValidationError("bad batching configuration")


@dataclass
class GradientAccumulator:
    """Per-tensor gradient slots plus the vector count for normalization."""

    f: np.ndarray
    g: np.ndarray
    F: np.ndarray
    G: np.ndarray
    b: np.ndarray
    z: np.ndarray
    n_vectors: int = 0

    @classmethod
    def zeros(cls, params: GrbmParams) -> "GradientAccumulator":
        return cls(
            f=np.zeros(params.dim_s),
            g=np.zeros(params.dim_c),
            F=np.zeros((params.dim_p, params.dim_s)),
            G=np.zeros((params.dim_p, params.dim_c)),
            b=np.zeros(params.dim_p),
            z=np.zeros(params.dim_p),
        )

    def add(self, other: "GradientAccumulator", sign: float = 1.0) -> None:
        for name in TENSORS:
            getattr(self, name).__iadd__(sign * getattr(other, name))

    def scaled(self, factor: float) -> "GradientAccumulator":
        return GradientAccumulator(
            **{name: factor * getattr(self, name) for name in TENSORS},
            n_vectors=self.n_vectors,
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(getattr(self, t) ** 2) for t in TENSORS)))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    recon_err: float
    cv_mindcf: Optional[float]
    grad_norm: float
    seconds: float


@dataclass(frozen=True)
class TrainReport:
    epochs: tuple

    def write_csv(self, path, header_comments=()) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            fh.write("epoch,recon_err,cv_mindcf,grad_norm,seconds\n")
            for e in self.epochs:
                cv = format_float(e.cv_mindcf) if e.cv_mindcf is not None else ""
                fh.write(
                    f"{e.epoch},{format_float(e.recon_err)},{cv},"
                    f"{format_float(e.grad_norm)},{e.seconds:.3f}\n"
                )


def init_params(dim_p: int, dim_s: int, dim_c: int, config: TrainConfig, rng) -> GrbmParams:
    """Zero biases, unit variances, small Gaussian loading matrices."""
    if min(dim_p, dim_s, dim_c) < 1:
        raise ValidationError("model dimensions must be positive")
    std = config.init_weight_std
    return GrbmParams(
        b=np.zeros(dim_p),
        f=np.zeros(dim_s),
        g=np.zeros(dim_c),
        F=std * rng.standard_normal((dim_p, dim_s)),
        G=std * rng.standard_normal((dim_p, dim_c)),
        z=np.zeros(dim_p),
    )


def positive_gradient(params: GrbmParams, data: SpeakerData) -> GradientAccumulator:
    """Data-clamped gradient of the log-likelihood's first term.

    All slots follow from the factor posteriors; the b slot is the full
    data term (x_bar - N b) / sigma^2, which has no latent dependence.
    """
    sig2 = params.sigma_sq
    X = data.X
    ps = posterior_speaker(params, data)
    pc = sigmoid(channel_activations(params, X))
    xbar_scaled = data.xbar / sig2
    x_scaled = X / sig2
    grad_z = (
        -xbar_scaled * (params.F @ ps)
        - np.sum(x_scaled * (pc @ params.G.T), axis=0)
        + 0.5 * np.sum((X - params.b) ** 2 / sig2, axis=0)
    )
    return GradientAccumulator(
        f=data.n * ps,
        g=pc.sum(axis=0),
        F=np.outer(xbar_scaled, ps),
        G=x_scaled.T @ pc,
        b=(data.xbar - data.n * params.b) / sig2,
        z=grad_z,
        n_vectors=data.n,
    )


def cd_reconstruction(params: GrbmParams, data: SpeakerData, m: int, rng) -> SpeakerData:
    """Run the m-step alternating chain from the data and return X^m."""
    if m < 1:
        raise ValidationError("cd steps must be >= 1")
    current = data
    for _ in range(m):
        latent = sample_latent(params, current, rng)
        current = sample_visible(params, latent, rng)
    return current


def negative_phase_cd(params: GrbmParams, data: SpeakerData, m: int, rng) -> GradientAccumulator:
    """Negative-phase gradient: the positive-phase formulas evaluated at
    the chain's reconstruction X^m (including the b and z slots)."""
    return positive_gradient(params, cd_reconstruction(params, data, m, rng))


def _params_dict(params: GrbmParams) -> dict:
    return {name: getattr(params, name).copy() for name in TENSORS}


def _speaker_batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def train(
    corpus: IVectorCorpus,
    dim_s: int,
    dim_c: int,
    config: TrainConfig,
    cv: Optional[tuple] = None,
    checkpoint_dir=None,
) -> tuple:
    """Fit GrbmParams on a labelled corpus; returns (params, TrainReport).

    Each epoch shuffles speakers into batches; per batch the net
    (positive minus CD) gradient is accumulated over speakers, divided
    by the batch's total vector count, and applied with momentum. The
    accumulation order is fixed, so runs are bit-reproducible per seed.
    With `cv` = (model_corpus, test_corpus), the epoch with the lowest
    normalized-cosine minDCF is returned instead of the final one.
    """
    if not corpus.speakers:
        raise ValidationError("training corpus has no labelled speakers")
    rng = make_rng(config.seed)
    params = init_params(corpus.dim_p, dim_s, dim_c, config, rng)
    speakers = [SpeakerData(corpus.speaker_matrix(sid)) for sid in corpus.speakers]

    tensors = _params_dict(params)
    velocity = {name: np.zeros_like(arr) for name, arr in tensors.items()}
    update_z = config.learn_sigma

    best_mindcf = np.inf
    best_tensors = None
    stats = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(speakers))
        sq_err = 0.0
        n_coords = 0
        batch_norms = []
        for batch_no, batch in enumerate(_speaker_batches(order, config.batch_speakers)):
            current = GrbmParams(**tensors)
            acc = GradientAccumulator.zeros(current)
            total_n = 0
            for k in batch:
                sd = speakers[k]
                pos = positive_gradient(current, sd)
                recon = cd_reconstruction(current, sd, config.cd_steps, rng)
                neg = positive_gradient(current, recon)
                acc.add(pos)
                acc.add(neg, sign=-1.0)
                total_n += sd.n
                sq_err += float(np.sum((sd.X - recon.X) ** 2))
                n_coords += sd.n * corpus.dim_p
            grad = acc.scaled(1.0 / total_n)
            for name in TENSORS:
                arr = getattr(grad, name)
                if not np.all(np.isfinite(arr)):
                    raise NumericError(
                        f"non-finite gradient in {name} (epoch {epoch}, batch {batch_no})"
                    )
            batch_norms.append(grad.norm())
            for name in TENSORS:
                if name == "z" and not update_z:
                    continue
                step = config.learning_rate * getattr(grad, name)
                if config.weight_decay and name in WEIGHT_TENSORS:
                    step -= config.learning_rate * config.weight_decay * tensors[name]
                velocity[name] = config.momentum * velocity[name] + step
                tensors[name] += velocity[name]

        cv_mindcf = None
        if cv is not None and epoch % config.eval_every == 0:
            cv_mindcf = _cv_mindcf(GrbmParams(**tensors), cv[0], cv[1])
            if cv_mindcf < best_mindcf:
                best_mindcf = cv_mindcf
                best_tensors = {k: v.copy() for k, v in tensors.items()}
        stats.append(
            EpochStats(
                epoch=epoch,
                recon_err=sq_err / n_coords if n_coords else 0.0,
                cv_mindcf=cv_mindcf,
                grad_norm=float(np.mean(batch_norms)) if batch_norms else 0.0,
                seconds=time.perf_counter() - t0,
            )
        )
        if checkpoint_dir is not None:
            save_checkpoint(
                f"{checkpoint_dir}/epoch{epoch:04d}.grbm",
                GrbmParams(**tensors),
                velocity,
                epoch,
            )

    final = GrbmParams(**tensors)
    if cv is not None and best_tensors is not None:
        final = GrbmParams(**best_tensors)
    return final, TrainReport(epochs=tuple(stats))


def _cv_mindcf(params: GrbmParams, model_corpus, test_corpus) -> float:
    from .metrics import build_trials, compute_metrics
    from .scoring import score_corpus_cosine

    trials = build_trials(model_corpus, test_corpus)
    scores = score_corpus_cosine(params, model_corpus, test_corpus, trials, normalized=True)
    return compute_metrics(scores).min_dcf


def save_checkpoint(path, params: GrbmParams, velocity: dict, epoch: int) -> None:
    """Model file plus a `.opt` sidecar holding the optimizer velocity."""
    save_grbm(params, path)
    with open(f"{path}.opt", "wb") as fh:
        fh.write(OPT_MAGIC)
        fh.write(struct.pack("<II", OPT_VERSION, epoch))
        for name in TENSORS:
            fh.write(np.ascontiguousarray(velocity[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (params, velocity dict, epoch)."""
    params = load_grbm(path)
    with open(f"{path}.opt", "rb") as fh:
        raw = fh.read()
    if raw[:4] != OPT_MAGIC:
        raise ValidationError(f"{path}.opt: not an optimizer sidecar")
    version, epoch = struct.unpack("<II", raw[4:12])
    if version != OPT_VERSION:
        raise ValidationError(f"{path}.opt: unsupported version {version}")
    shapes = {
        "f": (params.dim_s,),
        "g": (params.dim_c,),
        "F": (params.dim_p, params.dim_s),
        "G": (params.dim_p, params.dim_c),
        "b": (params.dim_p,),
        "z": (params.dim_p,),
    }
    offset = 12
    velocity = {}
    for name in TENSORS:
        n = int(np.prod(shapes[name]))
        velocity[name] = (
            np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
            .astype(np.float64)
            .reshape(shapes[name])
        )
        offset += 8 * n
    return params, velocity, epoch
