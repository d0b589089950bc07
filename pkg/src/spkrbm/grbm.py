"""Shared-subspace Gaussian-Binary RBM: parameters and exact probability math.

The hidden layer splits into one binary speaker factor s, common to all
of a speaker's vectors, and one binary channel factor c_n per vector.
For N vectors the energy is the sum of per-vector energies with the
shared s, and the joint density is exp(-energy) / Z_N.

Everything here is a pure function of the parameters (plus an explicit
generator for the sampling operations). Per-configuration Gaussian
integrals reduce the partition function to a finite sum, so Z_N, the
marginal likelihood, and exact prior sampling are available whenever the
hidden dimensions are small enough to enumerate.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError
from .mathutil import sigmoid, softplus

MODEL_MAGIC = b"GRBM"
MODEL_VERSION = 1

# Exact enumeration refuses above these sizes rather than approximate.
ENUM_CAP_BITS = 14
ENUM_CAP_TABLE = 2**24

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GrbmParams:
    """Model parameters; variances live as log-variances z = log(sigma^2).

    b : visible bias (p,)
    f : speaker hidden bias (dim_s,)
    g : channel hidden bias (dim_c,)
    F : speaker loading matrix (p, dim_s)
    G : channel loading matrix (p, dim_c)
    z : log-variances (p,)
    """

    b: np.ndarray
    f: np.ndarray
    g: np.ndarray
    F: np.ndarray
    G: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for name in ("b", "f", "g", "F", "G", "z"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"parameter {name} contains non-finite values")
            object.__setattr__(self, name, arr)
        p = self.b.shape[0]
        if self.z.shape != (p,):
            raise ValidationError("z must match visible dimension")
        if self.F.shape != (p, self.f.shape[0]):
            raise ValidationError(f"F shape {self.F.shape} inconsistent with b/f")
        if self.G.shape != (p, self.g.shape[0]):
            raise ValidationError(f"G shape {self.G.shape} inconsistent with b/g")

    @property
    def dim_p(self) -> int:
        return self.b.shape[0]

    @property
    def dim_s(self) -> int:
        return self.f.shape[0]

    @property
    def dim_c(self) -> int:
        return self.g.shape[0]

    @property
    def sigma_sq(self) -> np.ndarray:
        return np.exp(self.z)


@dataclass(frozen=True)
class SpeakerData:
    """All vectors of one speaker, rows of X, with the cached sum xbar."""

    X: np.ndarray
    xbar: np.ndarray = field(init=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if X.shape[0] < 1:
            raise ValidationError("speaker data needs at least one vector")
        if not np.all(np.isfinite(X)):
            raise ValidationError("speaker data contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "xbar", X.sum(axis=0))

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class LatentState:
    """One binary configuration: shared s plus per-vector channel rows C."""

    s: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        for arr, name in ((s, "s"), (C, "C")):
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValidationError(f"latent {name} entries must be 0 or 1")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class LogPartition:
    """log Z_N for one model order N."""

    n_order: int
    log_z: float


def energy(params: GrbmParams, x, s, c) -> float:
    """Energy of a single vector with hidden configuration (s, c)."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if x.shape != (params.dim_p,) or s.shape != (params.dim_s,) or c.shape != (params.dim_c,):
        raise ValidationError("energy: dimension mismatch")
    sig2 = params.sigma_sq
    w = params.F @ s + params.G @ c
    quad = 0.5 * np.sum((x - params.b) ** 2 / sig2)
    return float(quad - params.f @ s - params.g @ c - (x / sig2) @ w)


def energy_total(params: GrbmParams, data: SpeakerData, latent: LatentState) -> float:
    """Sum of per-vector energies with the shared speaker factor."""
    if latent.n != data.n:
        raise ValidationError(f"latent has {latent.n} channel rows for {data.n} vectors")
    if latent.s.shape != (params.dim_s,) or latent.C.shape[1] != params.dim_c:
        raise ValidationError("energy_total: dimension mismatch")
    sig2 = params.sigma_sq
    W = params.F @ latent.s + latent.C @ params.G.T  # (N, p) per-vector connectivity term
    quad = 0.5 * np.sum((data.X - params.b) ** 2 / sig2)
    linear = np.sum((data.X / sig2) * W)
    return float(quad - data.n * (params.f @ latent.s) - np.sum(latent.C @ params.g) - linear)


def posterior_speaker(params: GrbmParams, data: SpeakerData) -> np.ndarray:
    """P(s_j = 1 | X): all of a speaker's vectors inform the speaker factor."""
    if data.X.shape[1] != params.dim_p:
        raise ValidationError("posterior_speaker: dimension mismatch")
    return sigmoid(data.n * params.f + params.F.T @ (data.xbar / params.sigma_sq))


def posterior_channel(params: GrbmParams, x) -> np.ndarray:
    """P(c_j = 1 | x): channel posteriors depend only on their own vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim_p,):
        raise ValidationError("posterior_channel: dimension mismatch")
    return sigmoid(params.g + params.G.T @ (x / params.sigma_sq))


def channel_activations(params: GrbmParams, X: np.ndarray) -> np.ndarray:
    """Rows of channel-posterior logits g + (x_n / sigma^2)^T G, shape (N, dim_c)."""
    return params.g + (X / params.sigma_sq) @ params.G


def sample_visible(params: GrbmParams, latent: LatentState, rng) -> SpeakerData:
    """Draw X | (s, C): independent Gaussians around b + F s + G c_n."""
    mean = params.b + params.F @ latent.s + latent.C @ params.G.T
    noise = rng.standard_normal(mean.shape) * np.sqrt(params.sigma_sq)
    return SpeakerData(mean + noise)


def sample_latent(params: GrbmParams, data: SpeakerData, rng) -> LatentState:
    """Draw (s, C) | X by thresholding posteriors with fresh uniforms.

    Draw order is fixed: the speaker factor first, then all channel rows
    (row-major), so a given generator state maps to one configuration.
    """
    ps = posterior_speaker(params, data)
    s = (ps > rng.random(params.dim_s)).astype(np.float64)
    pc = sigmoid(channel_activations(params, data.X))
    C = (pc > rng.random(pc.shape)).astype(np.float64)
    return LatentState(s=s, C=C)


@lru_cache(maxsize=32)
def _binary_configs(dim: int) -> np.ndarray:
    """All {0,1}^dim rows in lexicographic order, shape (2^dim, dim)."""
    if dim == 0:
        return np.zeros((1, 0))
    grid = np.indices((2,) * dim).reshape(dim, -1).T
    out = grid.astype(np.float64)
    out.flags.writeable = False
    return out


def _require_enum_caps(params: GrbmParams) -> None:
    if params.dim_s > ENUM_CAP_BITS or params.dim_c > ENUM_CAP_BITS:
        raise ValidationError(
            f"hidden dims ({params.dim_s}, {params.dim_c}) exceed enumeration cap {ENUM_CAP_BITS}"
        )


def _config_log_integrals(params: GrbmParams, s_rows: np.ndarray) -> np.ndarray:
    """log of the per-vector Gaussian integral of exp(-energy), per (s, c).

    For fixed hidden units the visible integral is available in closed
    form: log I(s, c) = p/2 log(2 pi) + 1/2 sum(z) + f's + g'c
    + (b/sigma^2)'w + 1/2 ||w/sigma||^2 with w = F s + G c. Returns the
    matrix over the given s rows and all channel configurations.
    """
    sig2 = params.sigma_sq
    c_rows = _binary_configs(params.dim_c)
    A = s_rows @ params.F.T  # (Ms, p)
    B = c_rows @ params.G.T  # (Mc, p)
    b_sig = params.b / sig2
    const = 0.5 * params.dim_p * LOG_2PI + 0.5 * params.z.sum()
    term_s = s_rows @ params.f + A @ b_sig + 0.5 * np.sum(A * A / sig2, axis=1)
    term_c = c_rows @ params.g + B @ b_sig + 0.5 * np.sum(B * B / sig2, axis=1)
    cross = (A / sig2) @ B.T
    return const + term_s[:, None] + term_c[None, :] + cross


def _channel_logsumexp_per_s(params: GrbmParams) -> np.ndarray:
    """log sum over c of I(s, c), per speaker configuration, shape (2^dim_s,).

    Processes s configurations in blocks so memory stays bounded at the
    enumeration cap.
    """
    _require_enum_caps(params)
    s_rows = _binary_configs(params.dim_s)
    n_c = 2**params.dim_c
    block = max(1, ENUM_CAP_TABLE // max(n_c, 1))
    parts = []
    for start in range(0, s_rows.shape[0], block):
        logI = _config_log_integrals(params, s_rows[start : start + block])
        parts.append(logsumexp(logI, axis=1))
    return np.concatenate(parts)


def log_partition(params: GrbmParams, n_order: int) -> LogPartition:
    """Exact log Z_N via the per-configuration Gaussian integrals.

    The channel sum factorizes over the N vectors given s, so the cost
    is one pass over the (s, c) configuration grid regardless of N.
    """
    if n_order < 1:
        raise ValidationError("n_order must be >= 1")
    per_s = _channel_logsumexp_per_s(params)
    return LogPartition(n_order=n_order, log_z=float(logsumexp(n_order * per_s)))


def log_marginal(params: GrbmParams, data: SpeakerData, log_z: LogPartition) -> float:
    """log P_N(X): quadratic data term, -log Z_N, and the softplus sums
    from analytically marginalizing the binary factors."""
    if log_z.n_order != data.n:
        raise ValidationError(f"log_z is for N={log_z.n_order}, data has N={data.n}")
    sig2 = params.sigma_sq
    quad = -0.5 * np.sum((data.X - params.b) ** 2 / sig2)
    sp_s = softplus(data.n * params.f + params.F.T @ (data.xbar / sig2)).sum()
    sp_c = softplus(channel_activations(params, data.X)).sum()
    return float(quad - log_z.log_z + sp_s + sp_c)


def log_joint(params: GrbmParams, data: SpeakerData, latent: LatentState, log_z: LogPartition) -> float:
    """log P_N(X, s, C) = -E_N(X, s, C) - log Z_N."""
    if log_z.n_order != data.n:
        raise ValidationError(f"log_z is for N={log_z.n_order}, data has N={data.n}")
    return float(-energy_total(params, data, latent) - log_z.log_z)


def _prior_tables(params: GrbmParams, n_order: int):
    """Exact prior over configurations: P(s) and P(c | s) rows.

    P(s) is proportional to (sum_c I(s, c))^N and the channel factors
    are iid given s with P(c | s) proportional to I(s, c).
    """
    _require_enum_caps(params)
    n_s, n_c = 2**params.dim_s, 2**params.dim_c
    if n_s * n_c > ENUM_CAP_TABLE:
        raise ValidationError("configuration table exceeds enumeration cap")
    logI = _config_log_integrals(params, _binary_configs(params.dim_s))
    per_s = logsumexp(logI, axis=1)
    ls = n_order * per_s
    p_s = np.exp(ls - logsumexp(ls))
    p_s /= p_s.sum()
    p_c_given_s = np.exp(logI - per_s[:, None])
    p_c_given_s /= p_c_given_s.sum(axis=1, keepdims=True)
    return p_s, p_c_given_s


def generate_speaker(
    params: GrbmParams,
    n_vectors: int,
    rng,
    method: str = "auto",
    gibbs_burn_in: int = 1000,
    return_latent: bool = False,
):
    """Sample one speaker's data from the N-order generative model.

    Under the enumeration cap the latent prior is sampled exactly from
    the per-configuration weights; above it (or with method="gibbs") a
    Gibbs chain with `gibbs_burn_in` full sweeps is used instead.
    With return_latent=True the drawn (s, C) is returned alongside X.
    """
    if n_vectors < 1:
        raise ValidationError("n_vectors must be >= 1")
    if method not in ("auto", "exact", "gibbs"):
        raise ValidationError(f"unknown sampling method {method!r}")
    if method == "auto":
        under_cap = (
            params.dim_s <= ENUM_CAP_BITS
            and params.dim_c <= ENUM_CAP_BITS
            and 2 ** (params.dim_s + params.dim_c) <= ENUM_CAP_TABLE
        )
        method = "exact" if under_cap else "gibbs"
    if method == "exact":
        p_s, p_c_given_s = _prior_tables(params, n_vectors)
        s_idx = rng.choice(p_s.shape[0], p=p_s)
        c_idx = rng.choice(p_c_given_s.shape[1], size=n_vectors, p=p_c_given_s[s_idx])
        latent = LatentState(
            s=_binary_configs(params.dim_s)[s_idx],
            C=_binary_configs(params.dim_c)[c_idx],
        )
        data = sample_visible(params, latent, rng)
    else:
        # Gibbs: start from the zero-latent visible conditional, then alternate.
        latent = LatentState(
            s=np.zeros(params.dim_s), C=np.zeros((n_vectors, params.dim_c))
        )
        data = sample_visible(params, latent, rng)
        for _ in range(gibbs_burn_in):
            latent = sample_latent(params, data, rng)
            data = sample_visible(params, latent, rng)
    if return_latent:
        return data, latent
    return data


def serialize_params(params: GrbmParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<IIII", MODEL_VERSION, params.dim_p, params.dim_s, params.dim_c))
    for arr in (params.b, params.f, params.g, params.z, params.F, params.G):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_grbm(params: GrbmParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_grbm(path) -> GrbmParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ValidationError(f"{path}: not a GRBM model file")
    version, p, ds, dc = struct.unpack("<IIII", raw[4:20])
    if version != MODEL_VERSION:
        raise ValidationError(f"{path}: unsupported model version {version}")
    sizes = [p, ds, dc, p, p * ds, p * dc]
    offset = 20
    flats = []
    for n in sizes:
        flats.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64))
        offset += 8 * n
    b, f, g, z, F, G = flats
    return GrbmParams(b=b, f=f, g=g, F=F.reshape(p, ds), G=G.reshape(p, dc), z=z)


def params_hash(params: GrbmParams) -> str:
    return hashlib.sha256(serialize_params(params)).hexdigest()
