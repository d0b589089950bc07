"""Two-factor Gaussian PLDA: EM training and likelihood-ratio scoring.

The model is x = mu + V h_s + U h_c + eps with h_s shared across a
speaker's vectors, h_c and eps per vector, standard-normal factors, and
diagonal residual covariance. The mean is fixed at the sample mean, so
EM over (V, U, residual) has exact E and M steps and a non-decreasing
marginal likelihood.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import IVectorCorpus
from .errors import NumericError, ValidationError
from .mathutil import derive_rng

MODEL_MAGIC = b"PLDA"
MODEL_VERSION = 1

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PldaParams:
    """mu (p,), V (p, q_s), U (p, q_c), residual diagonal covariance (p,)."""

    mu: np.ndarray
    V: np.ndarray
    U: np.ndarray
    residual: np.ndarray

    def __post_init__(self):
        for name in ("mu", "V", "U", "residual"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"PLDA parameter {name} contains non-finite values")
            object.__setattr__(self, name, arr)
        p = self.mu.shape[0]
        if self.V.shape[0] != p or self.U.shape[0] != p or self.residual.shape != (p,):
            raise ValidationError("PLDA parameter shapes inconsistent")
        if np.any(self.residual <= 0):
            raise ValidationError("residual covariance entries must be positive")

    @property
    def dim_p(self) -> int:
        return self.mu.shape[0]

    @property
    def q_s(self) -> int:
        return self.V.shape[1]

    @property
    def q_c(self) -> int:
        return self.U.shape[1]


def _grouped(corpus: IVectorCorpus):
    return {sid: corpus.speaker_matrix(sid) for sid in corpus.speakers}


def plda_train(
    corpus: IVectorCorpus, q_s: int, q_c: int, em_iters: int = 20, seed: int = 0
) -> PldaParams:
    """Fit the factor model by EM with a fixed iteration count.

    Initialization is seeded: mu is the sample mean, V and U are scaled
    Gaussian draws, the residual starts at the sample variance diagonal.
    """
    if q_s < 1 or q_c < 0:
        raise ValidationError("q_s must be >= 1 and q_c >= 0")
    groups = _grouped(corpus)
    if sum(1 for Y in groups.values() if Y.shape[0] >= 2) < 2:
        raise ValidationError("PLDA needs at least 2 speakers with at least 2 vectors")
    if q_s + q_c > corpus.dim_p:
        import warnings

        warnings.warn(f"q_s + q_c = {q_s + q_c} exceeds feature dimension {corpus.dim_p}")
    X = corpus.matrix()
    p = corpus.dim_p
    mu = X.mean(axis=0)
    var = X.var(axis=0)
    rng = derive_rng(seed, 0)
    scale = 0.1 * float(np.mean(np.sqrt(var)))
    V = scale * rng.standard_normal((p, q_s))
    U = scale * rng.standard_normal((p, q_c))
    params = PldaParams(mu=mu, V=V, U=U, residual=var.copy())
    for _ in range(em_iters):
        params = _em_step(params, groups)
    return params


def _posterior_blocks(params: PldaParams, n: int):
    """Joint posterior precision over [h_s; h_c1; ...; h_cn] and its inverse.

    The precision depends only on the vector count, so speakers with the
    same n share one factorization.
    """
    qs, qc = params.q_s, params.q_c
    lam_inv = 1.0 / params.residual
    Vl = params.V * lam_inv[:, None]
    VtLV = params.V.T @ Vl
    VtLU = Vl.T @ params.U
    UtLU = params.U.T @ (params.U * lam_inv[:, None])
    q = qs + n * qc
    P = np.zeros((q, q))
    P[:qs, :qs] = np.eye(qs) + n * VtLV
    for j in range(n):
        sl = slice(qs + j * qc, qs + (j + 1) * qc)
        P[:qs, sl] = VtLU
        P[sl, :qs] = VtLU.T
        P[sl, sl] = np.eye(qc) + UtLU
    return np.linalg.inv(P)


def plda_posterior(params: PldaParams, Y: np.ndarray) -> tuple:
    """Posterior mean and covariance of [h_s; h_c1; ...; h_cn] given one
    speaker's vectors Y (n, p)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    n = Y.shape[0]
    qs, qc = params.q_s, params.q_c
    Sigma = _posterior_blocks(params, n)
    lam_inv = 1.0 / params.residual
    Yc = Y - params.mu
    h = np.empty(qs + n * qc)
    h[:qs] = params.V.T @ (lam_inv * Yc.sum(axis=0))
    if qc:
        h[qs:] = ((Yc * lam_inv) @ params.U).reshape(-1)
    return Sigma @ h, Sigma


def _em_step(params: PldaParams, groups: dict) -> PldaParams:
    p, qs, qc = params.dim_p, params.q_s, params.q_c
    r = qs + qc
    lam_inv = 1.0 / params.residual
    R1 = np.zeros((p, r))
    R2 = np.zeros((r, r))
    s_diag = np.zeros(p)
    total = 0
    # the posterior covariance depends only on the vector count, so its
    # per-vector block sums can be shared across speakers with the same n
    cov_cache: dict[int, tuple] = {}
    for Y in groups.values():
        n = Y.shape[0]
        if n not in cov_cache:
            Sigma = _posterior_blocks(params, n)
            cov_ss = Sigma[:qs, :qs]
            cross_sum = Sigma[:qs, qs:].reshape(qs, n, qc).sum(axis=1)
            cc_sum = np.zeros((qc, qc))
            for j in range(n):
                sl = slice(qs + j * qc, qs + (j + 1) * qc)
                cc_sum += Sigma[sl, sl]
            cov_cache[n] = (Sigma, cov_ss, cross_sum, cc_sum)
        Sigma, cov_ss, cross_sum, cc_sum = cov_cache[n]
        Yc = Y - params.mu
        h = np.empty(qs + n * qc)
        h[:qs] = params.V.T @ (lam_inv * Yc.sum(axis=0))
        if qc:
            h[qs:] = ((Yc * lam_inv) @ params.U).reshape(-1)
        m = Sigma @ h
        m_s = m[:qs]
        m_c = m[qs:].reshape(n, qc)
        R1[:, :qs] += np.outer(Yc.sum(axis=0), m_s)
        R1[:, qs:] += Yc.T @ m_c
        R2[:qs, :qs] += n * (cov_ss + np.outer(m_s, m_s))
        if qc:
            cross = cross_sum + np.outer(m_s, m_c.sum(axis=0))
            R2[:qs, qs:] += cross
            R2[qs:, :qs] += cross.T
            R2[qs:, qs:] += cc_sum + m_c.T @ m_c
        s_diag += np.sum(Yc**2, axis=0)
        total += n
    W = np.linalg.solve(R2, R1.T).T
    residual = (s_diag - np.einsum("ij,ij->i", W, R1)) / total
    if np.any(residual <= 0) or not np.all(np.isfinite(residual)):
        raise NumericError("degenerate residual covariance in PLDA M-step")
    return PldaParams(mu=params.mu, V=W[:, :qs], U=W[:, qs:], residual=residual)


class PldaScorer:
    """Caches the channel-marginalized covariance solve for repeated trials."""

    def __init__(self, params: PldaParams):
        self.params = params
        phi = params.U @ params.U.T + np.diag(params.residual)
        self._cho = cho_factor(phi, lower=True)
        self._logdet_phi = 2.0 * float(np.sum(np.log(np.diag(self._cho[0]))))
        self._phi_inv_v = cho_solve(self._cho, params.V)

    def set_loglik(self, Y: np.ndarray) -> float:
        """log P of a vector set under one shared speaker factor."""
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if Y.shape[1] != self.params.dim_p:
            raise ValidationError("PLDA scoring: dimension mismatch")
        n, p = Y.shape
        Yc = Y - self.params.mu
        quad = float(np.sum(Yc * cho_solve(self._cho, Yc.T).T))
        qs = self.params.q_s
        P = np.eye(qs) + n * (self.params.V.T @ self._phi_inv_v)
        eta = self._phi_inv_v.T @ Yc.sum(axis=0)
        sign, logdet_p = np.linalg.slogdet(P)
        if sign <= 0:
            raise NumericError("non-positive-definite speaker-factor posterior")
        corr = float(eta @ np.linalg.solve(P, eta))
        return -0.5 * (quad + n * p * LOG_2PI + n * self._logdet_phi + logdet_p - corr)

    def score(self, enrollment: np.ndarray, test: np.ndarray) -> float:
        """LLR of same-speaker vs independent hypotheses for one trial."""
        enrollment = np.atleast_2d(np.asarray(enrollment, dtype=np.float64))
        test = np.asarray(test, dtype=np.float64)
        joint = np.vstack([enrollment, test[None, :]])
        return self.set_loglik(joint) - self.set_loglik(enrollment) - self.set_loglik(test[None, :])


def plda_score(params: PldaParams, enrollment, test) -> float:
    """One-shot trial score; use PldaScorer for many trials."""
    return PldaScorer(params).score(enrollment, test)


def plda_log_likelihoods(params: PldaParams, corpus: IVectorCorpus) -> np.ndarray:
    """Marginal log-likelihood of each speaker's vector set, in speaker order."""
    scorer = PldaScorer(params)
    return np.array([scorer.set_loglik(corpus.speaker_matrix(sid)) for sid in corpus.speakers])


def plda_log_likelihood(params: PldaParams, corpus: IVectorCorpus) -> float:
    """Total marginal log-likelihood of a labelled corpus."""
    return float(plda_log_likelihoods(params, corpus).sum())


def serialize_plda(params: PldaParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<IIII", MODEL_VERSION, params.dim_p, params.q_s, params.q_c))
    for arr in (params.mu, params.V, params.U, params.residual):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_plda(params: PldaParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_plda(params))


def load_plda(path) -> PldaParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ValidationError(f"{path}: not a PLDA model file")
    version, p, qs, qc = struct.unpack("<IIII", raw[4:20])
    if version != MODEL_VERSION:
        raise ValidationError(f"{path}: unsupported model version {version}")
    sizes = [p, p * qs, p * qc, p]
    offset = 20
    flats = []
    for n in sizes:
        flats.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64))
        offset += 8 * n
    mu, V, U, residual = flats
    return PldaParams(mu=mu, V=V.reshape(p, qs), U=U.reshape(p, qc), residual=residual)


def plda_hash(params: PldaParams) -> str:
    return hashlib.sha256(serialize_plda(params)).hexdigest()
