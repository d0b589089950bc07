"""PLDA EM training and likelihood-ratio scoring."""

import math

import numpy as np
import pytest

import oracles
from spkrbm.data import IVectorCorpus, IVectorRecord
from spkrbm.errors import ValidationError
from spkrbm.mathutil import make_rng
from spkrbm.plda import (
    PldaParams,
    PldaScorer,
    load_plda,
    plda_hash,
    plda_log_likelihood,
    plda_log_likelihoods,
    plda_posterior,
    plda_score,
    plda_train,
    save_plda,
)
from spkrbm.synth import synth_plda_corpus


def random_plda(rng, p, qs, qc, res_scale=0.5):
    return PldaParams(
        mu=rng.standard_normal(p),
        V=rng.standard_normal((p, qs)),
        U=rng.standard_normal((p, qc)),
        residual=res_scale * (0.5 + rng.random(p)),
    )


class TestEmTraining:
    def test_loglik_nondecreasing(self):
        rng = make_rng(0)
        truth = random_plda(rng, 5, 2, 1)
        corpus, _ = synth_plda_corpus(truth, 40, (3, 6), seed=1)
        lls = [
            plda_log_likelihood(plda_train(corpus, 2, 1, em_iters=i, seed=7), corpus)
            for i in range(0, 13)
        ]
        for a, b in zip(lls[:-1], lls[1:]):
            assert b >= a - 1e-8

    def test_speaker_subspace_recovery(self):
        rng = make_rng(1)
        truth = PldaParams(
            mu=np.zeros(10),
            V=rng.standard_normal((10, 2)),
            U=0.7 * rng.standard_normal((10, 1)),
            residual=0.3 * np.ones(10),
        )
        corpus, _ = synth_plda_corpus(truth, 500, (8, 8), seed=2)
        # factor-model EM converges slowly; a few hundred steps are needed
        fitted = plda_train(corpus, 2, 1, em_iters=400, seed=3)
        truth_cov = truth.V @ truth.V.T
        fit_cov = fitted.V @ fitted.V.T
        rel = np.linalg.norm(fit_cov - truth_cov) / np.linalg.norm(truth_cov)
        assert rel < 0.15

    def test_estep_matches_gaussian_conditioning(self):
        # independent oracle: condition the dense joint Gaussian over
        # (latents, data) with the Schur complement
        rng = make_rng(2)
        params = random_plda(rng, 3, 2, 1)
        Y = rng.standard_normal((4, 3)) + params.mu
        mean, cov = plda_posterior(params, Y)

        n, p = Y.shape
        qs, qc = 2, 1
        q = qs + n * qc
        A = np.zeros((n * p, q))
        for j in range(n):
            A[j * p : (j + 1) * p, :qs] = params.V
            A[j * p : (j + 1) * p, qs + j * qc : qs + (j + 1) * qc] = params.U
        cov_xx = A @ A.T + np.kron(np.eye(n), np.diag(params.residual))
        cov_ux = A.T
        solve = np.linalg.solve(cov_xx, (Y - params.mu).reshape(-1))
        mean_want = cov_ux @ solve
        cov_want = np.eye(q) - cov_ux @ np.linalg.solve(cov_xx, cov_ux.T)
        np.testing.assert_allclose(mean, mean_want, atol=1e-10)
        np.testing.assert_allclose(cov, cov_want, atol=1e-10)

    def test_no_channel_subspace_matches_two_covariance_oracle(self):
        rng = make_rng(3)
        truth = random_plda(rng, 4, 2, 0)
        corpus, _ = synth_plda_corpus(truth, 30, (2, 5), seed=4)
        fitted = plda_train(corpus, 2, 0, em_iters=10, seed=5)
        got = plda_log_likelihoods(fitted, corpus)
        B = fitted.V @ fitted.V.T
        W = np.diag(fitted.residual)
        want = np.array(
            [
                oracles.two_cov_loglik_per_speaker(B, W, fitted.mu, corpus.speaker_matrix(sid))
                for sid in corpus.speakers
            ]
        )
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_degenerate_corpus_rejected(self):
        records = tuple(
            IVectorRecord(f"v{j}", "only", 1.0, np.array([float(j), 0.0])) for j in range(5)
        )
        corpus = IVectorCorpus(dim_p=2, records=records)
        with pytest.raises(ValidationError):
            plda_train(corpus, 1, 0)


class TestScoring:
    def test_no_speaker_subspace_scores_zero(self):
        rng = make_rng(4)
        params = PldaParams(
            mu=rng.standard_normal(3),
            V=np.zeros((3, 2)),
            U=rng.standard_normal((3, 1)),
            residual=np.ones(3),
        )
        scorer = PldaScorer(params)
        for _ in range(5):
            E = rng.standard_normal((4, 3))
            t = rng.standard_normal(3)
            assert scorer.score(E, t) == pytest.approx(0.0, abs=1e-10)

    def test_scalar_closed_form(self):
        v, lam, mu = 0.8, 0.4, 0.3
        params = PldaParams(
            mu=np.array([mu]), V=np.array([[v]]), U=np.zeros((1, 0)), residual=np.array([lam])
        )
        e, t = 0.9, 0.55
        a = v * v + lam
        b = v * v
        det = a * a - b * b
        quad = (a * (e - mu) ** 2 - 2 * b * (e - mu) * (t - mu) + a * (t - mu) ** 2) / det
        log_joint = -math.log(2 * math.pi) - 0.5 * math.log(det) - 0.5 * quad
        log_e = -0.5 * math.log(2 * math.pi * a) - 0.5 * (e - mu) ** 2 / a
        log_t = -0.5 * math.log(2 * math.pi * a) - 0.5 * (t - mu) ** 2 / a
        want = log_joint - log_e - log_t
        got = plda_score(params, np.array([[e]]), np.array([t]))
        assert got == pytest.approx(want, abs=1e-12)

    def test_enrollment_order_invariance(self):
        rng = make_rng(5)
        params = random_plda(rng, 4, 2, 1)
        E = rng.standard_normal((5, 4))
        t = rng.standard_normal(4)
        scorer = PldaScorer(params)
        base = scorer.score(E, t)
        for _ in range(4):
            perm = rng.permutation(5)
            assert scorer.score(E[perm], t) == pytest.approx(base, rel=1e-12)

    def test_multi_enrollment_matches_dense_joint_oracle(self):
        rng = make_rng(6)
        params = random_plda(rng, 3, 2, 1)
        E = rng.standard_normal((4, 3))
        t = rng.standard_normal(3)
        got = PldaScorer(params).score(E, t)

        phi = params.U @ params.U.T + np.diag(params.residual)
        B = params.V @ params.V.T

        def dense(Y):
            return oracles.two_cov_loglik_per_speaker(B, phi, params.mu, Y)

        want = dense(np.vstack([E, t])) - dense(E) - dense(t[None, :])
        assert got == pytest.approx(want, abs=1e-9)

    def test_target_trials_score_higher_on_average(self):
        rng = make_rng(7)
        truth = PldaParams(
            mu=np.zeros(6),
            V=2.0 * rng.standard_normal((6, 2)),
            U=0.5 * rng.standard_normal((6, 1)),
            residual=0.4 * np.ones(6),
        )
        corpus, _ = synth_plda_corpus(truth, 60, (6, 6), seed=8)
        fitted = plda_train(corpus, 2, 1, em_iters=15, seed=9)
        scorer = PldaScorer(fitted)
        tar, non = [], []
        sids = list(corpus.speakers)
        for i, sid in enumerate(sids[:20]):
            Y = corpus.speaker_matrix(sid)
            tar.append(scorer.score(Y[:5], Y[5]))
            other = corpus.speaker_matrix(sids[(i + 1) % len(sids)])
            non.append(scorer.score(Y[:5], other[5]))
        assert np.mean(tar) > np.mean(non)

    def test_reparameterization_invariance(self):
        rng = make_rng(8)
        params = random_plda(rng, 3, 2, 1)
        doubled = PldaParams(
            mu=2.0 * params.mu, V=2.0 * params.V, U=2.0 * params.U,
            residual=4.0 * params.residual,
        )
        E = rng.standard_normal((3, 3))
        t = rng.standard_normal(3)
        a = plda_score(params, E, t)
        b = plda_score(doubled, 2.0 * E, 2.0 * t)
        assert a == pytest.approx(b, rel=1e-10)


class TestModelIO:
    def test_round_trip_and_hash(self, tmp_path):
        rng = make_rng(9)
        params = random_plda(rng, 4, 2, 1)
        path = tmp_path / "m.plda"
        save_plda(params, path)
        loaded = load_plda(path)
        for name in ("mu", "V", "U", "residual"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(params, name))
        assert plda_hash(loaded) == plda_hash(params)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.plda"
        path.write_bytes(b"WHAT" + b"\0" * 16)
        with pytest.raises(ValidationError):
            load_plda(path)
