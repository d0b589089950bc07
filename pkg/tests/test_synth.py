"""Synthetic corpus generation from truth models."""

import numpy as np
import pytest

import oracles
from spkrbm.errors import ValidationError
from spkrbm.grbm import GrbmParams
from spkrbm.plda import PldaParams
from spkrbm.synth import read_manifest, synth_corpus, synth_plda_corpus, write_manifest


def balanced_truth(p=2, f_norm=8.0, g_norm=0.5):
    F = np.zeros((p, 1))
    F[0, 0] = f_norm
    G = np.zeros((p, 1))
    G[-1, 0] = g_norm
    return GrbmParams(
        b=np.zeros(p),
        f=np.array([-0.5 * f_norm**2]),
        g=np.array([-0.5 * g_norm**2]),
        F=F,
        G=G,
        z=np.zeros(p),
    )


class TestSynthCorpus:
    def test_fixed_range_gives_exact_count(self):
        truth = balanced_truth()
        corpus, manifest = synth_corpus(truth, 100, (5, 5), seed=0)
        assert len(corpus) == 500
        assert corpus.n_speakers == 100
        assert all(len(idx) == 5 for idx in corpus.speakers.values())
        assert manifest["n_speakers"] == 100

    def test_seed_reproducibility(self):
        truth = balanced_truth()
        a, _ = synth_corpus(truth, 20, (2, 6), seed=3)
        b, _ = synth_corpus(truth, 20, (2, 6), seed=3)
        np.testing.assert_array_equal(a.matrix(), b.matrix())
        assert [r.vector_id for r in a.records] == [r.vector_id for r in b.records]

    def test_different_seeds_differ(self):
        truth = balanced_truth()
        a, _ = synth_corpus(truth, 5, (3, 3), seed=1)
        b, _ = synth_corpus(truth, 5, (3, 3), seed=2)
        assert not np.array_equal(a.matrix(), b.matrix())

    def test_strong_speaker_subspace_separates_scatter(self):
        truth = balanced_truth(f_norm=8.0, g_norm=0.5)
        corpus, _ = synth_corpus(truth, 100, (5, 5), seed=4)
        X = corpus.matrix()
        grand = X.mean(axis=0)
        s_b = np.zeros((2, 2))
        s_w = np.zeros((2, 2))
        for sid in corpus.speakers:
            Y = corpus.speaker_matrix(sid)
            mu = Y.mean(axis=0)
            d = mu - grand
            s_b += Y.shape[0] * np.outer(d, d)
            centered = Y - mu
            s_w += centered.T @ centered
        assert np.trace(s_b) / np.trace(s_w) > 1.0

    def test_sample_variance_matches_enumerated_model_variance(self):
        rng = np.random.default_rng(5)
        truth = oracles.random_params(rng, 3, 2, 1, scale=0.8, z_scale=0.2)
        n_per = 4
        corpus, _ = synth_corpus(truth, 2500, (n_per, n_per), seed=6)
        sample_var = corpus.matrix().var(axis=0)
        model_var = oracles.model_coordinate_variance(truth, n_per)
        np.testing.assert_allclose(sample_var, model_var, rtol=0.10)

    def test_invalid_range_rejected(self):
        truth = balanced_truth()
        with pytest.raises(ValidationError):
            synth_corpus(truth, 10, (0, 3), seed=0)
        with pytest.raises(ValidationError):
            synth_corpus(truth, 10, (4, 2), seed=0)

    def test_manifest_round_trip(self, tmp_path):
        truth = balanced_truth()
        _, manifest = synth_corpus(truth, 4, (2, 2), seed=9)
        path = tmp_path / "manifest.txt"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert loaded["kind"] == "grbm"
        assert loaded["seed"] == "9"
        assert loaded["truth_hash"] == manifest["truth_hash"]


class TestSynthPldaCorpus:
    def test_pure_noise_model_is_standard_normal(self):
        truth = PldaParams(
            mu=np.zeros(3), V=np.zeros((3, 1)), U=np.zeros((3, 1)), residual=np.ones(3)
        )
        corpus, _ = synth_plda_corpus(truth, 1000, (5, 5), seed=0)
        X = corpus.matrix()
        n = X.shape[0]
        assert np.all(np.abs(X.mean(axis=0)) < 4.0 / np.sqrt(n))
        assert np.all(np.abs(X.var(axis=0) - 1.0) < 4.0 * np.sqrt(2.0 / n))
        # fourth moment of a standard normal is 3
        assert np.all(np.abs((X**4).mean(axis=0) - 3.0) < 0.5)

    def test_degenerate_residual_stays_in_span(self):
        rng = np.random.default_rng(1)
        V = rng.standard_normal((4, 1))
        U = rng.standard_normal((4, 1))
        truth = PldaParams(mu=np.zeros(4), V=V, U=U, residual=np.full(4, 1e-12))
        corpus, _ = synth_plda_corpus(truth, 30, (3, 3), seed=2)
        X = corpus.matrix()
        basis, _ = np.linalg.qr(np.hstack([V, U]))
        residual = X - (X @ basis) @ basis.T
        assert np.max(np.abs(residual)) < 1e-4

    def test_seed_reproducibility(self):
        rng = np.random.default_rng(3)
        truth = PldaParams(
            mu=rng.standard_normal(3),
            V=rng.standard_normal((3, 2)),
            U=rng.standard_normal((3, 1)),
            residual=0.5 * np.ones(3),
        )
        a, _ = synth_plda_corpus(truth, 10, (2, 4), seed=11)
        b, _ = synth_plda_corpus(truth, 10, (2, 4), seed=11)
        np.testing.assert_array_equal(a.matrix(), b.matrix())
