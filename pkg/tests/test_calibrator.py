import numpy as np
import pytest

from bridgecal.calibrator import (
    calibrate_row,
    candidate_items,
    candidate_set,
    conservative_coeff,
    global_correction_score,
    inference_score,
    train_score,
)
from bridgecal.encoder import init_params
from bridgecal.errors import ConfigError
from bridgecal.spectral import FusedEmbeddings
from bridgecal.topk import top_k_indices



class TestTopK:
    def test_basic(self):
        scores = np.array([0.1, 0.9, 0.5])
        assert top_k_indices(scores, 2).tolist() == [1, 2]

    def test_tie_smaller_index(self):
        scores = np.ones(4)
        assert top_k_indices(scores, 1).tolist() == [0]
        assert top_k_indices(scores, 3).tolist() == [0, 1, 2]

    def test_k_at_least_n(self):
        scores = np.array([0.3, 0.7, 0.7])
        assert top_k_indices(scores, 10).tolist() == [1, 2, 0]

    def test_matches_full_sort(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            scores = rng.choice([0.0, 0.25, 0.5, 1.0], size=n)  # force ties
            k = int(rng.integers(1, n + 1))
            order = np.lexsort((np.arange(n), -scores))
            np.testing.assert_array_equal(top_k_indices(scores, k), order[:k])


class TestCandidateSet:
    def test_train_variant_keeps_train_items(self, tiny_ds):
        params = init_params(tiny_ds, channels=("id",), dim=4, seed=0)
        rng = np.random.default_rng(1)
        vectors = rng.standard_normal((tiny_ds.num_users + tiny_ds.num_items, 4))
        e = FusedEmbeddings(num_users=tiny_ds.num_users, vectors=vectors)
        cs = candidate_set(e, 0, k_c=tiny_ds.num_items, exclude_train=False, ds=tiny_ds)
        assert cs.items.size == tiny_ds.num_items
        assert cs.source == "train"

    def test_inference_variant_excludes_train(self, tiny_ds):
        rng = np.random.default_rng(2)
        vectors = rng.standard_normal((tiny_ds.num_users + tiny_ds.num_items, 4))
        e = FusedEmbeddings(num_users=tiny_ds.num_users, vectors=vectors)
        for u in range(tiny_ds.num_users):
            cs = candidate_set(e, u, k_c=3, exclude_train=True, ds=tiny_ds)
            assert cs.source == "inference"
            assert not np.isin(cs.items, tiny_ds.train_history[u]).any()

    def test_membership(self, tiny_ds):
        rng = np.random.default_rng(3)
        vectors = rng.standard_normal((tiny_ds.num_users + tiny_ds.num_items, 4))
        e = FusedEmbeddings(num_users=tiny_ds.num_users, vectors=vectors)
        cs = candidate_set(e, 1, k_c=4, exclude_train=False, ds=tiny_ds)
        items = set(cs.items.tolist())
        for i in range(tiny_ds.num_items):
            assert cs.contains(i) == (i in items)

    def test_tie_determinism(self):
        scores = np.zeros(5)
        assert candidate_items(scores, 1).tolist() == [0]

    def test_all_items_when_k_too_big(self):
        scores = np.array([0.3, 0.2, 0.1])
        assert candidate_items(scores, 99).tolist() == [0, 1, 2]


class TestScores:
    def test_train_score_examples(self):
        assert train_score(1.0, True, 0.5, 0.4) == pytest.approx(1.2)
        assert train_score(1.0, False, 0.5, 0.4) == pytest.approx(1.0)
        assert train_score(1.0, True, -0.5, 0.4) == pytest.approx(0.8)

    def test_inference_matches_train_arithmetic(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal(50)
        b = rng.standard_normal(50)
        flags = rng.random(50) > 0.5
        np.testing.assert_array_equal(
            train_score(s, flags, b, 0.4), inference_score(s, flags, b, 0.4)
        )

    def test_out_of_scope_bit_exact(self):
        s = np.array([0.123456789, -2.5, 3.25])
        out = inference_score(s, np.array([False, False, False]), np.ones(3), 0.7)
        assert np.array_equal(out, s)

    def test_lambda_zero_identity_ranking(self):
        rng = np.random.default_rng(5)
        s = rng.standard_normal(30)
        b = rng.standard_normal(30)
        out = inference_score(s, np.ones(30, bool), b, 0.0)
        np.testing.assert_array_equal(np.argsort(-out), np.argsort(-s))

    def test_delta_linearity(self):
        rng = np.random.default_rng(6)
        s = rng.standard_normal(20)
        b = rng.standard_normal(20)
        for lam in (0.1, 0.2, 0.4, 0.6, 0.8):
            delta = inference_score(s, np.ones(20, bool), b, lam) - s
            np.testing.assert_allclose(delta, lam * b, rtol=0, atol=1e-15)

    def test_global_correction(self):
        s = np.array([1.0, 2.0])
        b = np.array([0.5, -0.5])
        out = global_correction_score(s, b, 0.4)
        np.testing.assert_allclose(out, [1.2, 1.8])


class TestConservativeCoeff:
    def test_all_zero_gives_half(self, tiny_ds):
        params = init_params(tiny_ds, channels=("id",), dim=4, conservative=True, seed=0)
        assert conservative_coeff(params, 0.0, 0.0, 0, 0) == pytest.approx(0.5)

    def test_saturation(self, tiny_ds):
        params = init_params(tiny_ds, channels=("id",), dim=4, conservative=True, seed=0)
        params.coeff.user_bias[0] = 50.0
        eta = conservative_coeff(params, 0.3, -0.2, 0, 1)
        assert eta == pytest.approx(1.0, abs=1e-6)

    def test_sign_never_flips(self, tiny_ds):
        params = init_params(tiny_ds, channels=("id",), dim=4, conservative=True, seed=0)
        rng = np.random.default_rng(7)
        params.coeff.user_bias[...] = rng.standard_normal(tiny_ds.num_users)
        params.coeff.score_coef[...] = 1.5
        params.coeff.behavior_coef[...] = -0.7
        for _ in range(100):
            b = float(rng.standard_normal())
            eta = conservative_coeff(params, float(rng.standard_normal()), b,
                                     int(rng.integers(tiny_ds.num_users)),
                                     int(rng.integers(tiny_ds.num_items)))
            assert 0.0 < eta < 1.0
            assert np.sign(eta * b) == np.sign(b)

    def test_missing_coeff_params(self, tiny_ds):
        params = init_params(tiny_ds, channels=("id",), dim=4, seed=0)
        with pytest.raises(ConfigError):
            conservative_coeff(params, 0.0, 0.0, 0, 0)


class TestCalibrateRow:
    def test_out_of_scope_rows_bit_exact(self):
        rng = np.random.default_rng(8)
        base = rng.standard_normal(40)
        b = rng.standard_normal(40)
        cand = np.array([3, 7, 21])
        out = calibrate_row(base, cand, b, 0.4)
        outside = np.setdiff1d(np.arange(40), cand)
        assert np.array_equal(out[outside], base[outside])
        np.testing.assert_allclose(out[cand], base[cand] + 0.4 * b[cand], atol=0)

    def test_global_scope_touches_everything(self):
        rng = np.random.default_rng(9)
        base = rng.standard_normal(10)
        b = rng.standard_normal(10)
        out = calibrate_row(base, np.array([0]), b, 0.4, scope="global")
        np.testing.assert_allclose(out, base + 0.4 * b, atol=0)

    def test_permutation_safety(self):
        rng = np.random.default_rng(10)
        n = 25
        base = rng.standard_normal(n)
        b = rng.standard_normal(n)
        cand = np.sort(rng.choice(n, size=8, replace=False))
        out = calibrate_row(base, cand, b, 0.4)
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        cand_p = np.sort(perm[cand])
        out_p = calibrate_row(base[inv], cand_p, b[inv], 0.4)
        np.testing.assert_array_equal(out_p[perm], out)

    def test_none_behavior_returns_base_copy(self):
        base = np.arange(5, dtype=np.float64)
        out = calibrate_row(base, np.array([1]), None, 0.4)
        assert np.array_equal(out, base)
        out[0] = 99.0
        assert base[0] == 0.0
