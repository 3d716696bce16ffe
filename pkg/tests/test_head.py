import math

import numpy as np
import pytest

from tkpcl.head import PoolingConfig, classify, confidence_sets, pool
from tkpcl.numerics import Tensor, finite_diff_check


def random_scores(rng, s, c):
    logits = rng.normal(0.0, 2.0, size=(s, c))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sort_then_average(z, k):
    """Oracle: sort each column descending, average the first k (exactly rounded sum)."""
    k = min(k, z.shape[0])
    return np.array([math.fsum(sorted(z[:, c], reverse=True)[:k]) / k for c in range(z.shape[1])])


class TestClassify:
    def test_zero_logits_split_evenly(self):
        f = Tensor(np.ones((3, 4)))
        z = classify(f, Tensor(np.zeros((4, 2)))).z.data
        np.testing.assert_array_equal(z, 0.5)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.normal(size=(5, 3)))
        w = rng.normal(size=(3, 4))
        # adding a constant to every logit of a row: F (W + a 1^T) shifts row i by F_i . a
        a = rng.normal(size=(3, 1))
        z1 = classify(f, Tensor(w)).z.data
        z2 = classify(f, Tensor(w + a)).z.data
        np.testing.assert_allclose(z1, z2, atol=1e-14)

    def test_rows_match_exp_normalise_oracle(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(16, 8))
        w = rng.normal(size=(8, 6))
        z = classify(Tensor(f), Tensor(w)).z.data
        logits = f @ w
        for i in range(16):
            ex = [math.exp(v) for v in logits[i]]
            total = math.fsum(ex)
            np.testing.assert_allclose(z[i], [v / total for v in ex], rtol=1e-12, atol=0)
        np.testing.assert_allclose(z.sum(axis=1), 1.0, atol=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            classify(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestPool:
    def test_top2_example(self):
        z = np.array([[0.9], [0.7], [0.2], [0.1]])
        y = pool(Tensor(z), PoolingConfig("topk", 2)).y.data
        assert y[0] == pytest.approx(0.8, abs=1e-15)

    def test_k1_equals_max(self):
        rng = np.random.default_rng(2)
        z = random_scores(rng, 30, 5)
        a = pool(Tensor(z), PoolingConfig("topk", 1)).y.data
        b = pool(Tensor(z), PoolingConfig("max")).y.data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("k", range(1, 11))
    def test_matches_sort_oracle(self, k):
        rng = np.random.default_rng(100 + k)
        for _ in range(10):
            z = random_scores(rng, 100, 6)
            got = pool(Tensor(z), PoolingConfig("topk", k)).y.data
            assert got.tobytes() == sort_then_average(z, k).tobytes()

    def test_k_clamped_to_s(self):
        z = random_scores(np.random.default_rng(3), 4, 3)
        a = pool(Tensor(z), PoolingConfig("topk", 50)).y.data
        b = pool(Tensor(z), PoolingConfig("avg")).y.data
        assert a.tobytes() == b.tobytes()

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError):
            pool(Tensor(np.ones((3, 2)) / 2), PoolingConfig("topk", 0))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            pool(Tensor(np.ones((3, 2)) / 2), PoolingConfig("median", 2))

    def test_ties_prefer_lower_patch_index(self):
        z = np.array([[0.5], [0.7], [0.5], [0.5]])
        pred = pool(Tensor(z), PoolingConfig("topk", 2))
        assert list(pred.selected_indices[:, 0]) == [0, 1]

    def test_selected_mean_invariant(self):
        z = random_scores(np.random.default_rng(4), 20, 4)
        pred = pool(Tensor(z), PoolingConfig("topk", 6))
        for c in range(4):
            assert pred.y.data[c] == pytest.approx(z[pred.selected_indices[:, c], c].mean(), abs=1e-15)

    def test_gradient_routes_one_over_k(self):
        z = Tensor(np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]), requires_grad=True)
        pool(z, PoolingConfig("topk", 2)).y.sum().backward()
        np.testing.assert_array_equal(z.grad, [[0.5, 0.0], [0.0, 0.5], [0.5, 0.5]])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(5)
        zs = np.stack([random_scores(rng, 12, 3) for _ in range(4)])
        batched = pool(Tensor(zs), PoolingConfig("topk", 3)).y.data
        for i in range(4):
            assert batched[i].tobytes() == pool(Tensor(zs[i]), PoolingConfig("topk", 3)).y.data.tobytes()

    @pytest.mark.parametrize("mode", ["topk", "max", "avg"])
    def test_monotone_in_single_entry(self, mode):
        rng = np.random.default_rng(6)
        for _ in range(50):
            z = rng.random((10, 3))
            base = pool(Tensor(z), PoolingConfig(mode, 4)).y.data
            i, c = rng.integers(10), rng.integers(3)
            z2 = z.copy()
            z2[i, c] += rng.random()
            bumped = pool(Tensor(z2), PoolingConfig(mode, 4)).y.data
            assert bumped[c] >= base[c]

    @pytest.mark.parametrize("mode", ["topk", "max", "avg"])
    @pytest.mark.parametrize("seed", range(5))
    def test_classify_pool_gradcheck(self, mode, seed):
        rng = np.random.default_rng(seed)
        f = Tensor(rng.normal(size=(9, 5)), requires_grad=True, name="f_out")
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="w")
        probe = rng.normal(size=4)

        def loss():
            return (pool(classify(f, w), PoolingConfig(mode, 3)).y * probe).sum()

        report = finite_diff_check(loss, [f, w], h=1e-5, tol=1e-4)
        assert report.passed, report


class TestConfidenceSets:
    def test_threshold_example(self):
        z = np.array([[0.9, 0.1], [0.5, 0.5], [0.1, 0.9]])
        high, low = confidence_sets(z, 0.85)[0]
        assert list(high) == [0] and list(low) == [2]

    def test_strict_inequalities(self):
        z = np.full((4, 2), 0.85)
        z[:, 1] = 1 - 0.85
        for high, low in confidence_sets(z, 0.85):
            assert high.size == 0 and low.size == 0

    @pytest.mark.parametrize("eps", [0.5, 0.3, 1.0, 1.2])
    def test_epsilon_range(self, eps):
        with pytest.raises(ValueError):
            confidence_sets(np.ones((2, 2)) / 2, eps)

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            z = random_scores(rng, 30, 5)
            eps = rng.uniform(0.51, 0.99)
            sets = confidence_sets(z, eps)
            for c in range(5):
                hi = [i for i in range(30) if z[i, c] > eps]
                lo = [i for i in range(30) if z[i, c] < 1 - eps]
                assert list(sets[c][0]) == hi and list(sets[c][1]) == lo
