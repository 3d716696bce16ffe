import numpy as np
import pytest

from tkpcl.numerics import AdamState, NonFiniteGradientError, NonFiniteOutputError, Tensor, adam_step, finite_diff_check, no_grad
from tkpcl.numerics import ops

SEEDS = [0, 1, 2, 3, 4]


def param(rng, *shape, name=None, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        y.backward()
        assert x.grad == 6.0
        assert y.grad == 1.0

    def test_softmax_sum_is_constant(self):
        x = Tensor(np.random.default_rng(0).normal(size=7), requires_grad=True)
        ops.softmax(x).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_accumulates_without_zeroing(self):
        rng = np.random.default_rng(5)
        w = param(rng, 4, 3)
        x = Tensor(rng.normal(size=(2, 4)))

        def f():
            return ops.tanh(x @ w).sum()

        f().backward()
        once = w.grad.copy()
        f().backward()
        assert np.array_equal(w.grad, 2.0 * once)

    def test_shared_parent_counts_twice(self):
        x = Tensor(2.0, requires_grad=True)
        (x + x).backward()
        assert x.grad == 2.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad

    @pytest.mark.parametrize("seed", SEEDS)
    def test_random_graph_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = param(rng, 3, 4, name="a")
        b = param(rng, 4, 2, name="b")
        c = param(rng, 2, name="c")

        def f():
            h = ops.tanh(a @ b + c)
            g = ops.sigmoid(h * h) / (1.0 + ops.exp(-h))
            return ops.log(g.sum(axis=0) + 3.0).sum()

        report = finite_diff_check(f, [a, b, c], h=1e-5, tol=1e-6)
        assert report.passed, report

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 6))
        w = rng.normal(size=(6, 6))
        out1 = ops.layer_norm(ops.gelu(Tensor(x) @ Tensor(w)), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        out2 = ops.layer_norm(ops.gelu(Tensor(x) @ Tensor(w)), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        assert out1.tobytes() == out2.tobytes()


def _unary_cases():
    return {
        "exp": lambda x: ops.exp(x),
        "log": lambda x: ops.log(x * x + 1.0),
        "sqrt": lambda x: ops.sqrt(x * x + 0.5),
        "tanh": ops.tanh,
        "sigmoid": ops.sigmoid,
        "gelu": ops.gelu,
        "softmax": lambda x: ops.softmax(x, axis=-1),
        "power": lambda x: (x * x + 1.0) ** 1.5,
        "div": lambda x: 1.0 / (x * x + 1.0),
        "maximum": lambda x: ops.maximum(x, 0.05),
        "clip": lambda x: ops.clip(x, -0.7, 0.6),
        "transpose": lambda x: x.transpose(1, 0) * 2.0,
        "reshape": lambda x: x.reshape(-1) * 1.5,
        "getitem": lambda x: x[1:, ::2] * 3.0,
        "fancy_getitem": lambda x: x[[0, 0, 2]] * 3.0,
        "mean": lambda x: x.mean(axis=0),
        "sum_keepdims": lambda x: x.sum(axis=1, keepdims=True) * x,
        "concat": lambda x: ops.concat([x, x * x], axis=1),
        "stack": lambda x: ops.stack([x, ops.tanh(x)], axis=0),
        "take_along_axis": lambda x: ops.take_along_axis(x, np.array([[2, 0, 1, 3]] * 3), axis=1),
        "matmul_self": lambda x: x @ x.T,
        "layer_norm": lambda x: ops.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.arange(4.0))),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 3, 4, name="x")
    # probe direction keeps every output coordinate in play
    fn = _unary_cases()[name]
    probe = rng.normal(size=fn(Tensor(x.data)).shape)
    if name in ("maximum", "clip"):
        # keep entries away from the kinks
        x.data = np.where(np.abs(x.data - 0.05) < 1e-3, 0.3, x.data)
        x.data = np.where(np.abs(np.abs(x.data) - 0.65) < 0.06, 0.2, x.data)
    report = finite_diff_check(lambda: (fn(x) * probe).sum(), [x], h=1e-5, tol=1e-4)
    assert report.passed, report


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_binary_gradients(seed):
    rng = np.random.default_rng(seed)
    a = param(rng, 2, 3, 4, name="a")
    b = param(rng, 4, name="b")
    c = param(rng, 3, 1, name="c")
    w = param(rng, 4, 5, name="w")
    bm = param(rng, 2, 4, 3, name="bm")

    def f():
        x = (a + b) * c - b / (c * c + 1.0)
        return (ops.tanh(x @ w).sum() + (x @ bm).sum() * 0.1)

    report = finite_diff_check(f, [a, b, c, w, bm])
    assert report.passed, report


class TestFiniteDiffCheck:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        report = finite_diff_check(lambda: x * x, [x], h=1e-5, tol=1e-4)
        assert report.max_rel_err < 1e-8
        assert report.passed

    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def bad_square(t):
            return ops.record(t.data * t.data, (t,), lambda g: (g * t.data,))  # missing factor 2

        report = finite_diff_check(lambda: bad_square(x).sum(), [x])
        assert not report.passed
        assert report.max_rel_err == pytest.approx(0.5)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_parameter(self):
        x = Tensor(np.array([1.0, 1e-6]), requires_grad=True, name="weights")
        with pytest.raises(NonFiniteOutputError, match="weights"):
            finite_diff_check(lambda: ops.log(x).sum(), [x], h=1e-5)

    def test_restores_parameters(self):
        rng = np.random.default_rng(0)
        x = param(rng, 5)
        before = x.data.copy()
        finite_diff_check(lambda: (x * x).sum(), [x])
        assert before.tobytes() == x.data.tobytes()

    def test_rejects_bad_step(self):
        x = Tensor(1.0, requires_grad=True)
        with pytest.raises(ValueError):
            finite_diff_check(lambda: x * x, [x], h=0.0)


def reference_adam(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Straight-line Adam with explicit bias-corrected moments."""
    p = p0.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]))
        state = AdamState.for_params([p], lr=0.1)
        adam_step(state, [p], [np.zeros(3)])
        assert np.array_equal(p.data, [1.0, -2.0, 3.0])

    def test_first_step_magnitude(self):
        p = Tensor(np.array(0.0))
        state = AdamState.for_params([p], lr=0.1)
        adam_step(state, [p], [np.array(1.0)])
        assert p.data == pytest.approx(-0.1, abs=1e-8)

    def test_matches_reference_over_100_steps(self):
        rng = np.random.default_rng(11)
        p0 = rng.normal(size=(4, 3))
        grads = [rng.normal(size=(4, 3)) for _ in range(100)]
        p = Tensor(p0.copy())
        state = AdamState.for_params([p], lr=0.01)
        for g in grads:
            adam_step(state, [p], [g])
        np.testing.assert_allclose(p.data, reference_adam(p0, grads, 0.01), rtol=0, atol=1e-12)

    def test_grads_untouched_and_step_counts(self):
        p = Tensor(np.ones(2))
        g = np.array([0.5, -0.5])
        state = AdamState.for_params([p], lr=0.1)
        adam_step(state, [p], [g])
        adam_step(state, [p], [g])
        assert np.array_equal(g, [0.5, -0.5])
        assert state.step_count == 2
        assert state.m[0].shape == p.shape

    def test_non_finite_grad_aborts_without_update(self):
        p = Tensor(np.ones(2), name="w")
        state = AdamState.for_params([p], lr=0.1)
        with pytest.raises(NonFiniteGradientError, match="w"):
            adam_step(state, [p], [np.array([np.nan, 1.0])])
        assert state.step_count == 0
        assert np.array_equal(p.data, [1.0, 1.0])
