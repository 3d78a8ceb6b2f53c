import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icl_ser import tensor as T
from icl_ser.tensor import GradTape, NonFiniteError, RAdamState, ShapeError, Tensor, finite_diff_check, radam_step

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def vec(n_min=1, n_max=8):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, n, elements=finite))


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    b = Tensor(rng.normal(size=(4, 3)))
    err = finite_diff_check(lambda a: (a @ b).sum(), rng.normal(size=(5, 4)))
    assert err <= 1e-6


def test_matmul_backward_rules():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    dc = rng.normal(size=(3, 2))
    (a @ b).backward(dc)
    assert np.allclose(a.grad, dc @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ dc)


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(T.softmax(Tensor(np.zeros(3))).data, 1 / 3)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_random_length_seven():
    x = np.random.default_rng(3).normal(size=7)
    assert abs(T.softmax(Tensor(x)).data.sum() - 1.0) <= 1e-12
    w = np.random.default_rng(4).normal(size=7)
    assert finite_diff_check(lambda t: (T.softmax(t) * w).sum(), x) <= 1e-6


@given(vec(), finite)
def test_softmax_is_probability_vector_and_shift_invariant(x, c):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.max(np.abs(T.softmax(Tensor(x + c)).data - p)) <= 1e-12


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_vector_is_zero():
    out = T.layer_norm(Tensor(np.full(5, 3.2)), np.ones(5), np.zeros(5))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_standardized_input_passes_through():
    out = T.layer_norm(Tensor([1.0, -1.0]), np.ones(2), np.zeros(2)).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-5)


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    g, b, w = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
    assert finite_diff_check(lambda x: (T.layer_norm(x, g, b) * w).sum(), rng.normal(size=6)) <= 1e-5


@given(arrays(np.float64, (3, 4), elements=finite))
def test_layer_norm_rows_standardized(x):
    x = x + np.arange(4) * 1e-3  # keep rows off the zero-variance corner
    out = T.layer_norm(Tensor(x), np.ones(4), np.zeros(4)).data
    var = x.var(axis=-1, keepdims=True)
    assert np.allclose(out.mean(-1), 0.0, atol=1e-9)
    assert np.allclose(out.var(-1), (var / (var + 1e-5)).ravel(), atol=1e-9)


# -- label smoothing cross entropy ---------------------------------------------

def _log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def test_ce_alpha_zero_is_negative_log_softmax():
    z = np.random.default_rng(6).normal(size=7)
    assert T.label_smoothing_ce(Tensor(z[None]), np.array([2]), 0.0).item() == pytest.approx(-_log_softmax(z)[2])


@pytest.mark.parametrize("target", range(7))
def test_ce_uniform_logits_is_log_n(target):
    loss = T.label_smoothing_ce(Tensor(np.zeros((1, 7))), np.array([target]), 0.1).item()
    assert loss == pytest.approx(math.log(7), abs=1e-12)


@given(arrays(np.float64, 9, elements=finite), st.integers(0, 8), st.floats(0, 0.99))
def test_ce_matches_direct_summation(z, target, alpha):
    q = np.full(9, alpha / 9)
    q[target] += 1 - alpha
    oracle = -np.sum(q * _log_softmax(z))
    loss = T.label_smoothing_ce(Tensor(z[None]), np.array([target]), alpha).item()
    assert abs(loss - oracle) <= 1e-12 * max(1.0, abs(oracle))


def test_ce_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        T.label_smoothing_ce(Tensor(np.zeros((1, 7))), np.array([7]), 0.1)


@pytest.mark.parametrize("alpha", [-0.1, 1.0])
def test_ce_rejects_bad_alpha(alpha):
    with pytest.raises(ValueError):
        T.label_smoothing_ce(Tensor(np.zeros((1, 7))), np.array([0]), alpha)


def test_ce_weights_mask_positions():
    z = np.random.default_rng(7).normal(size=(2, 5))
    masked = T.label_smoothing_ce(Tensor(z), np.array([1, 3]), 0.1, weights=np.array([1.0, 0.0])).item()
    alone = T.label_smoothing_ce(Tensor(z[:1]), np.array([1]), 0.1).item()
    assert masked == pytest.approx(alone, abs=1e-12)


# -- tape ---------------------------------------------------------------------

def test_diamond_graph_sums_both_paths():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    a = x * 3.0
    b = T.exp(x)
    (a + b).sum().backward()
    assert np.allclose(x.grad, 3.0 + np.exp(x.data))


def test_reused_operand_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x * x).sum().backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.tanh(x) * x + T.exp(x)
    z = (y * y).sum()
    tape = GradTape.from_root(z)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert position[id(p)] < position[id(node)]


def test_every_reachable_tensor_gets_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    w = Tensor(np.full((2, 2), 0.5), requires_grad=True)
    h = T.relu(x @ w)
    loss = h.sum()
    loss.backward()
    for t in (x, w, h, loss):
        assert t.grad is not None and t.grad.shape == t.shape


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_dropout_identity_without_rng_and_scaled_with_rng():
    x = Tensor(np.ones((50, 40)))
    assert T.dropout(x, 0.1, None) is x
    out = T.dropout(x, 0.1, np.random.default_rng(0)).data
    kept = out != 0
    assert np.allclose(out[kept], 1 / 0.9)
    assert 0.85 < kept.mean() < 0.95


# -- finite differences -------------------------------------------------------

def test_fd_sum_is_exact():
    x = np.random.default_rng(8).normal(size=(4, 3))
    assert finite_diff_check(lambda t: t.sum(), x) <= 1e-10


def test_fd_softmax_ce_chain():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 7))
    f = lambda t: T.label_smoothing_ce(T.log_softmax(t, axis=-1), np.array([0, 4, 6]), 0.1)  # noqa: E731
    assert finite_diff_check(f, x, h=1e-5) <= 1e-5


def test_fd_catches_a_corrupted_backward_rule():
    def bad_square(t):
        return Tensor.from_op(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # should be 2x

    x = np.random.default_rng(10).uniform(1, 2, size=5)
    assert finite_diff_check(lambda t: bad_square(t).sum(), x) > 1e-2


def test_fd_rejects_non_finite_value():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        finite_diff_check(lambda t: T.log(t).sum(), np.array([-1.0, 1.0]))


# -- RAdam --------------------------------------------------------------------

def radam_oracle(w0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar RAdam recurrence written out by hand."""
    w, m, v = float(w0), 0.0, 0.0
    rho_inf = 2 / (1 - b2) - 1
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        rho = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
        if rho > 4:
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            w -= lr * r * m_hat / (math.sqrt(v / (1 - b2 ** t)) + eps)
        else:
            w -= lr * m_hat
    return w


def test_radam_first_step_is_momentum_only():
    state = RAdamState(learning_rate=0.01)
    assert state.rho(1) <= 4
    p = [np.array([1.0])]
    radam_step(p, [np.array([5.0])], state)
    # bias-corrected m equals the gradient itself; no division by sqrt(v)
    assert p[0][0] == pytest.approx(1.0 - 0.01 * 5.0, abs=1e-15)


def test_radam_matches_hand_trace_across_rectification_switch():
    rng = np.random.default_rng(11)
    grads = rng.normal(size=12)
    state = RAdamState(learning_rate=0.05)
    p = [np.array([0.7])]
    for g in grads:
        radam_step(p, [np.array([g])], state)
    assert state.step == 12
    assert any(state.rho(t) > 4 for t in range(1, 13)) and state.rho(1) <= 4
    assert p[0][0] == pytest.approx(radam_oracle(0.7, grads, 0.05), abs=1e-14)


@given(arrays(np.float64, 4, elements=finite), st.integers(1, 20))
@settings(max_examples=30)
def test_radam_zero_gradient_is_identity(w, n):
    p = [w.copy()]
    state = RAdamState(learning_rate=0.1)
    for _ in range(n):
        radam_step(p, [np.zeros(4)], state)
    assert np.array_equal(p[0], w)
    assert state.step == n


def test_radam_converges_on_quadratic():
    w = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = T.RAdam([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert np.linalg.norm(w.data) < 0.1


def test_radam_rejects_non_finite_gradient_without_side_effects():
    p = [np.array([1.0, 2.0])]
    state = RAdamState()
    radam_step(p, [np.array([0.1, 0.1])], state)
    before = (p[0].copy(), state.step, state.m[0].copy())
    with pytest.raises(NonFiniteError):
        radam_step(p, [np.array([np.nan, 0.0])], state)
    assert np.array_equal(p[0], before[0]) and state.step == before[1]
    assert np.array_equal(state.m[0], before[2])


def test_warmup_schedule():
    assert T.warmup_constant(0, 1e-3, 200) == pytest.approx(5e-6)
    assert T.warmup_constant(199, 1e-3, 200) == pytest.approx(1e-3)
    assert T.warmup_constant(5000, 1e-3, 200) == pytest.approx(1e-3)


# -- op sweep -----------------------------------------------------------------

def test_every_op_passes_gradcheck_at_a_few_points():
    from icl_ser.gradsuite import run_suite

    worst = run_suite(n_points=3, seed=1, include_model=False)
    assert max(worst.values()) <= 1e-4, worst
