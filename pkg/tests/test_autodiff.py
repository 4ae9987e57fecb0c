import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lccvae import autodiff as ad
from lccvae.autodiff import Tape, Tensor, backward

from oracles import central_diff, pick_coords, rel_err


def grad_of(build, *arrays):
    """Analytic gradients of scalar build(*leaves) w.r.t. each array."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    g = backward(tape, build(*leaves))
    return [g[x] for x in leaves]


def value_of(build, *arrays):
    return build(*[Tensor(a) for a in arrays]).item()


def check_gradients(build, arrays, n_coords=100, seed=0, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    grads = grad_of(build, *arrays)
    for i, a in enumerate(arrays):
        coords = pick_coords(a.size, n_coords, rng)

        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return value_of(build, *args)
        numeric = central_diff(f, a, coords, h)
        analytic = grads[i].reshape(-1)[coords]
        assert np.max(rel_err(analytic, numeric)) <= tol, (i, analytic, numeric)


# --- matmul --------------------------------------------------------------------

def test_matmul_identity():
    out = ad.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.numpy(), [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).numpy().tolist() == [[11.0]]


def test_matmul_gradient_example():
    A = np.eye(2)
    B = np.array([[2.0, 3.0], [4.0, 5.0]])
    (gA,) = grad_of(lambda a: ad.sum_all(ad.matmul(a, Tensor(B))), A)
    np.testing.assert_allclose(gA, [[5, 9], [5, 9]], rtol=0, atol=0)
    numeric = central_diff(lambda a: float(np.sum(a @ B)), A, range(4), h=1e-6)
    np.testing.assert_allclose(numeric.reshape(2, 2), [[5, 9], [5, 9]], rtol=1e-8)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


# --- elementwise ------------------------------------------------------------------

def test_softplus_and_tanh_at_zero():
    assert ad.elementwise("softplus", np.array([0.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert ad.elementwise("tanh", np.array([0.0])).item() == 0.0


def test_softplus_derivative_is_sigmoid():
    (g,) = grad_of(lambda x: ad.sum_all(ad.softplus(x)), np.array([3.0]))
    numeric = central_diff(lambda x: float(np.logaddexp(0, x).sum()), np.array([3.0]), [0], h=1e-6)
    assert g[0] == pytest.approx(0.952574, abs=1e-6)
    assert g[0] == pytest.approx(numeric[0], rel=1e-8)


def test_softplus_does_not_overflow():
    out = ad.softplus(np.array([-800.0, 0.0, 800.0])).numpy()
    np.testing.assert_allclose(out, [0.0, math.log(2), 800.0])


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(ad.DomainError):
        ad.elementwise("log", np.array([1.0, 0.0]))


def test_binary_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.elementwise("add", np.ones((2, 2)), np.ones((3,)))


def test_scalar_broadcast():
    out = ad.elementwise("mul", np.array([[1.0, 2.0]]), 3.0)
    np.testing.assert_array_equal(out.numpy(), [[3.0, 6.0]])


def test_non_finite_forward_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(np.array([1000.0]))


def test_unknown_op_kind():
    with pytest.raises(ValueError):
        ad.elementwise("sqrt", np.ones(2))


# --- backward ------------------------------------------------------------------

def test_backward_sum_of_squares():
    (g,) = grad_of(lambda x: ad.sum_all(ad.square(x)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    p = tape.leaf(np.ones((2, 3)))
    g = backward(tape, ad.sum_all(x))
    np.testing.assert_array_equal(g[p], np.zeros((2, 3)))


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, ad.square(x))


def test_backward_is_repeatable_bit_for_bit():
    rng = np.random.default_rng(3)
    tape = Tape()
    W = tape.leaf(rng.standard_normal((4, 3)))
    x = Tensor(rng.standard_normal((5, 4)))
    loss = ad.sum_all(ad.tanh(ad.matmul(x, W)))
    g1 = backward(tape, loss)[W]
    g2 = backward(tape, loss)[W]
    assert g1.tobytes() == g2.tobytes()


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    a0, b0 = a.copy(), b.copy()
    tape = Tape()
    A, B = tape.leaf(a), tape.leaf(b)
    loss = ad.sum_all(ad.mul(ad.softplus(ad.matmul(A, B)), ad.tanh(ad.add(A, B))))
    backward(tape, loss)
    np.testing.assert_array_equal(a, a0)
    np.testing.assert_array_equal(b, b0)
    with pytest.raises(ValueError):
        A.data[0, 0] = 1.0


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((8, 5))
    W1, b1 = rng.standard_normal((5, 16)) * 0.5, rng.standard_normal(16) * 0.1
    W2, b2 = rng.standard_normal((16, 3)) * 0.5, rng.standard_normal(3) * 0.1

    def build(w1, c1, w2, c2):
        h = ad.tanh(ad.add_row(ad.matmul(Tensor(X), w1), c1))
        out = ad.add_row(ad.matmul(h, w2), c2)
        return ad.mean_all(ad.square(out))
    check_gradients(build, [W1, b1, W2, b2], n_coords=100)


# --- per-op gradient properties -------------------------------------------------

UNARY = {
    "exp": (ad.exp, lambda r, s: r.standard_normal(s)),
    "log": (ad.log, lambda r, s: r.uniform(0.2, 3.0, s)),
    "tanh": (ad.tanh, lambda r, s: r.standard_normal(s)),
    "softplus": (ad.softplus, lambda r, s: 3 * r.standard_normal(s)),
    "square": (ad.square, lambda r, s: r.standard_normal(s)),
    "negate": (ad.negate, lambda r, s: r.standard_normal(s)),
    # keep clear of the kinks so central differences are valid
    "relu": (ad.relu, lambda r, s: r.choice([-1, 1], s) * r.uniform(0.1, 2.0, s)),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), lambda r, s: r.choice([-1, 1], s) * r.uniform(0.0, 1.5, s) + 0.02),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r, s: r.standard_normal(s)),
    "sum_rows": (ad.sum_rows, lambda r, s: r.standard_normal(s)),
}
BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}
shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))
seeds = st.integers(0, 2**32 - 1)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a random linear functional makes every output coordinate matter
    return ad.sum_all(ad.mul(out, Tensor(w)))


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=50)
@given(shape=shapes, seed=seeds)
def test_unary_op_gradients(name, shape, seed):
    op, sample = UNARY[name]
    rng = np.random.default_rng(seed)
    a = sample(rng, shape).astype(np.float64)
    if name == "clip":
        a[np.abs(np.abs(a) - 0.5) < 1e-3] += 0.01
    w = rng.standard_normal(op(Tensor(a)).shape)
    check_gradients(lambda x: _weighted(op(x), w), [a], n_coords=a.size, seed=seed)


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=50)
@given(shape=shapes, seed=seeds, scalar=st.booleans())
def test_binary_op_gradients(name, shape, seed, scalar):
    op = BINARY[name]
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    b = rng.standard_normal((1,) if scalar else shape)
    w = rng.standard_normal(shape)
    check_gradients(lambda x, y: _weighted(op(x, y), w), [a, b], n_coords=a.size, seed=seed)


@settings(max_examples=50)
@given(m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4), seed=seeds)
def test_matmul_gradients(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b, w = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((m, n))
    check_gradients(lambda x, y: _weighted(ad.matmul(x, y), w), [a, b], n_coords=m * k * n, seed=seed)


@settings(max_examples=50)
@given(shape=shapes, seed=seeds)
def test_structural_op_gradients(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    row = rng.standard_normal(shape[1])
    other = rng.standard_normal((shape[0], 2))

    def build(x, r, o):
        y = ad.concat_cols(ad.add_row(x, r), o)
        y = ad.slice_cols(y, 1, y.shape[1])
        return ad.add(ad.mean_all(ad.square(y)), ad.sum_all(ad.tanh(y)))
    check_gradients(build, [a, row, other], n_coords=a.size, seed=seed)


# --- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient_is_a_no_op():
    p = [np.array([1.0, -2.0])]
    state = ad.AdamState.zeros_like(p)
    new_p, new_state = ad.adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(new_p[0], p[0])
    np.testing.assert_array_equal(new_state.m[0], 0)
    np.testing.assert_array_equal(new_state.v[0], 0)


def test_adam_first_step_matches_hand_expansion():
    g = np.array([0.5, -2.0, 1e-9])
    p = [np.zeros(3)]
    lr, eps = 1e-3, 1e-8
    new_p, state = ad.adam_step(p, [g], ad.AdamState.zeros_like(p), lr=lr, eps=eps)
    # at t=1 the bias corrections give m_hat = g and v_hat = g^2 exactly
    expected = -lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(new_p[0], expected, rtol=1e-12)
    np.testing.assert_allclose(state.m[0], 0.1 * g)
    np.testing.assert_allclose(state.v[0], 0.001 * g * g)


def test_adam_with_zero_betas_is_rms_normalized_sgd():
    g = np.array([0.3, -4.0])
    p = [np.array([1.0, 1.0])]
    state = ad.AdamState.zeros_like(p)
    for _ in range(2):
        before = p[0]
        p, state = ad.adam_step(p, [g], state, lr=0.01, beta1=0.0, beta2=0.0)
        np.testing.assert_allclose(p[0] - before, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ad.DimensionError):
        ad.adam_step(p, [np.zeros(3)], ad.AdamState.zeros_like(p))
