import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohhgn import autodiff as ad
from cohhgn.autodiff import Tensor


def numeric_grad(f, x, step=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def analytic_grad(build, x):
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with ad.Tape() as tape:
        out = build(t)
        loss = ad.tsum(out * _weights(out.shape))
        tape.backward(loss)
    return t.grad


def _weights(shape):
    # fixed, non-symmetric weights so every output element matters differently
    n = int(np.prod(shape)) if shape else 1
    return np.linspace(0.3, 1.7, n).reshape(shape)


def check_op(build, x, rtol=1e-4, atol=1e-7):
    def value(arr):
        with ad.no_grad():
            out = build(Tensor(arr))
            return float(np.sum(out.data * _weights(out.shape)))

    got = analytic_grad(build, x)
    want = numeric_grad(value, x)
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


arrays = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).normal(size=(3, 4)))


# -- trivial examples --------------------------------------------------------


def test_square_gradient_at_three():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert float(x.grad) == 6.0


def test_sigmoid_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    ad.backward(ad.sigmoid(x))
    assert float(x.grad) == 0.25


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_leaky_relu_negative_input():
    assert ad.leaky_relu(Tensor(-1.0), 0.01).item() == pytest.approx(-0.01)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    out = ad.matmul(Tensor(a), Tensor(b)).data
    assert out.shape == (2, 4)
    for i in range(2):
        for j in range(4):
            assert out[i, j] == pytest.approx(sum(a[i, k] * b[k, j] for k in range(3)), abs=1e-14)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)


def test_tape_cleared_after_backward():
    x = Tensor(2.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tanh(x * x)
        assert len(tape) == 2
        tape.backward(y)
        assert len(tape) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape, ad.no_grad():
        y = ad.sigmoid(x * 3.0)
        assert len(tape) == 0
        assert not y.requires_grad


# -- accumulation --------------------------------------------------------------


def test_shared_subexpression_equals_unrolled_tree():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=4)

    x = Tensor(x0, requires_grad=True)
    with ad.Tape() as tape:
        s = ad.sigmoid(x)
        tape.backward(ad.tsum(s * s + ad.tanh(s)))
    dag = x.grad

    x2 = Tensor(x0, requires_grad=True)
    with ad.Tape() as tape:
        s1, s2, s3 = ad.sigmoid(x2), ad.sigmoid(x2), ad.sigmoid(x2)
        tape.backward(ad.tsum(s1 * s2 + ad.tanh(s3)))
    np.testing.assert_allclose(dag, x2.grad, rtol=1e-14)


def test_gradients_accumulate_across_backward_calls():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        with ad.Tape() as tape:
            tape.backward(ad.tsum(w * 3.0))
    np.testing.assert_array_equal(w.grad, [6.0, 6.0])


# -- finite-difference checks per op ----------------------------------------------


@settings(max_examples=10, deadline=None)
@given(arrays)
def test_fd_elementwise(x):
    check_op(lambda t: ad.sigmoid(t), x)
    check_op(lambda t: ad.tanh(t), x)
    check_op(lambda t: t * t + (-t), x)
    check_op(lambda t: ad.leaky_relu(t, 0.01), x)
    check_op(lambda t: ad.relu(t), x)
    check_op(lambda t: ad.log(t * t + 1.0), x)


@settings(max_examples=10, deadline=None)
@given(arrays)
def test_fd_matmul_and_linear(x):
    rng = np.random.default_rng(2)
    W, A = rng.normal(size=(4, 5)), rng.normal(size=(2, 3))
    V, X = rng.normal(size=(2, 4)), rng.normal(size=(5, 2, 4))
    check_op(lambda t: ad.matmul(t, Tensor(W)), x)
    check_op(lambda t: ad.matmul(Tensor(A), t), x)
    check_op(lambda t: ad.matmul(ad.reshape(t, (3, 1, 4)), Tensor(W)), x)
    check_op(lambda t: ad.linear(t, Tensor(V)), x)
    check_op(lambda t: ad.linear(Tensor(X), t), x[:2])


@settings(max_examples=10, deadline=None)
@given(arrays)
def test_fd_softmax_with_mask(x):
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [0, 0, 0, 0]], dtype=bool)
    check_op(lambda t: ad.softmax(t, axis=1), x)
    check_op(lambda t: ad.softmax(t, axis=0), x)
    check_op(lambda t: ad.softmax(t, axis=1, mask=mask), x)


@settings(max_examples=10, deadline=None)
@given(arrays)
def test_fd_shape_ops(x):
    check_op(lambda t: ad.concat([t, t * 2.0], axis=1), x)
    check_op(lambda t: ad.stack([t, ad.sigmoid(t)], axis=0), x)
    check_op(lambda t: ad.transpose(ad.reshape(t, (2, 6)), (1, 0)), x)
    check_op(lambda t: ad.swapaxes(ad.reshape(t, (2, 3, 2)), 0, 2), x)
    check_op(lambda t: t[np.array([0, 2, 2]), 1:], x)
    check_op(lambda t: ad.mean(t, axis=1), x)
    check_op(lambda t: ad.tsum(t, axis=0, keepdims=True), x)
    check_op(lambda t: ad.take_rows(t, np.array([[0, 2], [2, 2]])), x)
    check_op(lambda t: t + np.ones((1, 4)), x)
    check_op(lambda t: ad.reshape(t, (3, 4, 1)) * np.arange(2.0)[None, None, :], x)


def test_embedding_lookup_accumulates_repeated_rows():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with ad.Tape() as tape:
        rows = ad.embedding_lookup(table, np.array([1, 1, 2]))
        tape.backward(ad.tsum(rows))
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])


def test_custom_op_backward_is_used():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.custom_op(x.data ** 3, (x,), lambda g: (3 * x.data ** 2 * g,))
        tape.backward(ad.tsum(y))
    np.testing.assert_array_equal(x.grad, [3.0, 12.0])


# -- softmax normalisation -------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 700.0))
def test_softmax_nonnegative_and_normalised(seed, spread):
    x = np.random.default_rng(seed).normal(size=(5, 7)) * spread
    out = ad.softmax(Tensor(x), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_fully_masked_softmax_row_is_zero():
    out = ad.softmax(Tensor(np.ones((2, 3))), axis=1, mask=np.array([[1, 0, 1], [0, 0, 0]], bool)).data
    np.testing.assert_allclose(out, [[0.5, 0, 0.5], [0, 0, 0]])


# -- initialisation ------------------------------------------------------------------------


def test_he_init_moments_and_determinism():
    a = ad.he_init((200, 50), seed=4).data
    b = ad.he_init((200, 50), seed=4).data
    np.testing.assert_array_equal(a, b)
    sigma = np.sqrt(2 / 50)
    assert abs(a.mean()) < 3 * sigma / np.sqrt(a.size)
    assert a.std() == pytest.approx(sigma, rel=0.03)


def test_he_init_rejects_empty_shape():
    with pytest.raises(ValueError):
        ad.he_init((), seed=0)


def test_dropout_is_identity_at_eval_and_scaled_in_training():
    x = Tensor(np.ones(10000))
    assert ad.dropout(x, 0.2, None, training=False) is x
    y = ad.dropout(x, 0.2, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert y.mean() == pytest.approx(1.0, abs=0.03)
