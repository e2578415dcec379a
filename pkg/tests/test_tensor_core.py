import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _gradcheck import check_gradients
from structinpaint.tensor_core import (
    AdamState,
    DimensionError,
    Tensor,
    adam_step,
    avgpool2,
    backward,
    conv2d,
    fully_connected,
    getitem,
    log,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    tape_from,
    tsum,
    upsample_nearest2,
    where,
)


def conv_loop(x, k, b, stride, pad):
    """Direct nested-loop cross-correlation, the oracle for conv2d."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for di in range(kh):
                    for dj in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] * k[di, dj, c, o]
                out[i, j, o] = acc
    return out


CONV_CASES = [
    (h, w, cin, cout, kh, kw, s, p)
    for (h, w) in [(5, 5), (6, 7), (8, 8)]
    for (cin, cout) in [(1, 2), (3, 2)]
    for (kh, kw, s, p) in [(3, 3, 1, 1), (4, 4, 2, 1), (2, 3, 1, 0), (3, 3, 2, 0)]
]


def test_conv_case_count():
    assert len(CONV_CASES) >= 20


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_matches_loop(case):
    h, w, cin, cout, kh, kw, s, p = case
    rng = np.random.default_rng(hash(case) % 2**32)
    x = rng.standard_normal((h, w, cin))
    k = rng.standard_normal((kh, kw, cin, cout))
    b = rng.standard_normal(cout)
    got = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=s, padding=p).data
    np.testing.assert_allclose(got, conv_loop(x, k, b, s, p), rtol=0, atol=1e-12)


@pytest.mark.parametrize("case", CONV_CASES[::2])
def test_conv2d_gradients(case):
    h, w, cin, cout, kh, kw, s, p = case
    rng = np.random.default_rng(1 + hash(case) % 2**31)
    arrays = [rng.standard_normal((h, w, cin)), rng.standard_normal((kh, kw, cin, cout)),
              rng.standard_normal(cout)]
    probe = rng.standard_normal(conv2d(Tensor(arrays[0]), Tensor(arrays[1]), Tensor(arrays[2]), s, p).shape)
    check_gradients(lambda x, k, b: tsum(mul(conv2d(x, k, b, s, p), probe)), arrays)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 2, 1))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))), Tensor(np.zeros(1)))


def _probe(rng, shape):
    return rng.standard_normal(shape)


UNARY = {
    "square": (square, lambda r: r.standard_normal((3, 4))),
    "log": (log, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "relu": (relu, lambda r: r.standard_normal((3, 4)) + np.sign(r.standard_normal((3, 4))) * 0.1),
    "sigmoid": (sigmoid, lambda r: r.standard_normal((3, 4)) * 3),
    "upsample": (upsample_nearest2, lambda r: r.standard_normal((2, 3, 2))),
    # distinct values keep each pooling window's max away from ties
    "maxpool": (maxpool2, lambda r: r.permutation(32).reshape(4, 4, 2) * 0.1 + r.uniform(0, 0.01, (4, 4, 2))),
    "avgpool": (avgpool2, lambda r: r.standard_normal((4, 4, 2))),
    "reshape": (lambda a: reshape(a, (4, 3)), lambda r: r.standard_normal((3, 4))),
    "getitem": (lambda a: getitem(a, (np.array([0, 2, 2]), np.array([1, 1, 3]))), lambda r: r.standard_normal((3, 4))),
    "mean": (mean, lambda r: r.standard_normal((3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(10))
def test_unary_gradients(name, seed):
    op, gen = UNARY[name]
    rng = np.random.default_rng(seed)
    x = gen(rng)
    probe = _probe(rng, op(Tensor(x)).shape)
    check_gradients(lambda a: tsum(mul(op(a), probe)), [x])


@pytest.mark.parametrize("seed", range(10))
def test_binary_gradients_with_broadcast(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4, 2)), rng.standard_normal((1, 4, 1))
    probe = rng.standard_normal((3, 4, 2))
    for op in (lambda x, y: x + y, sub, mul):
        check_gradients(lambda x, y: tsum(mul(op(x, y), probe)), [a, b])


@pytest.mark.parametrize("seed", range(10))
def test_fully_connected_and_where_gradients(seed):
    rng = np.random.default_rng(seed)
    x, wt, b = rng.standard_normal((2, 2, 3)), rng.standard_normal((5, 12)), rng.standard_normal(5)
    probe = rng.standard_normal(5)
    check_gradients(lambda x, w, b: tsum(mul(fully_connected(x, w, b), probe)), [x, wt, b])
    mask = rng.random((3, 3)) > 0.5
    check_gradients(lambda p, q: tsum(square(where(mask, p, q))), [rng.standard_normal((3, 3)),
                                                                    rng.standard_normal((3, 3))])


def test_sigmoid_clamp_gives_zero_gradient():
    x = Tensor(np.array([-40.0, 0.0, 40.0]), requires_grad=True)
    y = sigmoid(x)
    assert y.data[0] == pytest.approx(1e-7) and y.data[2] == pytest.approx(1 - 1e-7)
    backward(tsum(y))
    assert x.grad[0] == 0 and x.grad[2] == 0 and x.grad[1] == pytest.approx(0.25)


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
    backward(tsum(maxpool2(x)))
    np.testing.assert_array_equal(x.grad[:, :, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("k", [1, 2, 5])
def test_backward_accumulates(k):
    rng = np.random.default_rng(k)
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    for _ in range(k):
        backward(tsum(square(x)))
    np.testing.assert_allclose(x.grad, k * 2 * x.data, rtol=1e-14)


def test_shared_subexpression_gradient():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = square(x)
    backward(tsum(mul(y, y)))  # d/dx x^4 = 4x^3
    np.testing.assert_allclose(x.grad, 4 * x.data**3)


def test_tape_in_execution_order():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tsum(relu(square(x)))
    assert [n.name for n in tape_from(y)] == ["square", "relu", "sum"]


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        backward(square(x))


def test_no_grad_for_constants():
    c = Tensor(np.ones(2))
    x = Tensor(np.ones(2), requires_grad=True)
    backward(tsum(mul(c, x)))
    assert c.grad is None


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
def test_grad_shape_matches_data(seed, h, c):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2 * h, 2 * h, c)), requires_grad=True)
    backward(tsum(square(upsample_nearest2(avgpool2(x)))))
    assert x.grad.shape == x.shape


# Adam ------------------------------------------------------------------------

def adam_reference(p0, grads, lr, b1, b2, eps):
    p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_first_step_closed_form():
    # bias correction makes the first step lr * sign(g) up to eps
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, -4.0, 1e-3])
    state = AdamState.for_params([p], lr=0.1)
    adam_step([p], [g], state)
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(3)
    p0 = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(7)]
    p = Tensor(p0.copy())
    state = AdamState.for_params([p], lr=0.01)
    for g in grads:
        adam_step([p], [g], state)
    np.testing.assert_allclose(p.data, adam_reference(p0, grads, 0.01, 0.5, 0.999, 1e-8), rtol=1e-13)
    assert state.step == 7


def test_adam_zero_lr_and_none_grad():
    p = Tensor(np.arange(4.0))
    q = Tensor(np.ones(2))
    state = AdamState.for_params([p, q], lr=0.0)
    for _ in range(3):
        adam_step([p, q], [np.ones(4), None], state)
    np.testing.assert_array_equal(p.data, np.arange(4.0))
    np.testing.assert_array_equal(q.data, np.ones(2))


def test_adam_deterministic():
    rng = np.random.default_rng(9)
    g = rng.standard_normal(5)
    outs = []
    for _ in range(2):
        p = Tensor(np.ones(5))
        s = AdamState.for_params([p])
        for _ in range(4):
            adam_step([p], [g], s)
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]


def test_adam_shape_mismatch():
    p = Tensor(np.ones(3))
    with pytest.raises(DimensionError):
        adam_step([p], [np.ones(4)], AdamState.for_params([p]))
