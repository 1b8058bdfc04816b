import math

import numpy as np
import pytest

from cifasr import tensor as T
from cifasr.gradcheck import grad_check
from cifasr.optim import AdamState, adam_step, clip_grad_norm, global_grad_norm, noam_lr
from cifasr.params import ModelParams
from cifasr.tensor import Tensor

SEEDS = range(50)


def leaf(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)


def check(f, params, tol=1e-6, **kw):
    return grad_check(f, params, h=1e-5, **kw).max_rel_err


# --------------------------------------------------------------------- matmul


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]])).data, [[5], [7]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    assert check(lambda: T.tsum(T.mul(T.matmul(a, b), w)), [a, b]) < 1e-6


# --------------------------------------------------------------------- softmax


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 5)
    w = rng.normal(size=5)
    assert check(lambda: T.tsum(T.mul(T.softmax(x), w)), [x]) < 1e-6
    assert check(lambda: T.tsum(T.mul(T.log_softmax(x), w)), [x]) < 1e-6


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 7)))
    np.testing.assert_allclose(T.softmax(x, axis=-1).data.sum(-1), 1.0, atol=1e-12)


# --------------------------------------------------------------------- layer norm


def test_layer_norm_cases():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(T.layer_norm(Tensor([[5.0, 5, 5, 5]]), g, b).data, 0.0, atol=1e-12)
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_dim_mismatch():
    with pytest.raises(T.DimensionError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_grad(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, 2, 8), leaf(rng, 8), leaf(rng, 8)
    w = rng.normal(size=(2, 8))
    assert check(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), w)), [x, g, b]) < 1e-6


# --------------------------------------------------------------------- convolution


def test_conv1d_identity_and_shapes():
    x = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
    k = Tensor(np.eye(3)[None])
    np.testing.assert_allclose(T.conv1d(x, k).data, x.data)
    y = Tensor(np.ones((32, 2)))
    k3 = Tensor(np.ones((3, 2, 2)))
    h1 = T.conv1d(y, k3, stride=2, padding=1)
    h2 = T.conv1d(h1, k3, stride=2, padding=1)
    assert h1.shape[0] == 16 and h2.shape[0] == 8


def test_conv1d_too_short():
    with pytest.raises(T.InputTooShortError):
        T.conv1d(Tensor(np.ones((2, 1))), Tensor(np.ones((5, 1, 1))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_grad(seed):
    rng = np.random.default_rng(seed)
    x, k = leaf(rng, 7, 3), leaf(rng, 3, 3, 2)
    stride = 1 + seed % 2
    w = rng.normal(size=T.conv1d(x, k, stride=stride, padding=1).shape)
    assert check(lambda: T.tsum(T.mul(T.conv1d(x, k, stride=stride, padding=1), w)), [x, k]) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_depthwise_conv_grad(seed):
    rng = np.random.default_rng(seed)
    x, k = leaf(rng, 2, 6, 3), leaf(rng, 3, 3)
    w = rng.normal(size=(2, 6, 3))
    assert check(lambda: T.tsum(T.mul(T.depthwise_conv1d(x, k, padding=1), w)), [x, k]) < 1e-6


# --------------------------------------------------------------------- elementwise ops


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "gelu": T.gelu,
    "cumsum": lambda x: T.cumsum(x, axis=-1),
    "log": lambda x: T.log(T.add(T.mul(x, x), 1.0)),
    "abs": T.tabs,
    "relu": T.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_grads(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    if name in ("abs", "relu"):
        # keep away from the kink at 0
        x.data = np.where(np.abs(x.data) < 1e-3, 0.5, x.data)
    w = rng.normal(size=(3, 4))
    assert check(lambda: T.tsum(T.mul(UNARY[name](x), w)), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_binary_and_shape_grads(seed):
    rng = np.random.default_rng(seed)
    a, b, c = leaf(rng, 3, 4), leaf(rng, 4), leaf(rng, 3, 1)
    w = rng.normal(size=(4, 3))

    def f():
        x = T.div(T.sub(T.mul(a, b), c), T.add(T.mul(c, c), 2.0))
        x = T.maximum(T.minimum(x, 0.7), -0.7)
        y = T.transpose(T.reshape(x, (4, 3)), (1, 0))
        z = T.concat([y[:, :2], y[:, 2:]], axis=1)
        return T.tsum(T.mul(T.transpose(z), w))

    assert check(f, [a, b, c]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_embedding_grad(seed):
    rng = np.random.default_rng(seed)
    table = leaf(rng, 5, 3)
    ids = rng.integers(0, 5, size=(2, 4))
    w = rng.normal(size=(2, 4, 3))
    assert check(lambda: T.tsum(T.mul(T.take_rows(table, ids), w)), [table]) < 1e-6


# --------------------------------------------------------------------- backward contract


def test_backward_sum_and_accumulation():
    p = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.tsum(p))
    np.testing.assert_array_equal(p.grad, [1, 1, 1])
    T.backward(T.tsum(T.mul(p, 2.0)))
    np.testing.assert_array_equal(p.grad, [3, 3, 3])


def test_backward_rejects_non_scalar():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(T.ContractError):
        T.backward(T.mul(p, 2.0))


@pytest.mark.parametrize("seed", range(20))
def test_fan_out_accumulates(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4)

    def f():
        y = T.tanh(x)
        return T.tsum(T.add(T.mul(y, y), T.mul(y, x)))

    assert check(f, [x]) < 1e-6


def test_grad_check_polynomial():
    x = Tensor(np.array(3.0), requires_grad=True)
    rep = grad_check(lambda: T.mul(x, x), [x], h=1e-5)
    assert rep.max_rel_err < 1e-8


# --------------------------------------------------------------------- optimizer


def _params_with_grads(grads):
    p = ModelParams()
    for i, g in enumerate(grads):
        t = p.add(f"p{i}", np.zeros_like(np.asarray(g, dtype=float)))
        t.grad = np.asarray(g, dtype=float)
    return p


def test_clip_grad_norm_cases():
    p = _params_with_grads([[0.0, 3.0]])
    assert clip_grad_norm(p, 5.0) == pytest.approx(3.0)
    np.testing.assert_array_equal(p["p0"].grad, [0.0, 3.0])
    p = _params_with_grads([[3.0, 4.0]])
    assert clip_grad_norm(p, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p["p0"].grad, [0.6, 0.8])


@pytest.mark.parametrize("seed", range(20))
def test_clip_grad_norm_bound_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    p = _params_with_grads([rng.normal(size=5) * 3, rng.normal(size=(2, 3))])
    clip_grad_norm(p, 1.5)
    assert global_grad_norm(p) <= 1.5 + 1e-9
    once = [t.grad.copy() for t in p.tensors()]
    clip_grad_norm(p, 1.5)
    for a, t in zip(once, p.tensors()):
        np.testing.assert_allclose(t.grad, a, rtol=1e-12)


def test_adam_zero_grad_and_frozen():
    p = ModelParams()
    a = p.add("a", np.array([1.0, 2.0]))
    f = p.add("f", np.array([3.0]), trainable=False)
    a.grad = np.zeros(2)
    f.grad = np.array([10.0])
    before = f.data.copy()
    adam_step(p, AdamState(lr=0.1, d_model=4, warmup=10))
    np.testing.assert_array_equal(a.data, [1.0, 2.0])
    assert f.data.tobytes() == before.tobytes()


def test_adam_missing_grad():
    p = ModelParams()
    p.add("a", np.zeros(2))
    with pytest.raises(T.ContractError):
        adam_step(p, AdamState(lr=0.1, d_model=4, warmup=10))


def test_adam_two_steps_match_hand_recurrence():
    base, d_model, warmup = 0.5, 16, 3
    p = ModelParams()
    x = p.add("x", np.array(2.0))
    state = AdamState(lr=base, d_model=d_model, warmup=warmup)
    expected = 2.0
    m = v = 0.0
    for t in (1, 2):
        x.grad = np.array(1.0)
        adam_step(p, state)
        lr = base / math.sqrt(d_model) * min(t**-0.5, t * warmup**-1.5)
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        expected -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-9)
        assert float(x.data) == pytest.approx(expected, rel=1e-12)
    assert state.t == 2


def test_noam_peaks_at_warmup():
    lrs = [noam_lr(t, 1.0, 64, 100) for t in range(1, 400)]
    assert int(np.argmax(lrs)) + 1 == 100
