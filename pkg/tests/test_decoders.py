import itertools
import math

import numpy as np
import pytest

from cifasr import tensor as T
from cifasr.config import LossWeights
from cifasr.decoders import (
    InfeasibleAlignmentError,
    aed_loss,
    attention_decoder_forward,
    ce_loss,
    ctc_log_probs,
    ctc_loss,
    decoder_io,
    init_decoder,
    init_heads,
    joint_loss,
)
from cifasr.gradcheck import grad_check
from cifasr.match import syllable_encode
from cifasr.model import build_params, text_only_loss
from cifasr.optim import AdamState, adam_step
from cifasr.params import ModelParams
from cifasr.tensor import ContractError, Tensor
from cifasr.text import SOS_EOS
from cifasr.train import freeze_for_text_only


def collapse(path):
    out = []
    prev = None
    for c in path:
        if c != prev and c != 0:
            out.append(c)
        prev = c
    return tuple(out)


def brute_force_ctc(logp, target):
    total = 0.0
    for path in itertools.product(range(logp.shape[1]), repeat=logp.shape[0]):
        if collapse(path) == tuple(target):
            total += math.exp(sum(logp[t, c] for t, c in enumerate(path)))
    return total


def random_log_probs(rng, length, vocab):
    x = rng.normal(size=(length, vocab))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


# ------------------------------------------------------------------ CTC


def test_ctc_worked_example():
    lp = np.log(np.full((2, 2), 0.5))
    loss = ctc_loss(Tensor(lp), [[1]], [1], [2])
    assert float(loss.data) == pytest.approx(-math.log(3 / 4), abs=1e-12)
    assert float(loss.data) == pytest.approx(0.287682, abs=1e-6)


def test_ctc_empty_target_forced_blank():
    lp = np.log(np.array([[1.0, 1e-300], [1.0, 1e-300], [1.0, 1e-300]]))
    loss = ctc_loss(Tensor(lp), np.zeros((1, 0), dtype=int), [0], [3])
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("length", range(1, 7))
@pytest.mark.parametrize("vocab", [2, 3, 4])
def test_ctc_matches_exhaustive_paths(length, vocab):
    rng = np.random.default_rng(length * 10 + vocab)
    lp = random_log_probs(rng, length, vocab)
    for n in range(0, 4):
        for target in itertools.product(range(1, vocab), repeat=n):
            oracle = brute_force_ctc(lp, target)
            tgt = np.array(target, dtype=int).reshape(1, -1)
            if oracle == 0.0:
                with pytest.raises(InfeasibleAlignmentError):
                    ctc_loss(Tensor(lp), tgt, [n], [length])
                continue
            loss = float(ctc_loss(Tensor(lp), tgt, [n], [length]).data)
            assert loss == pytest.approx(-math.log(oracle), abs=1e-8)


def test_ctc_batch_mean_and_padding():
    rng = np.random.default_rng(0)
    a, b = random_log_probs(rng, 5, 4), random_log_probs(rng, 3, 4)
    padded = np.concatenate([b, random_log_probs(rng, 2, 4)])
    batch = ctc_loss(Tensor(np.stack([a, padded])), np.array([[1, 2, 3], [2, 0, 0]]), [3, 1], [5, 3])
    la = -math.log(brute_force_ctc(a, (1, 2, 3)))
    lb = -math.log(brute_force_ctc(b, (2,)))
    assert float(batch.data) == pytest.approx((la + lb) / 2, abs=1e-10)


def test_ctc_infeasible():
    lp = random_log_probs(np.random.default_rng(0), 2, 3)
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(Tensor(lp), [[1, 1]], [2], [2])


@pytest.mark.parametrize("seed", range(50))
def test_ctc_gradient(seed):
    rng = np.random.default_rng(seed)
    length, vocab = int(rng.integers(3, 8)), int(rng.integers(2, 5))
    n = int(rng.integers(1, min(3, (length + 1) // 2) + 1))
    target = rng.integers(1, vocab, size=(2, n))
    logits = Tensor(rng.normal(size=(2, length, vocab)), requires_grad=True)

    def f():
        return ctc_loss(T.log_softmax(logits, axis=-1), target, [n, n], [length, length - 1])

    try:
        f()
    except InfeasibleAlignmentError:
        pytest.skip("infeasible instance")
    assert grad_check(f, [logits], h=1e-5).max_rel_err < 1e-6


# ------------------------------------------------------------------ heads


def _heads(cfg, seed=0):
    params = ModelParams()
    init_heads(params, cfg, np.random.default_rng(seed))
    return params


def test_ctc_log_probs_normalized_and_zero_head(tiny_cfg):
    cfg = tiny_cfg.model
    params = _heads(cfg)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 5, cfg.d_model)))
    np.testing.assert_allclose(np.exp(ctc_log_probs(h, params).data).sum(-1), 1.0, atol=1e-9)
    params["ctc.proj.w"].data[...] = 0
    params["ctc.proj.b"].data[...] = 0
    np.testing.assert_allclose(ctc_log_probs(h, params).data, -math.log(cfg.n_chars), atol=1e-12)


def test_ce_loss_cases(tiny_cfg):
    cfg = tiny_cfg.model
    params = _heads(cfg)
    c = Tensor(np.random.default_rng(0).normal(size=(1, 3, cfg.d_model)))
    params["ce.proj.w"].data[...] = 0
    params["ce.proj.b"].data[...] = 0
    assert float(ce_loss(c, np.array([[3, 4, 5]]), [3], params).data) == pytest.approx(math.log(cfg.n_chars))
    bias = np.full(cfg.n_chars, -1e3)
    bias[4] = 1e3
    params["ce.proj.b"].data[...] = bias
    assert float(ce_loss(c, np.array([[4, 4, 4]]), [3], params).data) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        ce_loss(c, np.array([[4, 4]]), [2], params)


@pytest.mark.parametrize("seed", range(10))
def test_head_gradients(seed, tiny_cfg):
    cfg = tiny_cfg.model
    rng = np.random.default_rng(seed)
    params = _heads(cfg, seed)
    c = Tensor(rng.normal(size=(2, 3, cfg.d_model)), requires_grad=True)
    chars = rng.integers(3, cfg.n_chars, size=(2, 3))
    wv = rng.normal(size=(2, 3, cfg.n_chars))
    assert grad_check(lambda: ce_loss(c, chars, [3, 2], params), [c] + params.tensors(), h=1e-5).max_rel_err < 1e-6
    assert grad_check(lambda: T.tsum(T.mul(ctc_log_probs(c, params), wv)), [c] + params.tensors(),
                      h=1e-5).max_rel_err < 1e-6


# ------------------------------------------------------------------ attention decoder / AED


def _decoder(cfg, seed=0):
    params = ModelParams()
    init_decoder(params, cfg, np.random.default_rng(seed))
    return params


def test_decoder_io():
    y_in, y_out, lens = decoder_io(np.array([[5, 6, 7], [8, -1, -1]]), [3, 1])
    assert y_in.tolist() == [[SOS_EOS, 5, 6, 7], [SOS_EOS, 8, -1, -1]]
    assert y_out.tolist() == [[5, 6, 7, SOS_EOS], [8, SOS_EOS, -1, -1]]
    assert lens.tolist() == [4, 2]


@pytest.mark.parametrize("seed", range(5))
def test_decoder_causality_and_shape(seed, tiny_cfg):
    cfg = tiny_cfg.model
    rng = np.random.default_rng(seed)
    params = _decoder(cfg, seed)
    n = int(rng.integers(2, 7))
    mem = Tensor(rng.normal(size=(1, 4, cfg.d_model)))
    y = rng.integers(3, cfg.n_chars, size=(1, n))
    y_in, _, lens = decoder_io(y, [n])
    logits = attention_decoder_forward(mem, np.ones((1, 4), bool), y_in, lens, params, cfg).data
    assert logits.shape == (1, n + 1, cfg.n_chars)
    i = int(rng.integers(0, n))
    y2 = y_in.copy()
    y2[0, i + 1:] = rng.integers(3, cfg.n_chars, size=n - i)
    logits2 = attention_decoder_forward(mem, np.ones((1, 4), bool), y2, lens, params, cfg).data
    np.testing.assert_array_equal(logits2[0, : i + 1], logits[0, : i + 1])


def test_decoder_rejects_empty_memory(tiny_cfg):
    cfg = tiny_cfg.model
    with pytest.raises(ContractError):
        attention_decoder_forward(Tensor(np.zeros((1, 0, cfg.d_model))), np.zeros((1, 0), bool),
                                  np.array([[SOS_EOS]]), [1], _decoder(cfg), cfg)


def test_aed_no_smoothing_is_cross_entropy():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(1, 3, 5)))
    y = np.array([[1, 4, 2]])
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    ce = -np.mean([lp[0, i, y[0, i]] for i in range(3)])
    assert float(aed_loss(logits, y, [3], 0.0).data) == pytest.approx(ce, rel=1e-12)


def test_aed_smoothing_closed_form():
    v, eps, temp = 6, 0.1, 8.0
    logits = np.zeros((1, 1, v))
    logits[0, 0, 2] = temp
    p = np.exp(logits[0, 0]) / np.exp(logits[0, 0]).sum()
    expected = -((1 - eps) * np.log(p[2]) + sum(eps / (v - 1) * np.log(p[j]) for j in range(v) if j != 2))
    got = float(aed_loss(Tensor(logits), np.array([[2]]), [1], eps).data)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got > 0


@pytest.mark.parametrize("seed", range(10))
def test_aed_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    y = rng.integers(0, 5, size=(2, 4))
    assert grad_check(lambda: aed_loss(logits, y, [4, 2], 0.1), [logits], h=1e-5).max_rel_err < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_decoder_gradient(seed, tiny_cfg):
    cfg = tiny_cfg.model
    rng = np.random.default_rng(seed)
    params = _decoder(cfg, seed)
    mem = Tensor(rng.normal(size=(2, 4, cfg.d_model)), requires_grad=True)
    mmask = np.array([[True] * 4, [True] * 3 + [False]])
    chars = rng.integers(3, cfg.n_chars, size=(2, 3))
    y_in, y_out, lens = decoder_io(chars, [3, 2])

    def f():
        return aed_loss(attention_decoder_forward(mem, mmask, y_in, lens, params, cfg), y_out, lens)

    rep = grad_check(f, [mem] + params.tensors(), h=1e-5, max_entries=5, rng=rng, floor=1e-5)
    assert rep.max_rel_err < 1e-4


def test_losses_batch_order_invariant(tiny_cfg):
    cfg = tiny_cfg.model
    rng = np.random.default_rng(0)
    params = _heads(cfg)
    init_decoder(params, cfg, np.random.default_rng(1))
    c = rng.normal(size=(3, 4, cfg.d_model))
    chars = rng.integers(3, cfg.n_chars, size=(3, 4))
    lens = np.array([4, 2, 3])
    perm = np.array([2, 0, 1])
    a = float(ce_loss(Tensor(c), chars, lens, params).data)
    b = float(ce_loss(Tensor(c[perm]), chars[perm], lens[perm], params).data)
    assert a == pytest.approx(b, rel=1e-12)
    mask = np.arange(4)[None] < lens[:, None]

    def aed(order):
        y_in, y_out, yl = decoder_io(chars[order], lens[order])
        logits = attention_decoder_forward(Tensor(c[order]), mask[order], y_in, yl, params, cfg)
        return float(aed_loss(logits, y_out, yl).data)

    assert aed(np.arange(3)) == pytest.approx(aed(perm), rel=1e-12)


# ------------------------------------------------------------------ combinators


def test_joint_loss_examples():
    b = joint_loss(2.0, 1.0, 2.0, 3.0, 1.0, LossWeights(0.5, 1.0, 0.5, 1.0, 1.0))
    assert float(b.total.data) == pytest.approx(7.0)
    assert LossWeights() == LossWeights(0.5, 1.0, 0.5, 1.0, 1.0)
    zero = joint_loss(2.0, 1.0, 2.0, 3.0, 1.0, LossWeights(0, 0, 0, 0, 0))
    assert float(zero.total.data) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_joint_loss_linearity(seed):
    rng = np.random.default_rng(seed)
    losses = rng.uniform(0, 5, size=5)
    w1, w2 = rng.uniform(0, 2, size=5), rng.uniform(0, 2, size=5)

    def total(w):
        return float(joint_loss(*losses, LossWeights(*w)).total.data)

    assert total(w1) == pytest.approx(float(np.dot(w1, losses)), abs=1e-9)
    assert total(w1 + w2) == pytest.approx(total(w1) + total(w2), abs=1e-9)


# ------------------------------------------------------------------ text-only loss


def _text_model(cfg, seed=0):
    return build_params(cfg, seed)


def test_text_only_loss_is_definitional(tiny_cfg):
    cfg = tiny_cfg.model
    params = _text_model(cfg)
    rng = np.random.default_rng(0)
    chars = rng.integers(3, cfg.n_chars, size=(2, 4))
    sylls = rng.integers(3, cfg.n_sylls, size=(2, 4))
    lens = np.array([4, 3])
    got = float(text_only_loss(params, cfg, sylls, chars, lens).data)
    s = syllable_encode(sylls, lens, params, cfg)
    y_in, y_out, yl = decoder_io(chars, lens)
    ref = aed_loss(attention_decoder_forward(s.s, s.mask, y_in, yl, params, cfg), y_out, yl)
    assert got == float(ref.data)


def test_text_only_frozen_gradients_are_absent(tiny_cfg):
    cfg = tiny_cfg.model
    params = freeze_for_text_only(_text_model(cfg))
    rng = np.random.default_rng(1)
    chars = rng.integers(3, cfg.n_chars, size=(2, 4))
    text_only_loss(params, cfg, rng.integers(3, cfg.n_sylls, size=(2, 4)), chars, [4, 4]).backward()
    for name, t in params.items():
        if name.startswith("decoder."):
            assert t.grad is not None
        else:
            assert t.grad is None


def test_text_only_loss_decreases(tiny_cfg):
    cfg = tiny_cfg.model
    params = freeze_for_text_only(_text_model(cfg))
    rng = np.random.default_rng(2)
    chars = rng.integers(3, cfg.n_chars, size=(5, 4))
    sylls = rng.integers(3, cfg.n_sylls, size=(5, 4))
    lens = [4, 4, 3, 2, 4]
    state = AdamState(lr=1.0, d_model=cfg.d_model, warmup=10)
    losses = []
    for _ in range(50):
        loss = text_only_loss(params, cfg, sylls, chars, lens)
        losses.append(float(loss.data))
        loss.backward()
        adam_step(params, state)
    assert losses[-1] < 0.5 * losses[0]
