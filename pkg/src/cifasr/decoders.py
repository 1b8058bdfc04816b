"""CTC, CE and attention decoders with their losses, and the loss combinators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import LossWeights, ModelConfig
from .params import ModelParams
from .synth import PAD_ID
from .tensor import ContractError, Tensor
from .text import BLANK, SOS_EOS


class InfeasibleAlignmentError(ValueError):
    pass


# ------------------------------------------------------------------ CTC


def init_heads(params: ModelParams, cfg: ModelConfig, rng: np.random.Generator) -> None:
    nn.init_linear(params, "ctc.proj", cfg.d_model, cfg.n_chars, rng)
    nn.init_linear(params, "ce.proj", cfg.d_model, cfg.n_chars, rng)


def ctc_log_probs(h: Tensor, params: ModelParams) -> Tensor:
    return T.log_softmax(nn.dense(params, "ctc.proj", h), axis=-1)


def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.logaddexp(a, b), c)


def _ctc_alpha_beta(lp: np.ndarray, ext: np.ndarray, n_frames: int, n_states: int):
    """Log-space forward and backward variables for one utterance."""
    neg = -np.inf
    s = n_states
    emit = lp[:n_frames, ext[:s]]                               # L x S
    skip = np.zeros(s, dtype=bool)
    skip[2:] = (ext[2:s] != BLANK) & (ext[2:s] != ext[: s - 2])
    alpha = np.full((n_frames, s), neg)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        a1 = np.concatenate(([neg], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([neg, neg], prev))[:s], neg)
        alpha[t] = _logsumexp3(prev, a1, a2) + emit[t]
    beta = np.full((n_frames, s), neg)
    beta[-1, -1] = emit[-1, -1]
    if s > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_next = np.zeros(s, dtype=bool)
    skip_next[: s - 2] = skip[2:]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt[1:], [neg]))
        b2 = np.where(skip_next, np.concatenate((nxt[2:], [neg, neg]))[:s], neg)
        beta[t] = _logsumexp3(nxt, b1, b2) + emit[t]
    ends = alpha[-1, -1] if s == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return alpha, beta, emit, ends


def min_ctc_frames(target: np.ndarray) -> int:
    target = np.asarray(target)
    repeats = int(np.sum(target[1:] == target[:-1])) if target.size > 1 else 0
    return int(target.size + repeats)


def ctc_loss(log_probs: Tensor, targets, target_lengths, frame_lengths) -> Tensor:
    """Batch mean of ``-log P(target | log_probs)`` via the forward recursion.

    ``log_probs`` is ``[B, L, V]`` (or ``[L, V]``); blank is id 0. The gradient
    with respect to ``log_probs`` is minus the state-occupation posterior,
    from the forward-backward product.
    """
    lp_t = log_probs if log_probs.ndim == 3 else log_probs.reshape(1, *log_probs.shape)
    lp = lp_t.data
    targets = np.asarray(targets, dtype=np.int64).reshape(lp.shape[0], -1)
    target_lengths = np.asarray(target_lengths).reshape(-1)
    frame_lengths = np.asarray(frame_lengths).reshape(-1)
    batch = lp.shape[0]
    losses = np.zeros(batch)
    grad = np.zeros_like(lp)
    for b in range(batch):
        tgt = targets[b, : target_lengths[b]]
        n = int(frame_lengths[b])
        if n < 1 or n < min_ctc_frames(tgt):
            raise InfeasibleAlignmentError(
                f"utterance {b}: {n} frames cannot emit {tgt.size} labels")
        ext = np.full(2 * tgt.size + 1, BLANK, dtype=np.int64)
        ext[1::2] = tgt
        alpha, beta, emit, logp = _ctc_alpha_beta(lp[b], ext, n, ext.size)
        if not np.isfinite(logp):
            raise InfeasibleAlignmentError(f"utterance {b}: zero-probability target")
        losses[b] = -logp
        # occupation posterior of each extended state, summed per vocabulary id
        post = np.exp(alpha + beta - emit - logp)
        occ = np.zeros((n, lp.shape[2]))
        np.add.at(occ, (slice(None), ext), post)
        grad[b, :n] = -occ
    out = losses.mean()

    def bw(g):
        return (g * grad.reshape(log_probs.shape) / batch,)

    return T._make(np.asarray(out), (log_probs,), bw)


# ------------------------------------------------------------------ CE decoder


def _gather_target_logp(logp: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
    b, i = np.nonzero(mask)
    onehot[b, i, targets[b, i]] = 1.0
    return T.tsum(T.mul(logp, onehot))


def ce_loss(c: Tensor, chars: np.ndarray, lengths, params: ModelParams) -> Tensor:
    """Position-wise cross-entropy of the CE head on fired embeddings, mean over tokens."""
    chars = np.asarray(chars)
    if chars.ndim == 1:
        chars = chars[None]
    if c.shape[:2] != chars.shape[:2]:
        raise ContractError(f"CE length mismatch: {c.shape[:2]} embeddings vs {chars.shape} targets")
    mask = nn.length_mask(lengths, chars.shape[1])
    logp = T.log_softmax(nn.dense(params, "ce.proj", c), axis=-1)
    return T.mul(_gather_target_logp(logp, chars, mask), -1.0 / mask.sum())


# ------------------------------------------------------------------ attention decoder


def init_decoder(params: ModelParams, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    params.add("decoder.embed", rng.normal(scale=1.0, size=(cfg.n_chars, d)))
    for i in range(cfg.decoder_blocks):
        nn.init_transformer_block(params, f"decoder.block{i}", d, cfg.encoder.d_ffn, rng, cross=True)
    nn.init_norm(params, "decoder.final_ln", d)
    nn.init_linear(params, "decoder.out", d, cfg.n_chars, rng)


def decoder_io(chars: np.ndarray, lengths) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``[sos, y...]``, targets ``[y..., eos]`` and their lengths."""
    chars = np.asarray(chars)
    if chars.ndim == 1:
        chars = chars[None]
    lengths = np.asarray(lengths).reshape(-1)
    b, u = chars.shape
    y_in = np.full((b, u + 1), PAD_ID, dtype=np.int64)
    y_out = np.full((b, u + 1), PAD_ID, dtype=np.int64)
    for k in range(b):
        n = int(lengths[k])
        y_in[k, 0] = SOS_EOS
        y_in[k, 1:n + 1] = chars[k, :n]
        y_out[k, :n] = chars[k, :n]
        y_out[k, n] = SOS_EOS
    return y_in, y_out, lengths + 1


def attention_decoder_forward(
    memory: Tensor, memory_mask: np.ndarray, y_in: np.ndarray, y_lengths, params: ModelParams,
    cfg: ModelConfig, rng=None,
) -> Tensor:
    """Teacher-forced logits ``[B, U+1, V]`` for inputs that start with sos."""
    y_in = np.asarray(y_in, dtype=np.int64)
    if y_in.ndim == 1:
        y_in = y_in[None]
    if memory.ndim == 2:
        memory = memory.reshape(1, *memory.shape)
        memory_mask = np.asarray(memory_mask).reshape(1, -1)
    if memory.shape[1] == 0:
        raise ContractError("decoder memory is empty")
    ymask = nn.length_mask(y_lengths, y_in.shape[1])
    x = T.take_rows(params["decoder.embed"], np.where(ymask, y_in, 0))
    d = cfg.d_model
    p = cfg.encoder.dropout
    x = T.add(x, nn.positional_encoding(y_in.shape[1], d).astype(x.data.dtype))
    x = nn.dropout(x, p, rng)
    self_bias = nn.attention_bias(ymask, causal=True)
    cross_bias = nn.attention_bias(memory_mask)
    cross_bias = np.broadcast_to(cross_bias, (cross_bias.shape[0], 1, y_in.shape[1], cross_bias.shape[-1]))
    h = cfg.encoder.num_heads
    for i in range(cfg.decoder_blocks):
        pre = f"decoder.block{i}"
        x = nn.self_attention_sublayer(params, f"{pre}.self", x, self_bias, h, p, rng)
        x = nn.cross_attention_sublayer(params, f"{pre}.cross", x, memory, cross_bias, h, p, rng)
        x = nn.ffn_sublayer(params, f"{pre}.ffn", x, p, rng)
    return nn.dense(params, "decoder.out", nn.norm(params, "decoder.final_ln", x))


def aed_loss(logits: Tensor, y_out: np.ndarray, y_lengths, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy, mean over valid positions.

    Target mass ``1 - smoothing`` on the true class and ``smoothing / (V - 1)``
    on each other class.
    """
    y_out = np.asarray(y_out)
    if y_out.ndim == 1:
        y_out = y_out[None]
    if logits.shape[:2] != y_out.shape:
        raise ContractError("AED logits and targets differ in length")
    v = logits.shape[-1]
    mask = nn.length_mask(y_lengths, y_out.shape[1])
    q = np.zeros(logits.shape, dtype=logits.data.dtype)
    q[mask] = smoothing / (v - 1)
    b, i = np.nonzero(mask)
    q[b, i, y_out[b, i]] = 1.0 - smoothing
    logp = T.log_softmax(logits, axis=-1)
    return T.mul(T.tsum(T.mul(logp, q)), -1.0 / mask.sum())


def sequence_log_likelihood(logits: Tensor, y_out: np.ndarray, y_lengths) -> np.ndarray:
    """Per-sequence sum of target log-probabilities (no smoothing), eos included."""
    logp = T.log_softmax(logits, axis=-1).data
    y_out = np.asarray(y_out)
    mask = nn.length_mask(y_lengths, y_out.shape[1])
    picked = np.take_along_axis(logp, np.where(mask, y_out, 0)[..., None], axis=-1)[..., 0]
    return (picked * mask).sum(axis=1)


# ------------------------------------------------------------------ combinators


@dataclass
class LossBundle:
    ctc: Tensor
    qua: Tensor
    ce: Tensor
    aed: Tensor
    mae: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("ctc", "qua", "ce", "aed", "mae", "total")}


def joint_loss(ctc, qua, ce, aed, mae, weights: LossWeights) -> LossBundle:
    """``ctc_w*ctc + qua_w*qua + ce_w*ce + aed_w*aed + mae_w*mae``."""
    parts = [T.as_tensor(x) for x in (ctc, qua, ce, aed, mae)]
    ws = (weights.ctc, weights.qua, weights.ce, weights.aed, weights.mae)
    total = None
    for w, x in zip(ws, parts):
        term = T.mul(x, float(w))
        total = term if total is None else T.add(total, term)
    return LossBundle(*parts, total)
