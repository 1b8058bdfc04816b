"""Shared transformer pieces written against the tape ops."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .params import ModelParams
from .tensor import Tensor

NEG_INF = -1e9


def init_linear(params: ModelParams, prefix: str, d_in: int, d_out: int, rng: np.random.Generator,
                trainable: bool = True) -> None:
    bound = 1.0 / math.sqrt(d_in)
    params.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(d_in, d_out)), trainable)
    params.add(f"{prefix}.b", rng.uniform(-bound, bound, size=(d_out,)), trainable)


def init_norm(params: ModelParams, prefix: str, d: int, trainable: bool = True) -> None:
    params.add(f"{prefix}.g", np.ones(d), trainable)
    params.add(f"{prefix}.b", np.zeros(d), trainable)


def init_attention(params: ModelParams, prefix: str, d: int, rng: np.random.Generator) -> None:
    init_norm(params, f"{prefix}.ln", d)
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{name}", d, d, rng)


def init_ffn(params: ModelParams, prefix: str, d: int, d_ffn: int, rng: np.random.Generator) -> None:
    init_norm(params, f"{prefix}.ln", d)
    init_linear(params, f"{prefix}.fc1", d, d_ffn, rng)
    init_linear(params, f"{prefix}.fc2", d_ffn, d, rng)


def dense(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def norm(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return T.mul(x, keep.astype(x.data.dtype))


def length_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even dims ``sin(p / 10000**(2i/d))``, odd dims the cosine."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def attention_bias(key_mask: np.ndarray, causal: bool = False, q_len: int | None = None) -> np.ndarray:
    """Additive bias ``[B, 1, Lq, Lk]``: 0 where attention is allowed, ``NEG_INF`` elsewhere."""
    b, lk = key_mask.shape
    allowed = key_mask[:, None, None, :]
    if causal:
        lq = q_len if q_len is not None else lk
        allowed = allowed & np.tril(np.ones((lq, lk), dtype=bool))[None, None]
    return np.where(allowed, 0.0, NEG_INF)


def multi_head_attention(
    params: ModelParams, prefix: str, xq: Tensor, xkv: Tensor, bias: np.ndarray, num_heads: int,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``num_heads`` heads; returns output and weights."""
    b, lq, d = xq.shape
    lk = xkv.shape[1]
    dk = d // num_heads
    q = dense(params, f"{prefix}.q", xq).reshape(b, lq, num_heads, dk).transpose(0, 2, 1, 3)
    k = dense(params, f"{prefix}.k", xkv).reshape(b, lk, num_heads, dk).transpose(0, 2, 3, 1)
    v = dense(params, f"{prefix}.v", xkv).reshape(b, lk, num_heads, dk).transpose(0, 2, 1, 3)
    scores = T.add(T.mul(T.matmul(q, k), 1.0 / math.sqrt(dk)), bias.astype(q.data.dtype))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return dense(params, f"{prefix}.o", ctx), weights


def self_attention_sublayer(params, prefix, x, bias, num_heads, p_drop, rng) -> Tensor:
    h = norm(params, f"{prefix}.ln", x)
    out, _ = multi_head_attention(params, prefix, h, h, bias, num_heads)
    return T.add(x, dropout(out, p_drop, rng))


def cross_attention_sublayer(params, prefix, x, memory, bias, num_heads, p_drop, rng) -> Tensor:
    h = norm(params, f"{prefix}.ln", x)
    out, _ = multi_head_attention(params, prefix, h, memory, bias, num_heads)
    return T.add(x, dropout(out, p_drop, rng))


def ffn_sublayer(params, prefix, x, p_drop, rng, scale: float = 1.0) -> Tensor:
    h = norm(params, f"{prefix}.ln", x)
    h = T.gelu(dense(params, f"{prefix}.fc1", h))
    h = dense(params, f"{prefix}.fc2", dropout(h, p_drop, rng))
    h = dropout(h, p_drop, rng)
    return T.add(x, h if scale == 1.0 else T.mul(h, scale))


def init_transformer_block(params: ModelParams, prefix: str, d: int, d_ffn: int,
                           rng: np.random.Generator, cross: bool = False) -> None:
    init_attention(params, f"{prefix}.self", d, rng)
    if cross:
        init_attention(params, f"{prefix}.cross", d, rng)
    init_ffn(params, f"{prefix}.ffn", d, d_ffn, rng)
