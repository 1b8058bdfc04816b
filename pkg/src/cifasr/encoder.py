"""Shared encoder: stride-4 convolutional subsampling plus Conformer-style blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import EncoderConfig
from .params import ModelParams
from .tensor import InputTooShortError, Tensor


@dataclass
class EncoderOutput:
    h: Tensor             # B x L x d_model
    mask: np.ndarray      # B x L, True on valid frames

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def subsampled_length(t) -> np.ndarray | int:
    """Frames left after two (k=3, s=2, p=1) convolutions."""
    t = np.asarray(t)
    l1 = (t - 1) // 2 + 1
    out = (l1 - 1) // 2 + 1
    return int(out) if out.ndim == 0 else out


def init_encoder(params: ModelParams, feat_dim: int, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    for name, d_in in (("conv1", feat_dim), ("conv2", d)):
        bound = 1.0 / np.sqrt(3 * d_in)
        params.add(f"encoder.sub.{name}.w", rng.uniform(-bound, bound, size=(3, d_in, d)))
        params.add(f"encoder.sub.{name}.b", rng.uniform(-bound, bound, size=(d,)))
    nn.init_linear(params, "encoder.sub.proj", d, d, rng)
    for i in range(cfg.num_blocks):
        p = f"encoder.block{i}"
        nn.init_ffn(params, f"{p}.ff1", d, cfg.d_ffn, rng)
        nn.init_attention(params, f"{p}.mhsa", d, rng)
        nn.init_norm(params, f"{p}.conv.ln", d)
        nn.init_linear(params, f"{p}.conv.pw1", d, 2 * d, rng)
        bound = 1.0 / np.sqrt(cfg.conv_kernel_width)
        params.add(f"{p}.conv.dw.w", rng.uniform(-bound, bound, size=(cfg.conv_kernel_width, d)))
        params.add(f"{p}.conv.dw.b", np.zeros(d))
        nn.init_norm(params, f"{p}.conv.ln2", d)
        nn.init_linear(params, f"{p}.conv.pw2", d, d, rng)
        nn.init_ffn(params, f"{p}.ff2", d, cfg.d_ffn, rng)
        nn.init_norm(params, f"{p}.final_ln", d)


def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
    return T.mul(x, mask[..., None].astype(x.data.dtype))


def subsample(x: Tensor, lengths: np.ndarray, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """``[B, T, F] -> [B, L, d_model]`` with the valid-frame mask.

    Padded frames are zeroed before each convolution so valid outputs never
    see padding content.
    """
    lengths = np.asarray(lengths)
    if x.shape[1] < 1 or np.any(lengths < 1):
        raise InputTooShortError("need at least one input frame per utterance")
    x = _masked(x, nn.length_mask(lengths, x.shape[1]))
    h = T.add(T.conv1d(x, params["encoder.sub.conv1.w"], stride=2, padding=1), params["encoder.sub.conv1.b"])
    l1 = (lengths - 1) // 2 + 1
    h = _masked(T.gelu(h), nn.length_mask(l1, h.shape[1]))
    h = T.add(T.conv1d(h, params["encoder.sub.conv2.w"], stride=2, padding=1), params["encoder.sub.conv2.b"])
    l2 = (l1 - 1) // 2 + 1
    mask = nn.length_mask(l2, h.shape[1])
    h = nn.dense(params, "encoder.sub.proj", _masked(T.gelu(h), mask))
    return h, mask


def conv_module(params: ModelParams, prefix: str, x: Tensor, mask: np.ndarray, p_drop: float, rng) -> Tensor:
    h = nn.norm(params, f"{prefix}.ln", x)
    h = nn.dense(params, f"{prefix}.pw1", h)
    d = x.shape[-1]
    h = T.mul(h[..., :d], T.sigmoid(h[..., d:]))          # GLU
    h = _masked(h, mask)
    width = params[f"{prefix}.dw.w"].shape[0]
    h = T.add(T.depthwise_conv1d(h, params[f"{prefix}.dw.w"], padding=(width - 1) // 2),
              params[f"{prefix}.dw.b"])
    h = T.gelu(nn.norm(params, f"{prefix}.ln2", h))
    h = nn.dense(params, f"{prefix}.pw2", h)
    return T.add(x, nn.dropout(h, p_drop, rng))


def conformer_block(
    h: Tensor, mask: np.ndarray, params: ModelParams, prefix: str, cfg: EncoderConfig, rng=None,
) -> Tensor:
    """Half-step FFN, masked self-attention, convolution, half-step FFN, final norm."""
    p = cfg.dropout
    bias = nn.attention_bias(mask)
    h = nn.ffn_sublayer(params, f"{prefix}.ff1", h, p, rng, scale=0.5)
    h = nn.self_attention_sublayer(params, f"{prefix}.mhsa", h, bias, cfg.num_heads, p, rng)
    h = conv_module(params, f"{prefix}.conv", h, mask, p, rng)
    h = nn.ffn_sublayer(params, f"{prefix}.ff2", h, p, rng, scale=0.5)
    return nn.norm(params, f"{prefix}.final_ln", h)


def encode(x, lengths, params: ModelParams, cfg: EncoderConfig, rng=None) -> EncoderOutput:
    """Features ``[B, T, F]`` (or a single ``[T, F]``) to acoustic states ``h``.

    ``rng=None`` is evaluation mode (no dropout, deterministic).
    """
    x = T.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    h, mask = subsample(x, lengths, params)
    pe = nn.positional_encoding(h.shape[1], cfg.d_model).astype(h.data.dtype)
    h = nn.dropout(T.add(h, pe), cfg.dropout, rng)
    for i in range(cfg.num_blocks):
        h = conformer_block(h, mask, params, f"encoder.block{i}", cfg, rng)
    return EncoderOutput(h, mask)
