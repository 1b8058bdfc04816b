"""Match module: CIF down-sampling, syllable encoder and the MAE tie between them.

Firing is written in closed form. With cumulative weight ``S_l`` after frame
``l`` (``S_0 = 0``), fire ``i`` owns the interval ``[(i-1)*beta, i*beta]`` of
accumulated weight and frame ``l`` owns ``[S_{l-1}, S_l]``; the portion of
frame ``l`` integrated into fire ``i`` is the length of their overlap. This is
the same left-to-right accumulate-and-split procedure, expressed as a
piecewise-linear function of the weights, so gradients reach both the frames
and the weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .params import ModelParams
from .tensor import ContractError, Tensor


class DegenerateWeightsError(ValueError):
    pass


@dataclass
class CifWeights:
    a: Tensor                 # B x L
    mask: np.ndarray          # B x L
    scaled: bool = False
    scale: np.ndarray | None = None

    def sums(self) -> np.ndarray:
        return self.a.data.sum(axis=1)


@dataclass
class CifOutput:
    c: Tensor                 # B x I x d
    portions: Tensor          # B x I x L
    n_fires: np.ndarray       # B
    threshold: float

    @property
    def mask(self) -> np.ndarray:
        return nn.length_mask(self.n_fires, self.c.shape[1])

    def fire_frames(self, b: int = 0) -> list[int]:
        """Frame index at which each fire completes (last frame with a portion)."""
        w = self.portions.data[b, : self.n_fires[b]]
        return [int(np.flatnonzero(row > 0).max()) if np.any(row > 0) else -1 for row in w]

    def fire_dump(self, b: int = 0, utt_id: str | None = None) -> str:
        """JSON diagnostic with frame spans and portions per fire."""
        fires = []
        for i, row in enumerate(self.portions.data[b, : self.n_fires[b]]):
            nz = np.flatnonzero(row > 0)
            fires.append({
                "fire": i,
                "frames": nz.tolist(),
                "portions": [float(row[j]) for j in nz],
                "fire_frame": int(nz.max()) if nz.size else -1,
            })
        return json.dumps({"utt_id": utt_id, "threshold": self.threshold, "fires": fires})


@dataclass
class TextRepresentation:
    s: Tensor                 # B x I x d
    mask: np.ndarray          # B x I


# ------------------------------------------------------------------ CIF


def init_cif(params: ModelParams, d: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(3 * d)
    params.add("cif.conv.w", rng.uniform(-bound, bound, size=(3, d, d)))
    params.add("cif.conv.b", rng.uniform(-bound, bound, size=(d,)))
    nn.init_linear(params, "cif.proj", d, 1, rng)


def cif_weights(h: Tensor, mask: np.ndarray, params: ModelParams) -> CifWeights:
    """Per-frame weights in (0, 1): conv -> GELU -> linear -> sigmoid; padding gets 0."""
    fmask = mask[..., None].astype(h.data.dtype)
    x = T.mul(h, fmask)
    x = T.add(T.conv1d(x, params["cif.conv.w"], stride=1, padding=1), params["cif.conv.b"])
    x = nn.dense(params, "cif.proj", T.gelu(x))
    a = T.sigmoid(x.reshape(x.shape[0], x.shape[1]))
    return CifWeights(T.mul(a, mask.astype(a.data.dtype)), mask)


def scale_weights(w: CifWeights, target_lengths) -> CifWeights:
    """Rescale so each utterance's weights sum to its reference length."""
    target = np.asarray(target_lengths, dtype=w.a.data.dtype).reshape(-1)
    sums = w.a.data.sum(axis=1)
    if np.any(sums <= 0):
        raise DegenerateWeightsError("cannot scale weights that sum to zero")
    if np.any(target < 1):
        raise ValueError("target length must be >= 1")
    total = T.tsum(w.a, axis=1, keepdims=True)
    a = T.div(T.mul(w.a, target[:, None]), total)
    return CifWeights(a, w.mask, True, target / sums)


def fire_count(sums, threshold: float = 1.0, tail: float = 0.5) -> np.ndarray:
    """Unscaled fire count: whole thresholds plus one if the residue reaches ``tail * threshold``."""
    sums = np.asarray(sums, dtype=np.float64)
    whole = np.floor(sums / threshold)
    residue = sums - whole * threshold
    return (whole + (residue >= tail * threshold)).astype(np.int64)


def cif_fire(h: Tensor, w: CifWeights, threshold: float = 1.0, tail: float = 0.5,
             n_fires=None) -> CifOutput:
    """Integrate frames into fired embeddings.

    Scaled weights fire exactly ``round(sum(a) / threshold)`` times. Unscaled
    weights follow :func:`fire_count`; a trailing partial embedding keeps its
    raw (un-normalized) integral. ``n_fires`` overrides the count.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    a = w.a
    if not np.all(np.isfinite(a.data)):
        raise T.NonFiniteError("non-finite CIF weights")
    sums = a.data.sum(axis=1)
    if n_fires is None:
        if w.scaled:
            n_fires = np.rint(sums / threshold).astype(np.int64)
        else:
            n_fires = fire_count(sums, threshold, tail)
    n_fires = np.asarray(n_fires, dtype=np.int64).reshape(-1)
    b, length = a.shape
    n_max = max(int(n_fires.max()), 1)
    cum = T.cumsum(a, axis=1)                       # S_l
    prev = T.sub(cum, a)                            # S_{l-1}
    idx = np.arange(1, n_max + 1, dtype=a.data.dtype)[None, :, None]
    upper = idx * threshold
    lower = (idx - 1) * threshold
    hi = T.minimum(cum.reshape(b, 1, length), upper)
    lo = T.maximum(prev.reshape(b, 1, length), lower)
    overlap = T.relu(T.sub(hi, lo))                 # B x I x L
    row_mask = nn.length_mask(n_fires, n_max)[..., None].astype(a.data.dtype)
    portions = T.mul(overlap, row_mask)
    c = T.matmul(portions, h)
    return CifOutput(c, portions, n_fires, threshold)


def quantity_loss(w: CifWeights, target_lengths) -> Tensor:
    """Batch mean of ``|sum(a) - I|`` on unscaled weights."""
    target = np.asarray(target_lengths, dtype=w.a.data.dtype).reshape(-1)
    diff = T.sub(T.tsum(w.a, axis=1), target)
    return T.mean(T.tabs(diff))


# ------------------------------------------------------------------ syllable encoder


def init_syllable_encoder(params: ModelParams, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    params.add("syllenc.embed", rng.normal(scale=1.0, size=(cfg.text_vocab, d)))
    for i in range(cfg.syllable_blocks):
        nn.init_transformer_block(params, f"syllenc.block{i}", d, cfg.encoder.d_ffn, rng)
    nn.init_norm(params, "syllenc.final_ln", d)


def syllable_encode(ids: np.ndarray, lengths, params: ModelParams, cfg: ModelConfig,
                    rng=None) -> TextRepresentation:
    """Token ids ``[B, I]`` (padding ignored via ``lengths``) to representations ``[B, I, d]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    lengths = np.asarray(lengths).reshape(-1)
    if ids.shape[1] == 0 or np.any(lengths < 1):
        raise ContractError("syllable encoder needs a non-empty sequence")
    mask = nn.length_mask(lengths, ids.shape[1])
    valid = ids[mask]
    if valid.size and (valid.min() < 0 or valid.max() >= cfg.text_vocab):
        raise ContractError("token id outside the text-branch vocabulary")
    safe = np.where(mask, ids, 0)
    x = T.take_rows(params["syllenc.embed"], safe)
    d = cfg.d_model
    p = cfg.encoder.dropout
    x = T.add(x, nn.positional_encoding(ids.shape[1], d).astype(x.data.dtype))
    x = nn.dropout(x, p, rng)
    bias = nn.attention_bias(mask)
    for i in range(cfg.syllable_blocks):
        pre = f"syllenc.block{i}"
        x = nn.self_attention_sublayer(params, f"{pre}.self", x, bias, cfg.encoder.num_heads, p, rng)
        x = nn.ffn_sublayer(params, f"{pre}.ffn", x, p, rng)
    return TextRepresentation(nn.norm(params, "syllenc.final_ln", x), mask)


def mae_loss(c: Tensor, s: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``|c - s|`` over valid positions and all feature dims."""
    if c.shape != s.shape:
        raise ContractError(f"MAE shape mismatch {c.shape} vs {s.shape}: firing count is off")
    diff = T.tabs(T.sub(c, s))
    if mask is None:
        return T.mean(diff)
    m = mask[..., None].astype(c.data.dtype)
    return T.mul(T.tsum(T.mul(diff, m)), 1.0 / (m.sum() * c.shape[-1]))
