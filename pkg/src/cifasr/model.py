"""The full recognizer: parameter construction and the paired / text-only forward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoders, encoder, match
from . import tensor as T
from .config import LossWeights, ModelConfig
from .params import ModelParams
from .synth import Batch
from .tensor import Tensor

MODULE_PREFIXES = ("encoder.", "cif.", "syllenc.", "ctc.", "ce.", "decoder.")


def build_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters from a seeded scaled-uniform fan-in initializer."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    encoder.init_encoder(params, cfg.feat_dim, cfg.encoder, rng)
    match.init_cif(params, cfg.d_model, rng)
    match.init_syllable_encoder(params, cfg, rng)
    decoders.init_heads(params, cfg, rng)
    decoders.init_decoder(params, cfg, rng)
    return params


def text_branch_ids(batch: Batch, cfg: ModelConfig) -> np.ndarray:
    return batch.sylls if cfg.unit == "syllable" else batch.chars


@dataclass
class PairedForward:
    losses: decoders.LossBundle
    enc: encoder.EncoderOutput
    cif: match.CifOutput


def paired_forward(
    params: ModelParams, cfg: ModelConfig, batch: Batch, weights: LossWeights,
    smoothing: float = 0.1, rng: np.random.Generator | None = None, feats: np.ndarray | None = None,
) -> PairedForward:
    """All five losses on one paired batch (training-mode CIF with scaled weights)."""
    x = batch.feats if feats is None else feats
    enc = encoder.encode(x, batch.feat_lens, params, cfg.encoder, rng)
    lengths = enc.lengths
    tok_lens = batch.token_lens

    log_probs = decoders.ctc_log_probs(enc.h, params)
    ctc = decoders.ctc_loss(log_probs, np.where(batch.chars < 0, 0, batch.chars), tok_lens, lengths)

    w = match.cif_weights(enc.h, enc.mask, params)
    qua = match.quantity_loss(w, tok_lens)
    ws = match.scale_weights(w, tok_lens)
    cif = match.cif_fire(enc.h, ws, cfg.cif_threshold, cfg.cif_tail, n_fires=tok_lens)
    c = cif.c

    ce = decoders.ce_loss(c, batch.chars, tok_lens, params)

    text = match.syllable_encode(text_branch_ids(batch, cfg), tok_lens, params, cfg, rng)
    s = text.s
    if cfg.mae_stop_grad_text:
        s = T.Tensor(s.data)
    mae = match.mae_loss(c, s, text.mask)

    y_in, y_out, y_lens = decoders.decoder_io(batch.chars, tok_lens)
    logits = decoders.attention_decoder_forward(c, text.mask, y_in, y_lens, params, cfg, rng)
    aed = decoders.aed_loss(logits, y_out, y_lens, smoothing)

    bundle = decoders.joint_loss(ctc, qua, ce, aed, mae, weights)
    return PairedForward(bundle, enc, cif)


def text_only_loss(
    params: ModelParams, cfg: ModelConfig, ids: np.ndarray, chars: np.ndarray, lengths,
    smoothing: float = 0.1, rng: np.random.Generator | None = None,
) -> Tensor:
    """AED loss with the text branch's representation standing in for the CIF output."""
    text = match.syllable_encode(ids, lengths, params, cfg, rng)
    y_in, y_out, y_lens = decoders.decoder_io(chars, lengths)
    logits = decoders.attention_decoder_forward(text.s, text.mask, y_in, y_lens, params, cfg, rng)
    return decoders.aed_loss(logits, y_out, y_lens, smoothing)


def text_only_batch_loss(params, cfg, batch: Batch, smoothing: float = 0.1, rng=None) -> Tensor:
    return text_only_loss(params, cfg, text_branch_ids(batch, cfg), batch.chars, batch.token_lens,
                          smoothing, rng)
