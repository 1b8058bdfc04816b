"""Two-pass decoding (CTC prefix beam search, attention rescoring) and CER scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import decoders, encoder, match
from . import tensor as T
from .config import DecodeConfig, ModelConfig
from .params import ModelParams
from .synth import Utterance, make_batches
from .text import BLANK

log = logging.getLogger(__name__)
NEG = -math.inf


def _logadd(a: float, b: float) -> float:
    if a == NEG:
        return b
    if b == NEG:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    ctc_score: float
    att_score: float = 0.0
    combined: float = 0.0


@dataclass
class CerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        if self.ref_len == 0:
            return float(self.errors)
        return self.errors / self.ref_len

    def __add__(self, other: "CerReport") -> "CerReport":
        return CerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_len + other.ref_len)


# ------------------------------------------------------------------ first pass


def ctc_prefix_beam_search(log_probs: np.ndarray, beam: int, prune_below: float | None = None
                           ) -> list[Hypothesis]:
    """Prefix beam search over ``[L, V]`` log-probabilities (blank id 0).

    Each prefix tracks the log-probability of paths ending in blank and in its
    last label. Returns up to ``beam`` prefixes, best first.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG)}
    vocab = range(lp.shape[1])
    for t in range(lp.shape[0]):
        row = lp[t]
        cand = vocab if prune_below is None else np.flatnonzero(row >= prune_below)
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(prefix):
            s = nxt.get(prefix)
            if s is None:
                s = nxt[prefix] = [NEG, NEG]
            return s

        for prefix, (pb, pnb) in beams.items():
            total = _logadd(pb, pnb)
            last = prefix[-1] if prefix else None
            for c in cand:
                p = float(row[c])
                if c == BLANK:
                    s = slot(prefix)
                    s[0] = _logadd(s[0], total + p)
                elif c == last:
                    s = slot(prefix + (c,))
                    s[1] = _logadd(s[1], pb + p)
                    s = slot(prefix)
                    s[1] = _logadd(s[1], pnb + p)
                else:
                    s = slot(prefix + (c,))
                    s[1] = _logadd(s[1], total + p)
        # zero-probability prefixes (e.g. a repeat with no blank in between) are dropped
        live = [kv for kv in nxt.items() if _logadd(*kv[1]) > NEG] or list(nxt.items())
        ranked = sorted(live, key=lambda kv: (-_logadd(*kv[1]), kv[0]))[:beam]
        beams = {k: (v[0], v[1]) for k, v in ranked}
    out = [Hypothesis(k, _logadd(*v)) for k, v in beams.items()]
    out.sort(key=lambda h: (-h.ctc_score, h.tokens))
    return out


# ------------------------------------------------------------------ second pass


def attention_scores(hyps: Sequence[Hypothesis], memory: T.Tensor, memory_mask: np.ndarray,
                     params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Teacher-forced decoder log-likelihood of each hypothesis (eos included)."""
    n = len(hyps)
    lens = np.array([len(h.tokens) for h in hyps], dtype=np.int64)
    chars = np.zeros((n, max(int(lens.max()), 1)), dtype=np.int64)
    for k, h in enumerate(hyps):
        chars[k, : lens[k]] = h.tokens
    y_in, y_out, y_lens = decoders.decoder_io(chars, lens)
    mem = np.broadcast_to(memory.data, (n, *memory.shape[-2:]))
    mmask = np.broadcast_to(np.asarray(memory_mask).reshape(1, -1), (n, memory.shape[-2]))
    logits = decoders.attention_decoder_forward(T.Tensor(np.ascontiguousarray(mem)), mmask, y_in, y_lens,
                                                params, cfg)
    return decoders.sequence_log_likelihood(logits, y_out, y_lens)


def combine(hyps: Sequence[Hypothesis], ctc_weight: float, length_bonus: float = 0.0) -> list[Hypothesis]:
    out = []
    for h in hyps:
        score = ctc_weight * h.ctc_score + (1.0 - ctc_weight) * h.att_score + length_bonus * len(h.tokens)
        out.append(Hypothesis(h.tokens, h.ctc_score, h.att_score, score))
    # stable sort keeps the first-pass order among equal scores
    return sorted(out, key=lambda h: -h.combined)


def attention_rescore(nbest: Sequence[Hypothesis], memory: T.Tensor, memory_mask: np.ndarray,
                      params: ModelParams, cfg: ModelConfig, ctc_weight: float,
                      length_bonus: float = 0.0) -> list[Hypothesis]:
    if not nbest:
        raise ValueError("empty n-best list")
    att = attention_scores(nbest, memory, memory_mask, params, cfg)
    scored = [Hypothesis(h.tokens, h.ctc_score, float(a)) for h, a in zip(nbest, att)]
    return combine(scored, ctc_weight, length_bonus)


# ------------------------------------------------------------------ scoring


def edit_alignment(ref: Sequence[int], hyp: Sequence[int]) -> CerReport:
    """Unit-cost Levenshtein counts; ties prefer substitution/match over insert+delete."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i, j] = min(dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                             dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return CerReport(int(s), d, ins, n)


def cer(ref: Sequence[int], hyp: Sequence[int]) -> CerReport:
    return edit_alignment(ref, hyp)


def corpus_cer(reports: Sequence[CerReport]) -> CerReport:
    total = CerReport()
    for r in reports:
        if r.ref_len == 0:
            log.warning("empty reference excluded from corpus CER")
            continue
        total = total + r
    return total


# ------------------------------------------------------------------ evaluation


@dataclass
class FirstPass:
    utt_id: str
    ref: tuple[int, ...]
    nbest: list[Hypothesis]
    memory: T.Tensor
    memory_mask: np.ndarray
    n_fires: int


@dataclass
class UttResult:
    utt_id: str
    ref: tuple[int, ...]
    hyp: tuple[int, ...]
    report: CerReport


@dataclass
class EvalResult:
    corpus: CerReport
    utts: list[UttResult] = field(default_factory=list)

    @property
    def cer(self) -> float:
        return self.corpus.cer

    def to_tsv(self, render) -> str:
        return "".join(f"{u.utt_id}\t{render(u.ref)}\t{render(u.hyp)}\t{u.report.cer:.4f}\n" for u in self.utts)


def first_pass(utts: Sequence[Utterance], params: ModelParams, cfg: ModelConfig, dcfg: DecodeConfig,
               batch_size: int = 32) -> list[FirstPass]:
    """Encoder, CTC n-best and unscaled CIF memory for each utterance."""
    out = []
    for batch in make_batches(utts, batch_size):
        enc = encoder.encode(batch.feats, batch.feat_lens, params, cfg.encoder)
        lp = decoders.ctc_log_probs(enc.h, params).data
        w = match.cif_weights(enc.h, enc.mask, params)
        counts = np.maximum(match.fire_count(w.sums(), cfg.cif_threshold, cfg.cif_tail), 1)
        fired = match.cif_fire(enc.h, w, cfg.cif_threshold, cfg.cif_tail, n_fires=counts)
        lengths = enc.lengths
        for b in range(batch.size):
            nbest = ctc_prefix_beam_search(lp[b, : lengths[b]], dcfg.beam)[: dcfg.nbest]
            k = int(counts[b])
            out.append(FirstPass(batch.ids[b], tuple(int(x) for x in batch.chars[b, : batch.token_lens[b]]),
                                 nbest, T.Tensor(fired.c.data[b, :k]), np.ones(k, dtype=bool), k))
    return out


def second_pass(passes: Sequence[FirstPass], params: ModelParams, cfg: ModelConfig,
                dcfg: DecodeConfig) -> EvalResult:
    results = []
    for fp in passes:
        ranked = attention_rescore(fp.nbest, fp.memory, fp.memory_mask, params, cfg,
                                   dcfg.ctc_weight, dcfg.length_bonus)
        hyp = ranked[0].tokens
        results.append(UttResult(fp.utt_id, fp.ref, hyp, cer(fp.ref, hyp)))
    return EvalResult(corpus_cer([r.report for r in results]), results)


def evaluate(utts: Sequence[Utterance], params: ModelParams, cfg: ModelConfig,
             dcfg: DecodeConfig) -> EvalResult:
    """Corpus CER of two-pass decoding: errors summed over utterances / reference tokens."""
    return second_pass(first_pass(utts, params, cfg, dcfg), params, cfg, dcfg)
