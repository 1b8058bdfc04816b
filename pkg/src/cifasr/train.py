"""Stage 1 paired training, stage 2 text-only adaptation, checkpoint selection and averaging."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .config import AdaptConfig, LossWeights, ModelConfig, TrainConfig
from .optim import AdamState, adam_step, clip_grad_norm
from .params import ModelParams, average_checkpoints, save_checkpoint
from .synth import Batch, Utterance, make_batches, spec_augment
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

DECODER_PREFIX = "decoder."


@dataclass
class TrainResult:
    params: ModelParams
    records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def _check_finite(values: dict[str, float], where: str) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteError(f"non-finite loss at {where}: {bad}")


def _write_record(log_path: Path | None, record: dict) -> None:
    if log_path is None:
        return
    with open(log_path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _augment(batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    feats = batch.feats.copy()
    for b in range(batch.size):
        n = int(batch.feat_lens[b])
        feats[b, :n] = spec_augment(
            batch.feats[b, :n], cfg.time_masks, min(cfg.max_time_width, n), cfg.freq_masks,
            min(cfg.max_freq_width, feats.shape[2]), int(rng.integers(2**31)))
    return feats


def dev_paired_loss(params: ModelParams, mcfg: ModelConfig, batches: Sequence[Batch],
                    weights: LossWeights, smoothing: float) -> dict[str, float]:
    totals: dict[str, float] = {}
    count = 0
    for batch in batches:
        vals = M.paired_forward(params, mcfg, batch, weights, smoothing).losses.values()
        for k, v in vals.items():
            totals[k] = totals.get(k, 0.0) + v * batch.size
        count += batch.size
    return {k: v / count for k, v in totals.items()}


def dev_text_loss(params: ModelParams, mcfg: ModelConfig, batches: Sequence[Batch], smoothing: float) -> float:
    total = count = 0.0
    for batch in batches:
        total += float(M.text_only_batch_loss(params, mcfg, batch, smoothing).data) * batch.size
        count += batch.size
    return total / count


def _optimizer_step(params: ModelParams, state: AdamState, clip: float) -> tuple[float, float]:
    norm = clip_grad_norm(params, clip)
    lr = adam_step(params, state)
    return norm, lr


def train_paired(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    train_utts: Sequence[Utterance],
    dev_utts: Sequence[Utterance],
    params: ModelParams,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[int, ModelParams], dict] | None = None,
) -> TrainResult:
    """Modality-matched training on paired data with the five-term joint loss."""
    result = TrainResult(params)
    if tcfg.epochs <= 0:
        return result
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        log_path.write_text("")
    rng = np.random.default_rng(tcfg.seed)
    oc = tcfg.optim
    state = AdamState(oc.lr, mcfg.d_model, oc.warmup)
    dev_batches = make_batches(dev_utts, tcfg.batch_size)
    weights = tcfg.loss_weights
    params.zero_grad()
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_utts))
        batches = make_batches(train_utts, tcfg.batch_size, order=order)
        sums: dict[str, float] = {}
        pending = 0
        for step, batch in enumerate(batches, 1):
            feats = _augment(batch, tcfg, rng) if tcfg.spec_augment else None
            fwd = M.paired_forward(params, mcfg, batch, weights, oc.label_smoothing, rng, feats)
            vals = fwd.losses.values()
            _check_finite(vals, f"epoch {epoch} step {step} ({batch.ids[:3]}...)")
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            loss = fwd.losses.total
            if oc.accum_steps > 1:
                loss = loss * (1.0 / oc.accum_steps)
            loss.backward()
            pending += 1
            if pending == oc.accum_steps or step == len(batches):
                _optimizer_step(params, state, oc.clip)
                pending = 0
        train_means = {k: v / len(batches) for k, v in sums.items()}
        dev = dev_paired_loss(params, mcfg, dev_batches, weights, oc.label_smoothing)
        record = {"stage": "paired", "epoch": epoch, "losses": train_means, "dev": dev,
                  "dev_metric": dev["total"], "lr": state.current_lr(), "step": state.t}
        if out is not None:
            path = out / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(params, path)
            record["checkpoint"] = str(path)
            result.checkpoints.append(str(path))
        if on_epoch is not None:
            record.update(on_epoch(epoch, params))
        result.records.append(record)
        _write_record(log_path, record)
        log.info("paired epoch %d train %.3f dev %.3f", epoch, train_means["total"], dev["total"])
    return result


def freeze_for_text_only(params: ModelParams) -> ModelParams:
    """Only ``decoder.*`` stays trainable."""
    params.set_trainable(lambda name: name.startswith(DECODER_PREFIX))
    return params


def adapt_text_only(
    mcfg: ModelConfig,
    acfg: AdaptConfig,
    target_text: Sequence[Utterance],
    source_paired: Sequence[Utterance],
    params: ModelParams,
    target_dev: Sequence[Utterance] | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[int, ModelParams], dict] | None = None,
    loss_weights: LossWeights | None = None,
) -> TrainResult:
    """Decoder-only adaptation on target text, interleaving source paired batches.

    At each step a source paired batch is drawn with probability
    ``acfg.interleave`` (only its attention-decoder term is back-propagated);
    otherwise the next target text batch is used with the text-only loss.
    An epoch ends when every target text batch has been used once.
    """
    freeze_for_text_only(params)
    result = TrainResult(params)
    if acfg.interleave > 0 and not source_paired:
        raise ValueError("interleaving needs source paired data")
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        log_path.write_text("")
    rng = np.random.default_rng(acfg.seed)
    oc = acfg.optim
    state = AdamState(oc.lr, mcfg.d_model, oc.warmup)
    weights = loss_weights or LossWeights()
    dev_batches = make_batches(target_dev, acfg.batch_size) if target_dev else []
    params.zero_grad()
    for epoch in range(1, acfg.epochs + 1):
        queue = make_batches(target_text, acfg.batch_size, order=rng.permutation(len(target_text)))
        text_sum = paired_sum = 0.0
        n_text = n_paired = pending = 0
        qi = 0
        while qi < len(queue):
            if acfg.interleave > 0 and rng.random() < acfg.interleave:
                idx = rng.choice(len(source_paired), size=min(acfg.batch_size, len(source_paired)), replace=False)
                batch = make_batches([source_paired[i] for i in idx], acfg.batch_size)[0]
                fwd = M.paired_forward(params, mcfg, batch, weights, oc.label_smoothing, rng)
                loss = fwd.losses.aed * weights.aed
                paired_sum += float(fwd.losses.aed.data)
                n_paired += 1
            else:
                loss = M.text_only_batch_loss(params, mcfg, queue[qi], oc.label_smoothing, rng)
                qi += 1
                text_sum += float(loss.data)
                n_text += 1
            if not math.isfinite(float(loss.data)):
                raise NonFiniteError(f"non-finite adaptation loss at epoch {epoch}")
            if oc.accum_steps > 1:
                loss = loss * (1.0 / oc.accum_steps)
            loss.backward()
            pending += 1
            if pending == oc.accum_steps or qi == len(queue):
                _optimizer_step(params, state, oc.clip)
                pending = 0
        record = {"stage": "text_only", "epoch": epoch,
                  "losses": {"text_aed": text_sum / max(n_text, 1),
                             "paired_aed": paired_sum / n_paired if n_paired else None},
                  "n_text_steps": n_text, "n_paired_steps": n_paired, "step": state.t}
        if dev_batches:
            record["dev_metric"] = dev_text_loss(params, mcfg, dev_batches, oc.label_smoothing)
        if out is not None:
            path = out / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(params, path)
            record["checkpoint"] = str(path)
            result.checkpoints.append(str(path))
        if on_epoch is not None:
            record.update(on_epoch(epoch, params))
        result.records.append(record)
        _write_record(log_path, record)
        log.info("text-only epoch %d loss %.3f dev %s", epoch, record["losses"]["text_aed"],
                 record.get("dev_metric"))
    return result


def select_best(records: Sequence[dict], k: int, key: str = "dev_metric") -> list[str]:
    """Checkpoint paths of the ``k`` lowest dev metrics; ties go to the earlier epoch."""
    ranked = sorted(records, key=lambda r: (r[key], r["epoch"]))
    return [r["checkpoint"] for r in ranked[:k]]


def read_metric_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def average_best(records: Sequence[dict], k: int) -> ModelParams:
    return average_checkpoints(select_best(records, k))
