"""End-to-end experiment: paired training, text-only adaptation and the unit comparison.

The report has three artifacts:

* baseline vs adapted CER on both domains for the main run,
* target/source CER after every adaptation epoch,
* adapted target CER of the syllable-unit and character-unit match module per seed.

The decoder is the only module that adaptation changes, so the first decoding
pass (encoder, CTC n-best, CIF memory) is computed once per baseline and reused
for every adaptation epoch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config, ModelConfig
from .corpus import Corpus
from .decode import FirstPass, first_pass, second_pass
from .model import build_params
from .params import ModelParams, load_checkpoint
from .train import adapt_text_only, average_best, select_best, train_paired

log = logging.getLogger(__name__)

# tolerance for "non-increasing in trend": one character error on the target test set is ~0.07 points
TREND_TOLERANCE = 0.1
PLATEAU_TOLERANCE = 0.3


@dataclass
class UnitRun:
    unit: str
    seed: int
    baseline: dict[str, float]
    adapted: dict[str, float]
    series: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    # adapted CER of extra adaptations from the same baseline, keyed by interleave ratio
    ablations: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def model_config_for(cfg: Config, corpus: Corpus, unit: str) -> ModelConfig:
    return dataclasses.replace(cfg.model, unit=unit, n_chars=corpus.lexicon.n_chars,
                               n_sylls=corpus.lexicon.n_syllables)


def _cer_pct(passes: Sequence[FirstPass], params: ModelParams, mcfg: ModelConfig, cfg: Config) -> float:
    return 100.0 * second_pass(passes, params, mcfg, cfg.decode).cer


def run_unit(cfg: Config, corpus: Corpus, unit: str, seed: int, out_dir: str | Path,
             train_epochs: int | None = None, adapt_epochs: int | None = None,
             eval_utts: int | None = None, ablate_interleave: Sequence[float] = ()) -> UnitRun:
    """Train on source paired data, adapt on target text, and score every adaptation epoch.

    Each ratio in ``ablate_interleave`` adds one more adaptation from the same
    baseline, scored only at its selected checkpoint.
    """
    start = time.time()
    out = Path(out_dir)
    mcfg = model_config_for(cfg, corpus, unit)
    tcfg = dataclasses.replace(cfg.train, seed=seed,
                               epochs=cfg.train.epochs if train_epochs is None else train_epochs)
    acfg = dataclasses.replace(cfg.adapt, seed=seed,
                               epochs=cfg.adapt.epochs if adapt_epochs is None else adapt_epochs)
    src_test = corpus["source_test"][:eval_utts]
    tgt_test = corpus["target_test"][:eval_utts]

    trained = train_paired(mcfg, tcfg, corpus["source_train"], corpus["source_dev"],
                           build_params(mcfg, seed), out / "paired")
    baseline = average_best(trained.records, tcfg.keep_best)

    src_fp = first_pass(src_test, baseline, mcfg, cfg.decode)
    tgt_fp = first_pass(tgt_test, baseline, mcfg, cfg.decode)
    base_scores = {"source": _cer_pct(src_fp, baseline, mcfg, cfg),
                   "target": _cer_pct(tgt_fp, baseline, mcfg, cfg)}
    log.info("%s seed %d baseline: source %.2f target %.2f", unit, seed,
             base_scores["source"], base_scores["target"])

    def on_epoch(epoch: int, params: ModelParams) -> dict:
        return {"source_cer": _cer_pct(src_fp, params, mcfg, cfg),
                "target_cer": _cer_pct(tgt_fp, params, mcfg, cfg)}

    adapted = adapt_text_only(mcfg, acfg, corpus["target_text"], corpus["source_train"], baseline.copy(),
                              corpus["target_dev"], out / "text_only", on_epoch=on_epoch)
    series = [{"epoch": r["epoch"], "source_cer": r["source_cer"], "target_cer": r["target_cer"],
               "dev_metric": r["dev_metric"]} for r in adapted.records]
    best = load_checkpoint(select_best(adapted.records, acfg.keep_best)[0])
    adapted_scores = {"source": _cer_pct(src_fp, best, mcfg, cfg),
                      "target": _cer_pct(tgt_fp, best, mcfg, cfg)}
    log.info("%s seed %d adapted: source %.2f target %.2f", unit, seed,
             adapted_scores["source"], adapted_scores["target"])

    ablations = {}
    for rho in ablate_interleave:
        rcfg = dataclasses.replace(acfg, interleave=rho)
        run = adapt_text_only(mcfg, rcfg, corpus["target_text"], corpus["source_train"], baseline.copy(),
                              corpus["target_dev"], out / f"text_only_rho{rho:g}")
        chosen = load_checkpoint(select_best(run.records, rcfg.keep_best)[0])
        ablations[f"{rho:g}"] = {"source": _cer_pct(src_fp, chosen, mcfg, cfg),
                                 "target": _cer_pct(tgt_fp, chosen, mcfg, cfg)}
        log.info("%s seed %d adapted with interleave %g: source %.2f target %.2f", unit, seed, rho,
                 ablations[f"{rho:g}"]["source"], ablations[f"{rho:g}"]["target"])
    return UnitRun(unit, seed, base_scores, adapted_scores, series, time.time() - start, ablations)


# ------------------------------------------------------------------ series checks


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def non_increasing_trend(values: Sequence[float], window: int = 5, tol: float = TREND_TOLERANCE) -> bool:
    ma = moving_average(values, window)
    return bool(np.all(np.diff(ma) <= tol))


def plateau_change(values: Sequence[float], last: int = 10, window: int = 5) -> float:
    """Spread of the moving average over the final ``last`` epochs."""
    tail = np.asarray(values[-last:], dtype=np.float64)
    ma = moving_average(tail, window)
    return float(ma.max() - ma.min())


def figure_checks(series: Sequence[dict], first: int = 20, last: int = 10) -> dict:
    target = [r["target_cer"] for r in series]
    change = plateau_change(target, last)
    return {
        "epochs": len(target),
        "non_increasing_trend": non_increasing_trend(target[:first]),
        "plateau_change": change,
        "plateaus": change < PLATEAU_TOLERANCE,
    }


# ------------------------------------------------------------------ report


@dataclass
class ExperimentReport:
    main: UnitRun
    sweep: list[UnitRun]
    seconds: float
    main_interleave: float = 0.3

    def unit_table(self) -> list[dict]:
        rows = []
        for seed in sorted({r.seed for r in self.sweep}):
            row = {"seed": seed}
            for r in self.sweep:
                if r.seed == seed:
                    row[r.unit] = r.adapted["target"]
            rows.append(row)
        return rows

    def syllable_wins(self) -> tuple[int, int]:
        rows = [r for r in self.unit_table() if "syllable" in r and "character" in r]
        return sum(r["syllable"] <= r["character"] for r in rows), len(rows)

    def to_json(self) -> dict:
        wins, total = self.syllable_wins()
        return {
            "main": self.main.to_json(),
            "main_interleave": self.main_interleave,
            "figure": figure_checks(self.main.series),
            "sweep": [r.to_json() for r in self.sweep],
            "unit_table": self.unit_table(),
            "syllable_wins": wins,
            "seeds_compared": total,
            "seconds": self.seconds,
        }

    def to_markdown(self) -> str:
        m = self.main
        rel = 100.0 * (m.baseline["target"] - m.adapted["target"]) / m.baseline["target"] if m.baseline["target"] else 0.0
        lines = [
            "# Text-only domain adaptation report",
            "",
            "## Baseline vs adapted CER (%)",
            "",
            "| model | source test | target test |",
            "|---|---|---|",
            f"| baseline (paired training) | {m.baseline['source']:.2f} | {m.baseline['target']:.2f} |",
            f"| text-only adapted | {m.adapted['source']:.2f} | {m.adapted['target']:.2f} |",
            "",
            f"Relative target CER reduction: {rel:.1f}%.",
            "",
        ]
        if m.ablations:
            lines += ["## Interleave ratio ablation (adapted CER, %)", "",
                      "| interleave ratio | source test | target test |", "|---|---|---|",
                      f"| {self.main_interleave:g} (main) | {m.adapted['source']:.2f} | "
                      f"{m.adapted['target']:.2f} |"]
            for rho, scores in m.ablations.items():
                lines.append(f"| {rho} | {scores['source']:.2f} | {scores['target']:.2f} |")
            lines.append("")
        lines += [
            "## CER vs adaptation epoch (%)",
            "",
            "| epoch | target CER | source CER | target dev loss |",
            "|---|---|---|---|",
            f"| 0 | {m.baseline['target']:.2f} | {m.baseline['source']:.2f} | |",
        ]
        for r in m.series:
            lines.append(f"| {r['epoch']} | {r['target_cer']:.2f} | {r['source_cer']:.2f} | {r['dev_metric']:.4f} |")
        fig = figure_checks(m.series)
        lines += [
            "",
            f"5-epoch moving average non-increasing: {fig['non_increasing_trend']}; "
            f"spread over the final 10 epochs: {fig['plateau_change']:.2f} points.",
            "",
            "## Syllable vs character match-module unit (adapted target CER, %)",
            "",
            "| seed | syllable | character |",
            "|---|---|---|",
        ]
        for row in self.unit_table():
            lines.append(f"| {row['seed']} | {row.get('syllable', float('nan')):.2f} | "
                         f"{row.get('character', float('nan')):.2f} |")
        wins, total = self.syllable_wins()
        lines += ["", f"Syllable unit at least as good on {wins} of {total} seeds.",
                  "", f"Total runtime: {self.seconds / 60:.1f} min.", ""]
        return "\n".join(lines)


def run_experiment(cfg: Config, corpus: Corpus, out_dir: str | Path) -> ExperimentReport:
    start = time.time()
    out = Path(out_dir)
    main = run_unit(cfg, corpus, "syllable", cfg.train.seed, out / "main",
                    ablate_interleave=cfg.experiment.ablate_interleave)
    ecfg = cfg.experiment
    sweep = [
        run_unit(cfg, corpus, unit, seed, out / f"sweep_{unit}_{seed}", ecfg.sweep_train_epochs,
                 ecfg.sweep_adapt_epochs, ecfg.sweep_eval_utts)
        for seed in ecfg.seeds for unit in ecfg.units
    ]
    report = ExperimentReport(main, sweep, time.time() - start, cfg.adapt.interleave)
    write_report(report, out)
    return report


def write_report(report: ExperimentReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True), encoding="utf-8")
