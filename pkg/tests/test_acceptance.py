"""Acceptance criteria 1-8, one pass/fail line each (printed in the terminal summary).

Criteria 5-7 need the full desk-scale experiment (about 40 minutes on one core).
Set ``CIFASR_REPORT=/path/to/report.json`` to score a report written by
``cifasr experiment``; otherwise the experiment is run here into a temporary
directory.
"""

import itertools
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cifasr import model as M
from cifasr.config import AdaptConfig, DataConfig, OptimConfig, load_config
from cifasr.corpus import build_corpus
from cifasr.decode import attention_rescore, ctc_prefix_beam_search
from cifasr.decoders import InfeasibleAlignmentError, ctc_loss
from cifasr.experiment import figure_checks, model_config_for, run_experiment
from cifasr.match import cif_fire, fire_count, scale_weights
from cifasr.params import ModelParams, average_params, load_checkpoint, save_checkpoint
from cifasr.tensor import Tensor
from cifasr.train import adapt_text_only

from conftest import tiny_model_config
from test_decode import EXACT_BEAM, lattice_oracle, random_lattice
from test_decoders import brute_force_ctc, random_log_probs
from test_match import reference_cif, weights

ROOT = Path(__file__).resolve().parents[1]
RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(RESULTS[n], file=sys.__stdout__, flush=True)
    assert ok, RESULTS[n]


# ------------------------------------------------------------------ 1. gradients


def test_criterion_1_gradient_suite():
    start = time.time()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "grad or gradient",
         "--ignore", str(ROOT / "tests" / "test_acceptance.py"), str(ROOT / "tests")],
        cwd=ROOT, capture_output=True, text=True)
    seconds = time.time() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(1, proc.returncode == 0 and seconds < 120,
           f"op-level and joint-loss finite-difference checks ({summary}) in {seconds:.0f}s")


# ------------------------------------------------------------------ 2. CTC oracle


def test_criterion_2_ctc_oracle():
    start = time.time()
    worst, instances = 0.0, 0
    for length in range(1, 7):
        for vocab in (2, 3, 4):
            lp = random_log_probs(np.random.default_rng(100 * length + vocab), length, vocab)
            for n in range(4):
                for target in itertools.product(range(1, vocab), repeat=n):
                    oracle = brute_force_ctc(lp, target)
                    tgt = np.array(target, dtype=int).reshape(1, -1)
                    instances += 1
                    if oracle == 0.0:
                        with pytest.raises(InfeasibleAlignmentError):
                            ctc_loss(Tensor(lp), tgt, [n], [length])
                        continue
                    loss = float(ctc_loss(Tensor(lp), tgt, [n], [length]).data)
                    worst = max(worst, abs(loss + math.log(oracle)))
    example = float(ctc_loss(Tensor(np.log(np.full((2, 2), 0.5))), [[1]], [1], [2]).data)
    seconds = time.time() - start
    ok = worst < 1e-8 and abs(example - 0.287682) < 1e-6 and seconds < 60
    record(2, ok, f"{instances} instances, max abs err {worst:.1e}, worked example {example:.6f}, {seconds:.1f}s")


# ------------------------------------------------------------------ 3. CIF conservation


def test_criterion_3_cif_conservation():
    start = time.time()
    fire_ok = portion_ok = law_ok = 0
    strict_checked = strict_ok = 0
    n = 1000
    for seed in range(n):
        rng = np.random.default_rng(seed)
        length = int(rng.integers(1, 31))
        target = int(rng.integers(1, length + 1))
        hv = rng.normal(size=(length, 3))
        ws = scale_weights(weights(rng.uniform(0.01, 1.0, size=length)), [target])
        out = cif_fire(Tensor(hv[None]), ws)
        fire_ok += int(out.n_fires[0]) == target
        portion_ok += bool(np.all(np.abs(out.portions.data[0].sum(axis=1) - 1.0) <= 1e-9))
        frames = out.fire_frames(0)
        if ws.a.data.max() < 1.0:
            strict_checked += 1
            strict_ok += all(x < y for x, y in zip(frames, frames[1:]))
        a = rng.uniform(0.0, 1.0, size=length)
        s = a.sum()
        law = int(np.floor(s)) + int(s - np.floor(s) >= 0.5)
        law_ok += int(fire_count([s])[0]) == law == len(reference_cif(a, hv)[0])
    seconds = time.time() - start
    ok = fire_ok == portion_ok == law_ok == n and strict_ok == strict_checked and seconds < 30
    record(3, ok, f"exact fire count {fire_ok}/{n}, portions sum to 1 {portion_ok}/{n}, "
                  f"strictly increasing fire frames {strict_ok}/{strict_checked} (scaled weights < 1), "
                  f"unscaled count law {law_ok}/{n}, {seconds:.1f}s")


# ------------------------------------------------------------------ 4. freeze


def test_criterion_4_freeze_bit_equality(tmp_path):
    corpus = build_corpus(DataConfig(n_source_train=24, n_source_dev=6, n_source_test=6, n_target_text=24,
                                     n_target_dev=6, n_target_test=6, max_len=6))
    cfg = tiny_model_config()
    cfg.model.feat_dim = 16
    mcfg = model_config_for(cfg, corpus, "syllable")
    save_checkpoint(M.build_params(mcfg, 0), tmp_path / "in.ckpt")
    params = load_checkpoint(tmp_path / "in.ckpt")
    acfg = AdaptConfig(epochs=3, batch_size=6, interleave=0.3, optim=OptimConfig(lr=1.0, warmup=20))
    adapt_text_only(mcfg, acfg, corpus["target_text"], corpus["source_train"], params, corpus["target_dev"])
    original = load_checkpoint(tmp_path / "in.ckpt")
    outside = [n for n in original if not n.startswith("decoder.")]
    same = sum(params[n].data.tobytes() == original[n].data.tobytes() for n in outside)
    changed = sum(params[n].data.tobytes() != original[n].data.tobytes() for n in original if n not in outside)
    record(4, same == len(outside) and changed > 0,
           f"{same}/{len(outside)} non-decoder tensors bit-identical; {changed} decoder tensors updated")


# ------------------------------------------------------------------ 5-7. experiment


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    path = os.environ.get("CIFASR_REPORT")
    if path:
        return json.loads(Path(path).read_text())
    cfg = load_config(ROOT / "configs" / "desk.json")
    out = tmp_path_factory.mktemp("experiment")
    return run_experiment(cfg, build_corpus(cfg.data), out).to_json()


def test_criterion_5_adaptation_table(report):
    base, adapted = report["main"]["baseline"], report["main"]["adapted"]
    gap = base["target"] - base["source"]
    rel = (base["target"] - adapted["target"]) / base["target"]
    drift = adapted["source"] - base["source"]
    minutes = report["seconds"] / 60
    ok = base["source"] <= 10 and gap >= 3 and rel >= 0.10 and drift < 2 and minutes < 45
    record(5, ok, f"source {base['source']:.2f}%, target {base['target']:.2f}% -> {adapted['target']:.2f}% "
                  f"({100 * rel:.1f}% relative), source drift {drift:+.2f} points, {minutes:.1f} min")


def test_criterion_6_epoch_series(report):
    fig = figure_checks(report["main"]["series"])
    ok = fig["epochs"] >= 20 and fig["non_increasing_trend"] and fig["plateaus"]
    record(6, ok, f"{fig['epochs']} epochs, moving average non-increasing: {fig['non_increasing_trend']}, "
                  f"final-10-epoch spread {fig['plateau_change']:.2f} points")


def test_criterion_7_unit_comparison(report):
    rows = report["unit_table"]
    cells = ", ".join(f"seed {r['seed']}: {r['syllable']:.2f} vs {r['character']:.2f}" for r in rows)
    record(7, report["seeds_compared"] >= 5 and report["syllable_wins"] >= 3,
           f"syllable <= character on {report['syllable_wins']}/{report['seeds_compared']} seeds ({cells})")


# ------------------------------------------------------------------ 8. decoding properties


def test_criterion_8_decoding_properties():
    mcfg = tiny_model_config().model
    params = M.build_params(mcfg, 0)
    memory = Tensor(np.random.default_rng(0).normal(size=(4, mcfg.d_model)))
    mask = np.ones(4, dtype=bool)
    invariant = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        lp = np.log(rng.dirichlet(np.ones(mcfg.n_chars), size=6))
        nbest = ctc_prefix_beam_search(lp, 5)
        ranked = attention_rescore(nbest, memory, mask, params, mcfg, ctc_weight=1.0)
        invariant += ranked[0].tokens == nbest[0].tokens

    rng = np.random.default_rng(1)
    exact = width_one = 0
    n = 300
    for _ in range(n):
        lp = random_lattice(rng)
        totals = lattice_oracle(lp)
        best = max(totals, key=totals.get)
        top = ctc_prefix_beam_search(lp, EXACT_BEAM)[0]
        exact += top.tokens == best and abs(top.ctc_score - totals[best]) < 1e-9
        width_one += ctc_prefix_beam_search(lp, 1)[0].tokens == best

    p = ModelParams()
    rng = np.random.default_rng(2)
    p.add("w", rng.normal(size=(3, 4)))
    p.add("b", rng.normal(size=(4,)))
    neg = p.copy()
    for t in neg.tensors():
        t.data = -t.data
    identity = all(average_params([p])[k].data.tobytes() == p[k].data.tobytes() for k in p)
    symmetric = all(np.all(average_params([p, neg])[k].data == 0.0) for k in p)

    ok = invariant == 20 and exact == n and identity and symmetric
    record(8, ok, f"ctc-weight 1 keeps CTC top-1 {invariant}/20; prefix-search 1-best equals exhaustive oracle "
                  f"{exact}/{n} (a width-1 beam agrees on {width_one}/{n}); averaging identity {identity}, "
                  f"symmetry {symmetric}")
