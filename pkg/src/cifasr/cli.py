"""Command-line entry point: gen-data, train, adapt, eval, avg-ckpt, experiment.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import encoder
from . import tensor as T
from .config import Config, ConfigError, load_config
from .corpus import Corpus, build_corpus, read_corpus, write_corpus
from .decode import first_pass, second_pass
from .decoders import InfeasibleAlignmentError
from .experiment import model_config_for, run_experiment
from .match import DegenerateWeightsError, cif_fire, cif_weights, fire_count
from .model import build_params
from .params import CheckpointError, average_checkpoints, load_checkpoint, save_checkpoint
from .synth import DomainSpecError, make_batches
from .text import LexiconFormatError, decode_ids
from .train import adapt_text_only, average_best, select_best, train_paired

log = logging.getLogger("cifasr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ConfigError, CheckpointError, LexiconFormatError, DomainSpecError, InfeasibleAlignmentError,
               DegenerateWeightsError, T.ContractError, T.DimensionError, T.InputTooShortError,
               FileNotFoundError, NotADirectoryError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class OutputExistsError(ValueError):
    pass


def _prepare_out(path: Path, force: bool) -> Path:
    """Refuse to write into a non-empty directory unless ``force`` is set."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExistsError(f"{path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> Config:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    T.set_default_dtype(np.dtype(cfg.train.dtype).type)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
        cfg.adapt.seed = args.seed
    return cfg


def _corpus(args) -> Corpus:
    if not args.data:
        raise UsageError("--data is required")
    return read_corpus(args.data)


# ------------------------------------------------------------------ verbs


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out), args.force)
    corpus = build_corpus(cfg.data)
    write_corpus(corpus, out, cfg.data)
    for name, utts in corpus.sets.items():
        # bookkeeping self-check: every token survives batching
        for batch in make_batches(utts, cfg.train.batch_size):
            if int(batch.token_lens.sum()) != int((batch.chars >= 0).sum()):
                raise T.ContractError(f"batching lost tokens in {name}")
    print(json.dumps({name: len(utts) for name, utts in corpus.sets.items()}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args)
    out = _prepare_out(Path(args.out), args.force)
    mcfg = model_config_for(cfg, corpus, args.unit or cfg.model.unit)
    result = train_paired(mcfg, cfg.train, corpus["source_train"], corpus["source_dev"],
                          build_params(mcfg, cfg.train.seed), out)
    avg = average_best(result.records, cfg.train.keep_best)
    save_checkpoint(avg, out / "model.ckpt")
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "epochs": len(result.records),
                      "final_dev": result.records[-1]["dev_metric"] if result.records else None}))
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args)
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    params = load_checkpoint(args.ckpt)
    out = _prepare_out(Path(args.out), args.force)
    mcfg = model_config_for(cfg, corpus, args.unit or cfg.model.unit)
    result = adapt_text_only(mcfg, cfg.adapt, corpus["target_text"], corpus["source_train"], params,
                             corpus["target_dev"], out)
    best = select_best(result.records, cfg.adapt.keep_best) if result.records else []
    final = average_checkpoints(best) if best else params
    save_checkpoint(final, out / "model.ckpt")
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "selected": best}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args)
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    params = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = model_config_for(cfg, corpus, args.unit or cfg.model.unit)
    utts = corpus[f"{args.domain}_test"][: args.limit]
    passes = first_pass(utts, params, mcfg, cfg.decode)
    result = second_pass(passes, params, mcfg, cfg.decode)
    lex = corpus.lexicon
    (out / f"{args.domain}_results.tsv").write_text(result.to_tsv(lambda ids: decode_ids(ids, lex)), encoding="utf-8")
    c = result.corpus
    summary = {"domain": args.domain, "cer": c.cer, "substitutions": c.substitutions, "deletions": c.deletions,
               "insertions": c.insertions, "ref_len": c.ref_len, "utterances": len(result.utts),
               "checkpoint": str(args.ckpt)}
    (out / f"{args.domain}_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    if args.fire_dump:
        _write_fire_dump(utts, params, mcfg, cfg, out / f"{args.domain}_fires.jsonl")
    print(json.dumps(summary))
    return EXIT_OK


def _write_fire_dump(utts, params, mcfg, cfg: Config, path: Path) -> None:
    with open(path, "w") as fh:
        for batch in make_batches(utts, cfg.train.batch_size):
            enc = encoder.encode(batch.feats, batch.feat_lens, params, mcfg.encoder)
            w = cif_weights(enc.h, enc.mask, params)
            counts = np.maximum(fire_count(w.sums(), mcfg.cif_threshold, mcfg.cif_tail), 1)
            fired = cif_fire(enc.h, w, mcfg.cif_threshold, mcfg.cif_tail, n_fires=counts)
            for b, uid in enumerate(batch.ids):
                fh.write(fired.fire_dump(b, uid) + "\n")


def cmd_avg_ckpt(args) -> int:
    if not args.checkpoints:
        raise UsageError("at least one checkpoint is required")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise OutputExistsError(f"{out} exists (use --force to overwrite)")
    save_checkpoint(average_checkpoints(args.checkpoints), out)
    print(json.dumps({"checkpoint": str(out), "averaged": len(args.checkpoints)}))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out), args.force)
    corpus = build_corpus(cfg.data)
    write_corpus(corpus, out / "data", cfg.data)
    report = run_experiment(cfg, corpus, out)
    print(report.to_markdown())
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cifasr", description="CIF-based ASR with text-only domain adaptation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, out_help: str):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain corpus")
    common(p, "corpus directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="paired training on the source domain")
    common(p, "run directory")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--unit", choices=("syllable", "character"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="text-only adaptation on the target domain")
    common(p, "run directory")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--ckpt", help="checkpoint to adapt")
    p.add_argument("--unit", choices=("syllable", "character"))
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="two-pass decoding and CER")
    common(p, "results directory")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--ckpt", help="checkpoint to evaluate")
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--unit", choices=("syllable", "character"))
    p.add_argument("--limit", type=int, help="evaluate only the first N utterances")
    p.add_argument("--fire-dump", action="store_true", help="write per-utterance CIF fire diagnostics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("avg-ckpt", help="average checkpoints elementwise")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--config", help="accepted for uniformity; unused")
    p.add_argument("--seed", type=int, help="accepted for uniformity; unused")
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_avg_ckpt)

    p = sub.add_parser("experiment", help="full pipeline and markdown/JSON report")
    common(p, "experiment directory")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"cifasr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cifasr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.NonFiniteError as exc:
        print(f"cifasr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OutputExistsError, *DATA_ERRORS) as exc:
        print(f"cifasr: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
