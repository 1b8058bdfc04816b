"""Default two-domain desk corpus: construction, writing and reading."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import DataConfig
from .synth import (
    AcousticModelSpec,
    DomainSpec,
    Utterance,
    default_lexicon,
    gen_corpus,
    make_acoustic_spec,
    make_domain_pair,
    make_utterances,
    read_utterances,
    text_utterances,
    write_specs,
    write_utterances,
)
from .text import Lexicon, load_lexicon

PAIRED_SETS = ("source_train", "source_dev", "source_test", "target_test")
TEXT_SETS = ("target_text", "target_dev")


@dataclass
class Corpus:
    lexicon: Lexicon
    source: DomainSpec
    target: DomainSpec
    acoustic: AcousticModelSpec
    sets: dict[str, list[Utterance]]

    def __getitem__(self, name: str) -> list[Utterance]:
        return self.sets[name]


def build_corpus(cfg: DataConfig) -> Corpus:
    """Both domains share one acoustic model; they differ only in their bigram tables."""
    lex = default_lexicon(cfg.n_chars, cfg.n_sylls)
    src, tgt = make_domain_pair(lex, cfg.seed, cfg.fanout, cfg.source_major_prob,
                                cfg.target_major_prob, cfg.min_len, cfg.max_len)
    acoustic = make_acoustic_spec(lex, cfg.feat_dim, cfg.d_min, cfg.d_max, cfg.sigma, seed=cfg.seed + 1000)
    base = cfg.seed * 100
    n_src = cfg.n_source_train + cfg.n_source_dev + cfg.n_source_test
    src_texts = gen_corpus(src, n_src, lex)
    n_tgt = cfg.n_target_text + cfg.n_target_dev + cfg.n_target_test
    tgt_texts = gen_corpus(tgt, n_tgt, lex)
    a, b = cfg.n_source_train, cfg.n_source_train + cfg.n_source_dev
    c, d = cfg.n_target_text, cfg.n_target_text + cfg.n_target_dev
    sets = {
        "source_train": make_utterances(src_texts[:a], lex, acoustic, base + 1, "src_train_"),
        "source_dev": make_utterances(src_texts[a:b], lex, acoustic, base + 2, "src_dev_"),
        "source_test": make_utterances(src_texts[b:], lex, acoustic, base + 3, "src_test_"),
        "target_text": text_utterances(tgt_texts[:c], lex, "tgt_text_"),
        "target_dev": text_utterances(tgt_texts[c:d], lex, "tgt_dev_"),
        "target_test": make_utterances(tgt_texts[d:], lex, acoustic, base + 4, "tgt_test_"),
    }
    return Corpus(lex, src, tgt, acoustic, sets)


def write_corpus(corpus: Corpus, directory: str | Path, data_cfg: DataConfig | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "lexicon.tsv").write_text(corpus.lexicon.to_tsv(), encoding="utf-8")
    for name in PAIRED_SETS:
        write_utterances(d, name, corpus.sets[name], corpus.lexicon)
    for name in TEXT_SETS:
        rows = corpus.sets[name]
        with open(d / f"{name}.text.tsv", "w", encoding="utf-8") as fh:
            for u in rows:
                fh.write(f"{u.id}\t{''.join(corpus.lexicon.chars[i] for i in u.chars)}\n")
    specs = {
        "source": corpus.source.to_json(),
        "target": corpus.target.to_json(),
        "acoustic": corpus.acoustic.to_json(),
    }
    if data_cfg is not None:
        from dataclasses import asdict
        specs["data_config"] = asdict(data_cfg)
    write_specs(d, specs)


def read_corpus(directory: str | Path) -> Corpus:
    d = Path(directory)
    lex = load_lexicon(d / "lexicon.tsv")
    specs = json.loads((d / "specs.json").read_text())
    sets = {name: read_utterances(d, name, lex) for name in PAIRED_SETS + TEXT_SETS}
    return Corpus(lex, DomainSpec.from_json(specs["source"]), DomainSpec.from_json(specs["target"]),
                  AcousticModelSpec.from_json(specs["acoustic"]), sets)
