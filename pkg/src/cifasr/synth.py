"""Synthetic two-domain corpus: bigram text domains, prototype acoustics, batching and I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError, get_default_dtype
from .text import (
    N_SPECIAL,
    Lexicon,
    TokenSeq,
    chars_to_syllables,
    encode_chars,
    read_transcripts,
    write_transcripts,
)

PAD_ID = -1

# 40 CJK glyphs and 24 toneless pinyin-like syllables for the default desk lexicon
_GLYPHS = "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着"
_SYLLABLES = (
    "ba", "pi", "mu", "fa", "de", "ti", "nu", "lu", "ge", "ke", "he", "ji",
    "qi", "xi", "zhi", "chi", "shi", "ri", "zi", "ci", "si", "ya", "wo", "yu",
)


class DomainSpecError(ValueError):
    pass


@dataclass
class DomainSpec:
    """Bigram text domain over the non-special characters of a lexicon.

    ``transition[i, j]`` is P(next = char id j+3 | current = char id i+3);
    ``initial`` is the distribution of the first character (uniform if None).
    """

    transition: np.ndarray
    min_len: int
    max_len: int
    seed: int
    initial: np.ndarray | None = None
    name: str = "domain"

    def __post_init__(self) -> None:
        self.transition = np.asarray(self.transition, dtype=np.float64)
        n = self.transition.shape[0]
        if self.transition.shape != (n, n):
            raise DomainSpecError("transition table must be square")
        sums = self.transition.sum(axis=1)
        if np.any(sums == 0):
            raise DomainSpecError(f"degenerate transition row(s): {np.flatnonzero(sums == 0).tolist()}")
        if np.any(np.abs(sums - 1.0) > 1e-9) or np.any(self.transition < 0):
            raise DomainSpecError("every transition row must be a probability distribution")
        if self.initial is None:
            self.initial = np.full(n, 1.0 / n)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if abs(self.initial.sum() - 1.0) > 1e-9:
            raise DomainSpecError("initial distribution must sum to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise DomainSpecError("need 1 <= min_len <= max_len")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "transition": self.transition.tolist(),
            "initial": self.initial.tolist(),
            "min_len": self.min_len,
            "max_len": self.max_len,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DomainSpec":
        return cls(np.array(d["transition"]), d["min_len"], d["max_len"], d["seed"],
                   np.array(d["initial"]), d.get("name", "domain"))


@dataclass
class AcousticModelSpec:
    """Per-syllable prototype frames; row ``k`` belongs to syllable id ``k``."""

    prototypes: np.ndarray
    d_min: int = 8
    d_max: int = 16
    sigma: float = 0.3
    seed: int = 0

    @property
    def feat_dim(self) -> int:
        return self.prototypes.shape[1]

    def min_prototype_distance(self) -> float:
        p = self.prototypes[N_SPECIAL:]
        d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
        return float(d[~np.eye(len(p), dtype=bool)].min())

    def to_json(self) -> dict:
        d = asdict(self)
        d["prototypes"] = self.prototypes.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AcousticModelSpec":
        return cls(np.array(d["prototypes"]), d["d_min"], d["d_max"], d["sigma"], d["seed"])


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    chars: np.ndarray
    sylls: np.ndarray
    durations: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.chars) != len(self.sylls):
            raise ContractError(f"{self.id}: char/syllable length mismatch")


@dataclass
class Batch:
    feats: np.ndarray            # B x T x F
    feat_lens: np.ndarray        # B
    chars: np.ndarray            # B x U, PAD_ID padded
    sylls: np.ndarray            # B x U, PAD_ID padded
    token_lens: np.ndarray       # B
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.token_lens)


# ------------------------------------------------------------------ lexicon / domains


def default_lexicon(n_chars: int = 40, n_sylls: int = 24) -> Lexicon:
    """Lexicon where the first ``n_chars - n_sylls`` syllables carry two homophones.

    The first character listed for each syllable is its majority spelling.
    """
    if not n_sylls <= n_chars <= min(2 * n_sylls, len(_GLYPHS)) or n_sylls > len(_SYLLABLES):
        raise ValueError("unsupported default lexicon size")
    n_double = n_chars - n_sylls
    pairs = []
    g = iter(_GLYPHS)
    for k in range(n_sylls):
        pairs.append((next(g), _SYLLABLES[k]))
        if k < n_double:
            pairs.append((next(g), _SYLLABLES[k]))
    return Lexicon.from_pairs(pairs)


def _domain_table(
    lex: Lexicon, rng: np.random.Generator, fanout: int, major_prob: float,
) -> tuple[np.ndarray, np.ndarray]:
    n = lex.n_chars - N_SPECIAL
    groups = lex.homophones()
    sylls = sorted(groups)

    def row() -> np.ndarray:
        out = np.zeros(n)
        nxt = rng.choice(len(sylls), size=fanout, replace=False)
        w = rng.dirichlet(np.ones(fanout))
        for s_idx, p in zip(nxt, w):
            members = groups[sylls[s_idx]]
            if len(members) == 1:
                c = members[0]
            else:
                c = members[0] if rng.random() < major_prob else members[1 + rng.integers(len(members) - 1)]
            out[c - N_SPECIAL] += p
        return out

    table = np.stack([row() for _ in range(n)])
    table /= table.sum(axis=1, keepdims=True)
    initial = row()
    return table, initial / initial.sum()


def make_domain_pair(
    lex: Lexicon,
    seed: int,
    fanout: int = 5,
    source_major_prob: float = 0.85,
    target_major_prob: float = 0.3,
    min_len: int = 4,
    max_len: int = 10,
) -> tuple[DomainSpec, DomainSpec]:
    """Source and target bigram domains sharing one lexicon.

    Each row allows ``fanout`` next syllables, each spelled by one fixed
    homophone, so characters are recoverable from context within a domain.
    The source spells mostly with majority characters, the target mostly with
    minority ones, which leaves the target's characters rare in source text.
    """
    rng = np.random.default_rng(seed)
    src_t, src_i = _domain_table(lex, rng, fanout, source_major_prob)
    tgt_t, tgt_i = _domain_table(lex, rng, fanout, target_major_prob)
    src = DomainSpec(src_t, min_len, max_len, seed * 2 + 1, src_i, "source")
    tgt = DomainSpec(tgt_t, min_len, max_len, seed * 2 + 2, tgt_i, "target")
    return src, tgt


def gen_corpus(domain: DomainSpec, n_utts: int, lex: Lexicon, seed: int | None = None) -> list[str]:
    """Sentences drawn by a bigram walk; deterministic in the domain seed."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    rng = np.random.default_rng(domain.seed if seed is None else seed)
    n = domain.transition.shape[0]
    cdf = np.cumsum(domain.transition, axis=1)
    cdf[:, -1] = 1.0
    icdf = np.cumsum(domain.initial)
    icdf[-1] = 1.0
    out = []
    for _ in range(n_utts):
        length = int(rng.integers(domain.min_len, domain.max_len + 1))
        k = int(np.searchsorted(icdf, rng.random(), side="right"))
        seq = [k]
        for _ in range(length - 1):
            k = int(np.searchsorted(cdf[k], rng.random(), side="right"))
            seq.append(min(k, n - 1))
        out.append("".join(lex.chars[i + N_SPECIAL] for i in seq))
    return out


# ------------------------------------------------------------------ acoustics


def make_acoustic_spec(
    lex: Lexicon, feat_dim: int = 16, d_min: int = 8, d_max: int = 16, sigma: float = 0.3, seed: int = 0,
) -> AcousticModelSpec:
    rng = np.random.default_rng(seed)
    protos = np.zeros((lex.n_syllables, feat_dim))
    protos[N_SPECIAL:] = rng.normal(size=(lex.n_syllables - N_SPECIAL, feat_dim))
    spec = AcousticModelSpec(protos, d_min, d_max, sigma, seed)
    if spec.min_prototype_distance() <= 4 * sigma:
        raise DomainSpecError("prototypes too close for the requested noise level")
    return spec


def synth_features(
    sylls: TokenSeq | Sequence[int],
    acoustic: AcousticModelSpec,
    seed: int,
    durations: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Frames for each syllable: prototype plus Gaussian noise, for a random duration."""
    ids = np.asarray(sylls.ids if isinstance(sylls, TokenSeq) else sylls, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("need a non-empty syllable sequence")
    rng = np.random.default_rng(seed)
    if durations is None:
        dur = rng.integers(acoustic.d_min, acoustic.d_max + 1, size=ids.size)
    else:
        dur = np.asarray(durations, dtype=np.int64)
    frames = np.repeat(acoustic.prototypes[ids], dur, axis=0)
    if acoustic.sigma > 0:
        frames = frames + rng.normal(scale=acoustic.sigma, size=frames.shape)
    return frames, dur


def spec_augment(
    features: np.ndarray,
    n_time_masks: int,
    max_time_w: int,
    n_freq_masks: int,
    max_freq_w: int,
    seed: int,
) -> np.ndarray:
    """Time and frequency masking; masked cells take the per-dimension utterance mean."""
    t, f = features.shape
    if max_time_w > t or max_freq_w > f:
        raise ValueError("mask width exceeds feature extent")
    rng = np.random.default_rng(seed)
    fill = features.mean(axis=0)
    out = features.copy()
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_time_w + 1))
        t0 = int(rng.integers(0, t - w + 1))
        out[t0:t0 + w] = fill
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_freq_w + 1))
        f0 = int(rng.integers(0, f - w + 1))
        out[:, f0:f0 + w] = fill[f0:f0 + w]
    return out


def make_utterances(
    texts: Sequence[str], lex: Lexicon, acoustic: AcousticModelSpec, seed: int, prefix: str = "utt",
) -> list[Utterance]:
    seeds = np.random.SeedSequence(seed).spawn(len(texts))
    utts = []
    for k, (text, ss) in enumerate(zip(texts, seeds)):
        chars = encode_chars(text, lex)
        sylls = chars_to_syllables(chars, lex)
        feats, dur = synth_features(sylls, acoustic, int(ss.generate_state(1)[0]))
        utts.append(Utterance(f"{prefix}{k:05d}", feats, chars.array(), sylls.array(), dur))
    return utts


def text_utterances(texts: Sequence[str], lex: Lexicon, prefix: str = "txt") -> list[Utterance]:
    """Text-only items: empty feature matrix, characters and syllables."""
    out = []
    for k, text in enumerate(texts):
        chars = encode_chars(text, lex)
        out.append(Utterance(f"{prefix}{k:05d}", np.zeros((0, 0)), chars.array(),
                             chars_to_syllables(chars, lex).array()))
    return out


# ------------------------------------------------------------------ batching


def make_batches(
    utts: Sequence[Utterance],
    batch_size: int,
    pad_value: float = 0.0,
    order: Sequence[int] | None = None,
) -> list[Batch]:
    if not utts:
        raise ContractError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(utts))) if order is None else list(order)
    batches = []
    dtype = get_default_dtype()
    for start in range(0, len(order), batch_size):
        group = [utts[i] for i in order[start:start + batch_size]]
        f_lens = np.array([u.features.shape[0] for u in group], dtype=np.int64)
        t_lens = np.array([len(u.chars) for u in group], dtype=np.int64)
        fdim = max(u.features.shape[1] if u.features.ndim == 2 else 0 for u in group)
        feats = np.full((len(group), int(f_lens.max()), fdim), pad_value, dtype=dtype)
        chars = np.full((len(group), int(t_lens.max())), PAD_ID, dtype=np.int64)
        sylls = np.full_like(chars, PAD_ID)
        for b, u in enumerate(group):
            if f_lens[b]:
                feats[b, :f_lens[b]] = u.features
            chars[b, :t_lens[b]] = u.chars
            sylls[b, :t_lens[b]] = u.sylls
        batches.append(Batch(feats, f_lens, chars, sylls, t_lens, [u.id for u in group]))
    return batches


# ------------------------------------------------------------------ corpus I/O


def write_utterances(directory: str | Path, name: str, utts: Sequence[Utterance], lex: Lexicon) -> None:
    """``<name>.feats.bin`` (float32 LE, row-major), ``<name>.feats.idx`` and ``<name>.text.tsv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(d / f"{name}.feats.bin", "wb") as fb, open(d / f"{name}.feats.idx", "w") as fi:
        for u in utts:
            raw = np.ascontiguousarray(u.features, dtype="<f4").tobytes()
            t, f = u.features.shape
            fi.write(f"{u.id}\t{offset}\t{t}\t{f}\n")
            fb.write(raw)
            offset += len(raw)
    write_transcripts(d / f"{name}.text.tsv",
                      [(u.id, "".join(lex.chars[i] for i in u.chars)) for u in utts])


def read_utterances(directory: str | Path, name: str, lex: Lexicon) -> list[Utterance]:
    d = Path(directory)
    texts = dict(read_transcripts(d / f"{name}.text.tsv"))
    idx_path = d / f"{name}.feats.idx"
    if not idx_path.exists():
        return text_utterances_with_ids(texts, lex)
    blob = (d / f"{name}.feats.bin").read_bytes()
    utts = []
    with open(idx_path) as fi:
        for line in fi:
            uid, off, t, f = line.split("\t")
            off, t, f = int(off), int(t), int(f)
            feats = np.frombuffer(blob, dtype="<f4", count=t * f, offset=off).reshape(t, f)
            chars = encode_chars(texts[uid], lex)
            utts.append(Utterance(uid, feats.astype(get_default_dtype()), chars.array(),
                                  chars_to_syllables(chars, lex).array()))
    return utts


def text_utterances_with_ids(texts: dict[str, str], lex: Lexicon) -> list[Utterance]:
    out = []
    for uid, text in texts.items():
        chars = encode_chars(text, lex)
        out.append(Utterance(uid, np.zeros((0, 0)), chars.array(), chars_to_syllables(chars, lex).array()))
    return out


def write_text_only(directory: str | Path, name: str, texts: Sequence[str], prefix: str) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    write_transcripts(Path(directory) / f"{name}.text.tsv",
                      [(f"{prefix}{k:05d}", t) for k, t in enumerate(texts)])


def write_specs(directory: str | Path, specs: dict) -> None:
    with open(Path(directory) / "specs.json", "w") as fh:
        json.dump(specs, fh, indent=1, sort_keys=True)
