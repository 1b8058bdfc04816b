"""Character and syllable vocabularies and the character-to-syllable map."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError

BLANK, UNK, SOS_EOS = 0, 1, 2
SPECIAL_NAMES = ("<blank>", "<unk>", "<sos/eos>")
SPECIAL_RENDER = ("⟨blank⟩", "⟨unk⟩", "⟨sos/eos⟩")
N_SPECIAL = 3
CHAR, SYLLABLE = "character", "syllable"


class LexiconFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    unit: str = CHAR

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


@dataclass(frozen=True)
class Lexicon:
    chars: tuple[str, ...]          # index = char id
    syllables: tuple[str, ...]      # index = syllable id
    char_to_syll: tuple[int, ...]   # char id -> syllable id

    blank: int = BLANK
    unk: int = UNK
    sos_eos: int = SOS_EOS

    @property
    def n_chars(self) -> int:
        return len(self.chars)

    @property
    def n_syllables(self) -> int:
        return len(self.syllables)

    def char_id(self, ch: str) -> int:
        return self._char_index.get(ch, self.unk)

    @property
    def _char_index(self) -> dict[str, int]:
        cache = self.__dict__.get("_cidx")
        if cache is None:
            cache = {c: i for i, c in enumerate(self.chars) if i >= N_SPECIAL}
            object.__setattr__(self, "_cidx", cache)
        return cache

    def char_map_array(self) -> np.ndarray:
        return np.asarray(self.char_to_syll, dtype=np.int64)

    def homophones(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for c in range(N_SPECIAL, self.n_chars):
            groups.setdefault(self.char_to_syll[c], []).append(c)
        return groups

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "Lexicon":
        chars = list(SPECIAL_NAMES)
        sylls = list(SPECIAL_NAMES)
        syll_index: dict[str, int] = {}
        c2s = [BLANK, UNK, SOS_EOS]
        seen: set[str] = set()
        for lineno, (ch, sy) in enumerate(pairs, 1):
            if not ch or not sy:
                raise LexiconFormatError(f"line {lineno}: missing character or syllable column")
            if ch in seen:
                raise LexiconFormatError(f"line {lineno}: duplicate character {ch!r}")
            seen.add(ch)
            if sy not in syll_index:
                syll_index[sy] = len(sylls)
                sylls.append(sy)
            chars.append(ch)
            c2s.append(syll_index[sy])
        if len(chars) == N_SPECIAL:
            raise LexiconFormatError("lexicon has no usable entries")
        return cls(tuple(chars), tuple(sylls), tuple(c2s))

    def to_tsv(self) -> str:
        return "".join(
            f"{self.chars[c]}\t{self.syllables[self.char_to_syll[c]]}\n"
            for c in range(N_SPECIAL, self.n_chars)
        )


def load_lexicon(path: str | Path) -> Lexicon:
    """Read a UTF-8 ``character<TAB>syllable`` file; ids follow file order after the specials."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2 or not cols[1].strip():
                raise LexiconFormatError(f"{path}:{lineno}: missing syllable column")
            pairs.append((cols[0], cols[1].strip()))
    return Lexicon.from_pairs(pairs)


def encode_chars(text: str, lex: Lexicon) -> TokenSeq:
    return TokenSeq(tuple(lex.char_id(ch) for ch in text), CHAR)


def chars_to_syllables(chars: TokenSeq, lex: Lexicon) -> TokenSeq:
    # specials map to themselves: blank->0, unk->1, sos/eos->2
    return TokenSeq(tuple(lex.char_to_syll[i] for i in chars.ids), SYLLABLE)


def decode_ids(seq: TokenSeq | Sequence[int], lex: Lexicon, unit: str | None = None) -> str:
    if isinstance(seq, TokenSeq):
        ids, unit = seq.ids, unit or seq.unit
    else:
        ids, unit = tuple(seq), unit or CHAR
    table = lex.chars if unit == CHAR else lex.syllables
    out = []
    for i in ids:
        if not 0 <= i < len(table):
            raise ContractError(f"token id {i} out of range for {unit} vocabulary of {len(table)}")
        out.append(SPECIAL_RENDER[i] if i < N_SPECIAL else table[i])
    return ("" if unit == CHAR else " ").join(out)


def read_transcripts(path: str | Path) -> list[tuple[str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            utt, sep, text = line.partition("\t")
            if not sep:
                raise LexiconFormatError(f"{path}:{lineno}: expected utt_id<TAB>text")
            rows.append((utt, text))
    return rows


def write_transcripts(path: str | Path, rows: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, text in rows:
            fh.write(f"{utt}\t{text}\n")
