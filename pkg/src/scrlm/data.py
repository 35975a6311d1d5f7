"""Character vocabularies, synthetic corpora, and window batching."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError, InputError

UNK = "�"
TOPIC_SYMBOLS = string.ascii_lowercase + string.ascii_uppercase


@dataclass
class Vocab:
    """Character vocabulary; id 0 is reserved for unknown symbols."""

    symbols: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != UNK:
            raise DataError("vocabulary must start with the unknown symbol")
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise DataError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        return np.fromiter((self.index.get(ch, 0) for ch in text), dtype=np.int64, count=len(text))

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids)

    def to_json(self) -> list[str]:
        return list(self.symbols)

    @classmethod
    def from_json(cls, symbols) -> "Vocab":
        return cls(list(symbols))


def build_vocab(text: str) -> Vocab:
    if not text:
        raise InputError("cannot build a vocabulary from empty text")
    return Vocab([UNK] + sorted(set(text) - {UNK}))


def synth_pattern_corpus(pattern: str, length: int, seed: int = 0, noise: float = 0.01) -> str:
    """Repeat ``pattern`` up to ``length`` characters.

    Each position is replaced, with probability ``noise``, by a different
    symbol drawn uniformly from the pattern's own alphabet.
    """
    if not pattern:
        raise InputError("pattern must be non-empty")
    if length < 0:
        raise InputError("length must be >= 0")
    reps = -(-length // len(pattern))
    clean = np.array(list((pattern * reps)[:length]), dtype=object)
    alphabet = sorted(set(pattern))
    if noise <= 0 or len(alphabet) < 2 or length == 0:
        return "".join(clean)
    rng = np.random.default_rng(seed)
    flip = rng.random(length) < noise
    # offset in 1..len-1 guarantees the substitute differs from the original
    offsets = rng.integers(1, len(alphabet), size=length)
    pos = {s: i for i, s in enumerate(alphabet)}
    out = clean.copy()
    for i in np.flatnonzero(flip):
        out[i] = alphabet[(pos[clean[i]] + offsets[i]) % len(alphabet)]
    return "".join(out)


@dataclass
class ShiftCorpus:
    """Concatenated topic spans with the exact positions where topics change."""

    text: str
    boundaries: list[int]
    topics: list[int]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        b = self.boundaries
        if any(x >= y for x, y in zip(b, b[1:])):
            raise DataError("boundaries must be strictly increasing")
        if b and (b[0] <= 0 or b[-1] >= len(self.text)):
            raise DataError("boundaries must lie inside the text")
        if len(self.topics) != len(b) + 1:
            raise DataError("need exactly one topic per span")

    @property
    def spans(self) -> list[tuple[int, int]]:
        edges = [0, *self.boundaries, len(self.text)]
        return list(zip(edges[:-1], edges[1:]))

    def save(self, path) -> tuple[Path, Path]:
        path = Path(path)
        path.write_text(self.text, encoding="utf-8")
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({"boundaries": self.boundaries, "topics": self.topics,
                                       "params": self.params}, indent=2, sort_keys=True))
        return path, sidecar

    @classmethod
    def load(cls, path) -> "ShiftCorpus":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(path.read_text(encoding="utf-8"), meta["boundaries"], meta["topics"],
                   meta.get("params", {}))


def topic_symbols(topic: int, symbols_per_topic: int = 3) -> str:
    lo = topic * symbols_per_topic
    if lo + symbols_per_topic > len(TOPIC_SYMBOLS):
        raise InputError(f"topic {topic} exceeds the available symbol pool")
    return TOPIC_SYMBOLS[lo:lo + symbols_per_topic]


def topic_span(topic: int, length: int, rng: np.random.Generator, symbols_per_topic: int = 3,
               noise: float = 0.05) -> str:
    """A cyclic pattern over the topic's symbols in a seeded order, with noise."""
    syms = list(topic_symbols(topic, symbols_per_topic))
    pattern = "".join(syms[i] for i in rng.permutation(len(syms)))
    return synth_pattern_corpus(pattern, length, seed=int(rng.integers(2**32)), noise=noise)


def synth_shift_corpus(k_shifts: int, span_len: int, seed: int = 0, segment_len: int = 1,
                       symbols_per_topic: int = 3, noise: float = 0.05) -> ShiftCorpus:
    """``k_shifts + 1`` spans of ``span_len`` characters, topic ``t`` in span ``t``.

    Topics use disjoint symbol subsets, so every boundary is a hard change
    of alphabet.
    """
    if k_shifts < 0:
        raise InputError("k_shifts must be >= 0")
    if span_len < 2 * segment_len or span_len < 2:
        raise InputError(f"span_len={span_len} must be >= 2 * segment_len={segment_len}")
    rng = np.random.default_rng(seed)
    topics = list(range(k_shifts + 1))
    text = "".join(topic_span(t, span_len, rng, symbols_per_topic, noise) for t in topics)
    boundaries = [span_len * (i + 1) for i in range(k_shifts)]
    params = {"k_shifts": k_shifts, "span_len": span_len, "seed": seed,
              "segment_len": segment_len, "symbols_per_topic": symbols_per_topic, "noise": noise}
    return ShiftCorpus(text, boundaries, topics, params)


def batch(tokens, seq_len: int, batch_size: int, seed=0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sample ``batch_size`` contiguous windows; targets are inputs shifted by one."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if seq_len < 1 or batch_size < 1:
        raise InputError("seq_len and batch_size must be >= 1")
    if len(tokens) <= seq_len:
        raise InputError(f"corpus of {len(tokens)} tokens is shorter than one window of {seq_len + 1}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(tokens) - seq_len, size=batch_size)
    return [(tokens[s:s + seq_len].copy(), tokens[s + 1:s + seq_len + 1].copy()) for s in starts]
