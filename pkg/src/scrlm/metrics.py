"""Coherence, stability, and efficiency metrics.

Closed-form definitions are listed in METRICS.md.  Model-level functions
accept anything with a ``trace(tokens, keep_attention=...)`` method (a
:class:`~scrlm.model.LanguageModel` or a fitted
:class:`~scrlm.estimator.SCRLanguageModel`); each has a pure counterpart
working on precomputed embeddings or distributions.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoding import DecodingConfig, generate
from .exceptions import DataError, InputError
from .model import HiddenTrace, LanguageModel, ModelConfig, forward, softmax

DEFAULT_POSITION_GROUPS = [(0, 512), (513, 1024), (1025, 2048), (2049, 4096), (4097, 8192)]


@dataclass
class MetricReport:
    """One metric evaluated over a grid for one model variant."""

    name: str
    grid_name: str
    grid: list
    values: list[float]
    variant: str = "model"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.grid) != len(self.values):
            raise DataError("grid and values must have equal length")
        if not all(np.isfinite(v) for v in self.values):
            raise DataError(f"non-finite value in report {self.name}")

    @property
    def stem(self) -> str:
        seed = self.metadata.get("seed")
        return f"{self.name}__{self.variant}" + ("" if seed is None else f"__seed{seed}")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.grid_name, "value"])
            for x, y in zip(self.grid, self.values):
                w.writerow([_fmt(x), _fmt(y)])
        return path

    @classmethod
    def from_csv(cls, path, name: str | None = None, variant: str = "model") -> "MetricReport":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        grid = [_parse(r[0]) for r in rows[1:]]
        values = [float(r[1]) for r in rows[1:]]
        return cls(name or path.stem, rows[0][0], grid, values, variant)

    def to_dict(self) -> dict:
        return {"name": self.name, "grid_name": self.grid_name, "grid": list(self.grid),
                "values": [float(v) for v in self.values], "variant": self.variant,
                "metadata": self.metadata}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_json(cls, path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _parse(s: str):
    for kind in (int, float):
        try:
            return kind(s)
        except ValueError:
            pass
    return s


# ---------------------------------------------------------------- primitives

def cosine(u, v) -> float:
    """Cosine similarity; 0.0 when either vector is zero, exactly +-1.0 for equal or negated vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u):
        if np.array_equal(u, v):
            return 1.0
        if np.array_equal(u, -v):
            return -1.0
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def entropy(probs) -> float:
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def total_variation(p, q) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass
class SegmentEmbedding:
    vector: np.ndarray
    span: tuple[int, int]

    def __post_init__(self):
        if self.span[1] <= self.span[0]:
            raise InputError("segment span must be non-empty")


def segment_embeddings(hidden: np.ndarray, segment_len: int, start: int = 0,
                       end: int | None = None) -> list[SegmentEmbedding]:
    """Mean-pool consecutive complete segments of ``hidden[start:end]``."""
    if segment_len < 1:
        raise InputError("segment_len must be >= 1")
    end = len(hidden) if end is None else end
    out = []
    for s in range(start, end - segment_len + 1, segment_len):
        out.append(SegmentEmbedding(hidden[s:s + segment_len].mean(axis=0), (s, s + segment_len)))
    return out


def consistency_from_embeddings(vectors: Sequence[np.ndarray]) -> float:
    """``100 * mean_i max(0, cos(v_i, v_{i+1}))`` over adjacent pairs."""
    if len(vectors) < 2:
        raise InputError("need at least two segments")
    sims = [max(0.0, cosine(a, b)) for a, b in zip(vectors[:-1], vectors[1:])]
    return 100.0 * float(np.mean(sims))


def retention_from_embeddings(topic_vectors: Sequence[Sequence[np.ndarray]]) -> float:
    """Within-topic adjacent consistency, averaged over topics."""
    if not topic_vectors:
        raise InputError("no topics")
    return float(np.mean([consistency_from_embeddings(v) for v in topic_vectors]))


def divergence_from_embeddings(u, v) -> float:
    return 1.0 - cosine(u, v)


def drift_from_embeddings(vectors: Sequence[np.ndarray]) -> list[float]:
    """``100 * (1 - cos(v_i, v_1))``; the first entry is 0.0 by definition."""
    if len(vectors) < 1:
        raise InputError("need at least one iteration")
    return [0.0] + [100.0 * divergence_from_embeddings(v, vectors[0]) for v in vectors[1:]]


def entropy_profile_from_logits(logits: np.ndarray, n_bins: int = 10) -> list[float]:
    """Per-position next-token entropy averaged in equal-width position bins.

    Position ``i`` of ``T`` has normalized position ``(i + 1) / T`` and lands
    in bin ``ceil(n_bins * (i + 1) / T) - 1``.
    """
    if n_bins < 1:
        raise InputError("n_bins must be >= 1")
    T = len(logits)
    if T < n_bins:
        raise InputError(f"sequence of {T} positions cannot fill {n_bins} bins")
    probs = softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=1)
    bins = ((np.arange(T) + 1) * n_bins - 1) // T
    return [float(h[bins == b].mean()) for b in range(n_bins)]


def head_deviation(A_prev: np.ndarray, A_next: np.ndarray) -> float:
    """``100 *`` mean total variation between paired attention rows.

    Both arrays have shape (n_heads, T, T); heads are paired by index.
    """
    if A_prev.shape != A_next.shape:
        raise DataError("attention maps must share a shape")
    return float(100.0 * (0.5 * np.abs(A_next - A_prev).sum(axis=-1)).mean())


def positional_stability_from_embeddings(embeddings: np.ndarray,
                                         groups: Sequence[tuple[int, int]]) -> list[float]:
    """Population std of row L2 norms within each inclusive ``(lo, hi)`` group."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(embeddings, axis=1)
    out = []
    for lo, hi in groups:
        if lo < 0 or hi >= len(embeddings) or hi < lo:
            raise InputError(f"position group ({lo}, {hi}) outside [0, {len(embeddings)})")
        group = norms[lo:hi + 1]
        # shifting by one member is exact for equal norms, so a constant group gives 0.0
        out.append(float(np.std(group - group[0])))
    return out


def clip_groups(groups: Sequence[tuple[int, int]], max_seq_len: int) -> list[tuple[int, int]]:
    """Drop groups starting beyond ``max_seq_len`` and cap the last one."""
    return [(lo, min(hi, max_seq_len - 1)) for lo, hi in groups if lo < max_seq_len]


# ---------------------------------------------------------------- model-level

def _core(model):
    """Unwrap a fitted estimator to its :class:`LanguageModel`."""
    return getattr(model, "model_", model)


def _tokens(model, sequence) -> np.ndarray:
    if isinstance(sequence, str):
        if not hasattr(model, "encode"):
            raise InputError("model has no vocabulary to encode text")
        return model.encode(sequence)
    return np.asarray(sequence, dtype=np.int64)


def _final_hidden(model, tokens) -> np.ndarray:
    return model.trace(tokens, keep_attention=False).final_hidden


def perplexity(model, corpus) -> float:
    """``exp`` of the token-weighted mean cross-entropy under teacher forcing.

    ``corpus`` is one sequence (text or ids) or a list of them; each needs at
    least two tokens.
    """
    if isinstance(corpus, str) or (isinstance(corpus, np.ndarray) and corpus.ndim == 1):
        corpus = [corpus]
    nll, count = 0.0, 0
    for seq in corpus:
        toks = _tokens(model, seq)
        if len(toks) < 2:
            continue
        logits = model.trace(toks[:-1], keep_attention=False).logits
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        nll += float(np.sum(lse - logits[np.arange(len(toks) - 1), toks[1:]]))
        count += len(toks) - 1
    if count == 0:
        raise InputError("corpus has no scorable tokens")
    return float(np.exp(nll / count))


def contextual_consistency(model, sequence, segment_len: int = 64) -> float:
    hidden = _final_hidden(model, _tokens(model, sequence))
    segs = segment_embeddings(hidden, segment_len)
    return consistency_from_embeddings([s.vector for s in segs])


def coherence_retention(model, corpus, segment_len: int = 32) -> float:
    """Consistency over adjacent segments inside each topic span, averaged over topics.

    ``corpus`` is a :class:`~scrlm.data.ShiftCorpus`.  Segments are laid out
    from each span's start and never cross a boundary.
    """
    spans = getattr(corpus, "spans", None)
    if spans is None:
        raise InputError("coherence_retention needs a corpus tagged with topic boundaries")
    hidden = _final_hidden(model, _tokens(model, corpus.text))
    per_topic = []
    for lo, hi in spans:
        segs = segment_embeddings(hidden, segment_len, lo, hi)
        if len(segs) < 2:
            raise InputError(f"topic span ({lo}, {hi}) holds fewer than two segments of {segment_len}")
        per_topic.append([s.vector for s in segs])
    return retention_from_embeddings(per_topic)


def coherence_divergence(model, sequence, early_frac: float = 0.25,
                         late_frac: float = 0.25) -> float:
    """``1 - cos`` between pooled embeddings of the first and last fractions."""
    for f in (early_frac, late_frac):
        if not 0 < f <= 0.5:
            raise InputError("fractions must lie in (0, 0.5]")
    hidden = _final_hidden(model, _tokens(model, sequence))
    T = len(hidden)
    n_early, n_late = int(early_frac * T), int(late_frac * T)
    if n_early < 1 or n_late < 1:
        raise InputError(f"sequence of {T} tokens too short to pool")
    return divergence_from_embeddings(hidden[:n_early].mean(axis=0), hidden[T - n_late:].mean(axis=0))


def drift_embeddings(model, prompt, n_iterations: int, decoding: DecodingConfig,
                     segment_len: int = 32) -> tuple[list[np.ndarray], np.ndarray]:
    """Extend ``prompt`` ``n_iterations`` times; pool each new segment in context."""
    if n_iterations < 1:
        raise InputError("n_iterations must be >= 1")
    model = _core(model)
    seq = _tokens(model, prompt)
    vectors = []
    for i in range(n_iterations):
        step = replace(decoding, seed=(decoding.seed + i) % 2**64)
        start = len(seq)
        seq = generate(seq, segment_len, model.params, model.scr_mode, step, model.realign_config)
        vectors.append(_final_hidden(model, seq)[start:].mean(axis=0))
    return vectors, seq


def semantic_drift(model, prompt, n_iterations: int = 6, decoding: DecodingConfig | None = None,
                   segment_len: int = 32) -> list[float]:
    vectors, _ = drift_embeddings(model, prompt, n_iterations, decoding or DecodingConfig(),
                                  segment_len)
    return drift_from_embeddings(vectors)


def token_entropy_profile(model, sequence, n_bins: int = 10) -> list[float]:
    return entropy_profile_from_logits(model.trace(_tokens(model, sequence), keep_attention=False).logits,
                                       n_bins)


def attention_head_deviation(trace: HiddenTrace) -> list[float]:
    """Deviation between each layer and the one before it, for layers 2..L."""
    if len(trace.attention) < 2:
        raise InputError("need at least two layers")
    if any(a is None for a in trace.attention):
        raise InputError("trace was recorded without attention maps")
    return [head_deviation(trace.attention[l - 1], trace.attention[l])
            for l in range(1, len(trace.attention))]


def positional_stability(source, groups: Sequence[tuple[int, int]] = DEFAULT_POSITION_GROUPS) -> list[float]:
    """Std of per-position embedding norms within each group.

    ``source`` is a (positions x d_model) array or model parameters, in which
    case their positional table is used.
    """
    table = getattr(source, "positional_embedding", source)
    return positional_stability_from_embeddings(table, groups)


def recalibrated_positions(model, length: int, probe_token: int = 0) -> np.ndarray:
    """Final-layer states for a constant-token probe of ``length`` positions.

    With a constant input the only position-dependent signal is the
    positional embedding as transformed (and, with realignment on,
    recalibrated) by the layers.
    """
    return _final_hidden(model, np.full(length, probe_token, dtype=np.int64))


# ---------------------------------------------------------------- efficiency

def estimate_forward_bytes(config: ModelConfig, seq_len: int, realigned_layers: int = 0,
                           keep_attention: bool = False, itemsize: int = 8) -> int:
    """Bytes held by the arrays one forward pass allocates.

    Per layer: the normalized input, Q/K/V, head outputs, attention context,
    residual, second normalization, two MLP activations and the block output
    (T x d each, T x d_ff for the MLP), plus one head's T x T score matrix
    live at a time (all heads when maps are kept).  A realigned layer adds the
    gate pre-activation, the gate, and the blended output.
    """
    T, d, f, H = seq_len, config.d_model, config.d_ff, config.n_heads
    per_layer = T * d * 8 + T * f * 2
    scores = T * T * (H if keep_attention else 1)
    gate = 3 * T * d
    total = T * d + config.n_layers * (per_layer + scores) + realigned_layers * gate
    total += T * config.vocab_size * 2
    return int(total * itemsize)


@dataclass
class ProfileResult:
    reports: dict[str, MetricReport]
    memory_bytes: dict[str, list[int]]

    @property
    def overhead(self) -> list[float]:
        on, off = self.reports["on"].values, self.reports["off"].values
        return [a / b - 1.0 for a, b in zip(on, off)]


def profile_inference(model: LanguageModel, lengths: Sequence[int], repeats: int = 5,
                      seed: int = 0) -> ProfileResult:
    """Median wall-clock milliseconds per forward pass, realignment off and on.

    Modes alternate inside each repeat so slow drift in machine load hits
    both equally.
    """
    if repeats < 3:
        raise InputError("repeats must be >= 3")
    model = _core(model)
    cfg = model.params.config
    if any(L > cfg.max_seq_len or L < 1 for L in lengths):
        raise InputError("lengths must lie in [1, max_seq_len]")
    rng = np.random.default_rng(seed)
    times = {"off": [], "on": []}
    memory = {"off": [], "on": []}
    for L in lengths:
        tokens = rng.integers(0, cfg.vocab_size, size=L)
        samples = {"off": [], "on": []}
        forward(tokens, model.params, "off", keep_attention=False)  # warm caches
        for _ in range(repeats):
            for mode in ("off", "on"):
                t0 = time.perf_counter()
                trace = forward(tokens, model.params, mode, model.realign_config, keep_attention=False)
                samples[mode].append((time.perf_counter() - t0) * 1e3)
                if len(samples[mode]) == 1:
                    memory[mode].append(estimate_forward_bytes(cfg, L, sum(trace.realigned)))
        for mode in ("off", "on"):
            times[mode].append(float(np.median(samples[mode])))
    reports = {mode: MetricReport("latency_ms", "seq_len", list(lengths), times[mode], mode,
                                  {"repeats": repeats, "seed": seed})
               for mode in ("off", "on")}
    return ProfileResult(reports, memory)
