"""Next-token selection and autoregressive generation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_finite, check_tokens
from .exceptions import ConfigError, LengthError
from .model import ModelParams, forward, softmax
from .scr import RealignConfig

STRATEGIES = ("greedy", "top_k", "nucleus")


@dataclass(frozen=True)
class DecodingConfig:
    strategy: str = "greedy"
    k: int = 1
    p: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.p <= 1:
            raise ConfigError("p must lie in (0, 1]")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


def candidate_distribution(logits_row, decoding: DecodingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(candidate_ids, renormalized_probs)`` for one logits row.

    Candidates are ordered by decreasing probability; ties go to the lower id.
    """
    logits_row = np.asarray(logits_row, dtype=np.float64)
    check_finite(logits_row, "logits")
    order = np.argsort(-logits_row, kind="stable")
    if decoding.strategy == "greedy":
        return order[:1], np.ones(1)
    probs = softmax(logits_row / decoding.temperature)[order]
    if decoding.strategy == "top_k":
        n = min(decoding.k, len(order))
    else:
        cum = np.cumsum(probs)
        n = min(int(np.searchsorted(cum, decoding.p, side="left")) + 1, len(order))
    kept = probs[:n]
    return order[:n], kept / kept.sum()


def sample_next(logits_row, decoding: DecodingConfig, rng: np.random.Generator) -> int:
    ids, probs = candidate_distribution(logits_row, decoding)
    if len(ids) == 1:
        return int(ids[0])
    return int(ids[rng.choice(len(ids), p=probs)])


def generate(prompt, n_tokens: int, params: ModelParams, scr_mode: str = "off",
             decoding: DecodingConfig | None = None,
             realign_config: RealignConfig | None = None) -> np.ndarray:
    """Append ``n_tokens`` tokens to ``prompt`` one at a time.

    Every step reruns the full forward pass; there is no key/value cache.
    """
    decoding = decoding or DecodingConfig()
    cfg = params.config
    seq = check_tokens(prompt, cfg.vocab_size)
    if n_tokens < 0:
        raise ConfigError("n_tokens must be >= 0")
    if len(seq) + n_tokens > cfg.max_seq_len:
        raise LengthError(f"prompt ({len(seq)}) + n_tokens ({n_tokens}) exceeds max_seq_len {cfg.max_seq_len}")
    rng = np.random.default_rng(decoding.seed)
    out = list(seq)
    for _ in range(n_tokens):
        trace = forward(out, params, scr_mode, realign_config, keep_attention=False)
        out.append(sample_next(trace.logits[-1], decoding, rng))
    return np.asarray(out, dtype=np.int64)
