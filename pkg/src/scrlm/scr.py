"""Probabilistic layer realignment.

Each enabled layer gets a gate ``alpha = sigmoid(H_l @ W_p.T + epsilon)`` and
its output is blended with the layer input,
``H_tilde = alpha * H_l + (1 - alpha) * H_prev``.  The coherence penalty for
the layer is ``sum_i ||H_tilde[i] - H_prev[i]||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from ._validation import check_finite, check_same_shape
from .exceptions import ConfigError, ConsistencyError, ShapeError

if TYPE_CHECKING:
    from .model import HiddenTrace, ModelParams


@dataclass
class GateParams:
    """Per-layer gate projection ``W_p`` (d_model x d_model) and bias ``epsilon``."""

    W_p: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        self.W_p = np.asarray(self.W_p, dtype=np.float64)
        if self.W_p.ndim != 2 or self.W_p.shape[0] != self.W_p.shape[1]:
            raise ShapeError(f"W_p must be square, got shape {self.W_p.shape}")
        check_finite(self.W_p, "W_p")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigError("epsilon must be a finite non-negative real")
        self.epsilon = float(self.epsilon)


@dataclass(frozen=True)
class RealignConfig:
    """When and how strongly realignment is applied.

    ``enabled_layers=None`` enables every layer.  ``detach_target`` treats the
    previous layer's state as a constant inside each coherence term.
    ``gate_gradient`` selects what ``W_p`` is trained on: ``"combined"`` uses
    the full objective, ``"coherence"`` uses only the layer's own coherence
    term (the literal per-layer update rule).
    """

    activation_threshold: int = 0
    lambda_coh: float = 0.1
    enabled_layers: frozenset[int] | None = None
    detach_target: bool = True
    gate_gradient: str = "combined"

    def __post_init__(self):
        if self.activation_threshold < 0:
            raise ConfigError("activation_threshold must be >= 0")
        if not (self.lambda_coh >= 0 and np.isfinite(self.lambda_coh)):
            raise ConfigError("lambda_coh must be a finite non-negative real")
        if self.enabled_layers is not None:
            object.__setattr__(self, "enabled_layers", frozenset(int(i) for i in self.enabled_layers))
        if self.gate_gradient not in ("combined", "coherence"):
            raise ConfigError(f"unknown gate_gradient {self.gate_gradient!r}")

    @classmethod
    def disabled(cls) -> "RealignConfig":
        return cls(lambda_coh=0.0, enabled_layers=frozenset())


def realignment_active(seq_len: int, config: RealignConfig, layer_index: int) -> bool:
    """True iff ``seq_len`` reaches the threshold and the layer is enabled.

    The threshold is inclusive.  ``layer_index`` is 0-based.
    """
    if seq_len < config.activation_threshold:
        return False
    return config.enabled_layers is None or layer_index in config.enabled_layers


def gate_logits(H_l: np.ndarray, gate: GateParams) -> np.ndarray:
    if H_l.ndim != 2 or H_l.shape[1] != gate.W_p.shape[1]:
        raise ShapeError(f"H_l shape {H_l.shape} incompatible with W_p {gate.W_p.shape}")
    return H_l @ gate.W_p.T + gate.epsilon


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate_activation(H_l: np.ndarray, gate: GateParams) -> np.ndarray:
    """Elementwise gate ``sigmoid(H_l @ W_p.T + epsilon)``, same shape as ``H_l``.

    Entries are mathematically in (0, 1); in float64 they saturate to exactly
    0 or 1 once the pre-activation exceeds roughly 37 in magnitude.
    """
    H_l = np.asarray(H_l, dtype=np.float64)
    check_finite(H_l, "H_l")
    return sigmoid(gate_logits(H_l, gate))


def contextual_reweight(alpha: np.ndarray, H_l: np.ndarray, H_prev: np.ndarray) -> np.ndarray:
    """Blend ``alpha * H_l + (1 - alpha) * H_prev`` entrywise.

    The result is clamped to the entrywise range of the two inputs, which the
    exact blend never leaves; this only removes one-ulp rounding overshoot.
    """
    check_same_shape(alpha, H_l, H_prev, names=("alpha", "H_l", "H_prev"))
    out = alpha * H_l + (1.0 - alpha) * H_prev
    return np.clip(out, np.minimum(H_l, H_prev), np.maximum(H_l, H_prev))


def coherence_loss(H_tilde: np.ndarray, H_prev: np.ndarray) -> float:
    """Sum over rows of the squared distance between realigned and previous states."""
    check_same_shape(H_tilde, H_prev, names=("H_tilde", "H_prev"))
    diff = np.asarray(H_tilde, dtype=np.float64) - H_prev
    return float(np.sum(diff * diff))


def init_gates(d_model: int, n_layers: int, sigma2: float, rng: np.random.Generator,
               epsilon: float = 0.0) -> list[GateParams]:
    std = np.sqrt(sigma2)
    return [GateParams(rng.normal(0.0, std, size=(d_model, d_model)) if std > 0
                       else np.zeros((d_model, d_model)), epsilon)
            for _ in range(n_layers)]


def inference_refinement(trace: "HiddenTrace", params: "ModelParams",
                         config: RealignConfig) -> "HiddenTrace":
    """Apply realignment to a trace recorded without it.

    Layers before the first active one are reused from ``trace`` as-is; from
    that layer on, the stored block output is gated and blended and every
    downstream layer and the logits are recomputed.  The result is bitwise
    equal to ``forward(tokens, params, "on", config)``.
    """
    from . import model as _model

    if any(trace.realigned):
        raise ConsistencyError("trace already contains realigned layers")
    n_layers = params.config.n_layers
    if len(trace.hidden) != n_layers or trace.hidden[0].shape[1] != params.config.d_model:
        raise ConsistencyError("trace does not match the model parameters")
    seq_len = len(trace.tokens)
    active = [realignment_active(seq_len, config, l) for l in range(n_layers)]
    if not any(active):
        return trace
    if len(params.scr_gates) != n_layers:
        raise ConsistencyError("refinement requires one gate per layer")

    first = active.index(True)
    keep_attention = trace.attention[0] is not None
    hidden = list(trace.hidden[:first])
    block_outputs = list(trace.block_outputs[:first])
    attention = list(trace.attention[:first])
    gates: list = list(trace.gates[:first])
    realigned = [False] * first

    x = trace.embedded if first == 0 else trace.hidden[first - 1]
    h_l = trace.block_outputs[first]
    for l in range(first, n_layers):
        if l > first:
            h_l, attn = _model.transformer_block(x, params.layers[l], params.config.n_heads,
                                                 keep_attention=keep_attention)
        else:
            attn = trace.attention[first]
        block_outputs.append(h_l)
        attention.append(attn)
        if active[l]:
            alpha = gate_activation(h_l, params.scr_gates[l])
            out = contextual_reweight(alpha, h_l, x)
            gates.append(alpha)
        else:
            out = h_l
            gates.append(None)
        realigned.append(active[l])
        hidden.append(out)
        x = out
    logits = _model.output_logits(x, params)
    return _model.HiddenTrace(tokens=trace.tokens, embedded=trace.embedded, hidden=hidden,
                              block_outputs=block_outputs, attention=attention, gates=gates,
                              realigned=realigned, logits=logits, scr_mode="on")

