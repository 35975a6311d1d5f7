"""Minimal decoder-only transformer in float64 numpy.

Block layout (pre-norm, parameter-free layer norm)::

    R   = X + Attn(LN(X))
    H_l = R + MLP(LN(R))
    out = H_tilde if realignment is active for this layer else H_l

Weights multiply from the right (``H @ W``), so ``W_q`` maps d_model -> d_model
columns and ``W_f`` is d_model x d_ff.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterator

import numpy as np

from ._validation import check_finite, check_matrix, check_tokens
from .exceptions import ConfigError, ShapeError
from .scr import (GateParams, RealignConfig, contextual_reweight, gate_activation,
                  init_gates, realignment_active)

LN_EPS = 1e-5
POSITIONAL_MODES = ("learned", "sinusoidal")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    positional_mode: str = "learned"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigError(f"positional_mode must be one of {POSITIONAL_MODES}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    W_f: np.ndarray
    b_f: np.ndarray
    W_f2: np.ndarray
    b_f2: np.ndarray

    NAMES = ("W_q", "W_k", "W_v", "W_o", "W_f", "b_f", "W_f2", "b_f2")


@dataclass
class ModelParams:
    """All weights of a model.  Gradients reuse this container."""

    config: ModelConfig
    token_embedding: np.ndarray
    positional_embedding: np.ndarray
    layers: list[LayerParams]
    output_projection: np.ndarray
    scr_gates: list[GateParams] = field(default_factory=list)

    def named_arrays(self, include_fixed: bool = True) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` pairs in a fixed order.

        Arrays are the live objects, so in-place edits write through.  The
        sinusoidal position table is skipped when ``include_fixed`` is false.
        """
        yield "token_embedding", self.token_embedding
        if include_fixed or self.config.positional_mode == "learned":
            yield "positional_embedding", self.positional_embedding
        for i, layer in enumerate(self.layers):
            for name in LayerParams.NAMES:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "output_projection", self.output_projection
        for i, gate in enumerate(self.scr_gates):
            yield f"scr.{i}.W_p", gate.W_p

    def learnable(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays(include_fixed=False))

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            token_embedding=self.token_embedding.copy(),
            positional_embedding=self.positional_embedding.copy(),
            layers=[LayerParams(**{n: getattr(lp, n).copy() for n in LayerParams.NAMES})
                    for lp in self.layers],
            output_projection=self.output_projection.copy(),
            scr_gates=[GateParams(g.W_p.copy(), g.epsilon) for g in self.scr_gates],
        )

    def zeros_like(self) -> "ModelParams":
        z = self.copy()
        for _, arr in z.named_arrays():
            arr[...] = 0.0
        return z

    def without_gates(self) -> "ModelParams":
        return replace(self, scr_gates=[])


@dataclass
class HiddenTrace:
    """Everything recorded during one forward pass.

    ``hidden[l]`` is layer ``l``'s output (realigned when ``realigned[l]``),
    ``block_outputs[l]`` the block output before realignment, ``embedded``
    the layer-0 input.  ``attention[l]`` has shape (n_heads, T, T) or is None
    when attention maps were not kept; ``gates[l]`` is None for layers without
    realignment.
    """

    tokens: np.ndarray
    embedded: np.ndarray
    hidden: list[np.ndarray]
    block_outputs: list[np.ndarray]
    attention: list[np.ndarray | None]
    gates: list[np.ndarray | None]
    realigned: list[bool]
    logits: np.ndarray
    scr_mode: str = "off"

    @property
    def final_hidden(self) -> np.ndarray:
        return self.hidden[-1]


def sinusoidal_table(max_seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_seq_len, dtype=np.float64)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_params(config: ModelConfig, sigma2: float = 0.02, seed: int = 0,
                gate_epsilon: float = 0.0) -> ModelParams:
    """Draw every weight i.i.d. from N(0, sigma2); biases start at zero.

    Gates for every layer are always created so baseline and realigned
    variants can share one initialization.
    """
    if not (sigma2 >= 0 and np.isfinite(sigma2)):
        raise ConfigError("sigma2 must be a finite non-negative real")
    rng = np.random.default_rng(seed)
    std = float(np.sqrt(sigma2))
    d, f = config.d_model, config.d_ff

    def normal(*shape):
        return rng.normal(0.0, std, size=shape) if std > 0 else np.zeros(shape)

    token_embedding = normal(config.vocab_size, d)
    if config.positional_mode == "learned":
        positional = normal(config.max_seq_len, d)
    else:
        positional = sinusoidal_table(config.max_seq_len, d)
    layers = [LayerParams(W_q=normal(d, d), W_k=normal(d, d), W_v=normal(d, d), W_o=normal(d, d),
                          W_f=normal(d, f), b_f=np.zeros(f), W_f2=normal(f, d), b_f2=np.zeros(d))
              for _ in range(config.n_layers)]
    output_projection = normal(d, config.vocab_size)
    gates = init_gates(d, config.n_layers, sigma2, rng, epsilon=gate_epsilon)
    return ModelParams(config, token_embedding, positional, layers, output_projection, gates)


def embed(tokens, params: ModelParams) -> np.ndarray:
    cfg = params.config
    tokens = check_tokens(tokens, cfg.vocab_size, cfg.max_seq_len)
    return params.token_embedding[tokens] + params.positional_embedding[: len(tokens)]


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def causal_mask(seq_len: int) -> np.ndarray:
    return np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)


def _head_attention(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scores = (q @ k.T) / np.sqrt(q.shape[1])
    scores[mask] = -np.inf
    return softmax(scores, axis=-1)


def self_attention(H: np.ndarray, layer: LayerParams, n_heads: int,
                   keep_attention: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Causal multi-head attention.

    Returns ``(A, context)`` with ``A`` of shape (n_heads, T, T) (None when
    ``keep_attention`` is false) and ``context = concat_h(A_h V_h) @ W_o``.
    """
    H = check_matrix(H, "H")
    check_finite(H, "H")
    A, ctx, _ = _attention(H, layer, n_heads, keep_attention)
    return A, ctx


def _attention(H, layer, n_heads, keep_attention):
    T, d = H.shape
    if d % n_heads:
        raise ShapeError(f"n_heads={n_heads} does not divide width {d}")
    hd = d // n_heads
    Q, K, V = H @ layer.W_q, H @ layer.W_k, H @ layer.W_v
    mask = causal_mask(T)
    O = np.empty_like(Q)
    A = np.empty((n_heads, T, T)) if keep_attention else None
    for h in range(n_heads):
        s = slice(h * hd, (h + 1) * hd)
        P = _head_attention(Q[:, s], K[:, s], mask)
        O[:, s] = P @ V[:, s]
        if keep_attention:
            A[h] = P
    return A, O @ layer.W_o, (Q, K, V, O)


def feedforward(A: np.ndarray, layer: LayerParams) -> np.ndarray:
    """Two-layer ReLU MLP ``relu(A @ W_f + b_f) @ W_f2 + b_f2``."""
    return np.maximum(A @ layer.W_f + layer.b_f, 0.0) @ layer.W_f2 + layer.b_f2


def transformer_block(X: np.ndarray, layer: LayerParams, n_heads: int,
                      keep_attention: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    A, ctx, _ = _attention(layer_norm(X), layer, n_heads, keep_attention)
    R = X + ctx
    return R + feedforward(layer_norm(R), layer), A


def output_logits(H: np.ndarray, params: ModelParams) -> np.ndarray:
    return layer_norm(H) @ params.output_projection


def _check_scr(params: ModelParams, scr_mode: str) -> bool:
    if scr_mode not in ("on", "off"):
        raise ConfigError(f"scr_mode must be 'on' or 'off', got {scr_mode!r}")
    if scr_mode == "on" and len(params.scr_gates) != params.config.n_layers:
        raise ConfigError("scr_mode='on' requires one gate per layer in params.scr_gates")
    return scr_mode == "on"


def forward(tokens, params: ModelParams, scr_mode: str = "off",
            realign_config: RealignConfig | None = None,
            keep_attention: bool = True) -> HiddenTrace:
    """Run the model over ``tokens`` and record a :class:`HiddenTrace`."""
    scr_on = _check_scr(params, scr_mode)
    realign_config = realign_config or RealignConfig()
    tokens = check_tokens(tokens, params.config.vocab_size, params.config.max_seq_len)
    T = len(tokens)
    x = embed(tokens, params)
    embedded = x
    hidden, block_outputs, attention, gates, realigned = [], [], [], [], []
    for l, layer in enumerate(params.layers):
        h_l, A = transformer_block(x, layer, params.config.n_heads, keep_attention)
        active = scr_on and realignment_active(T, realign_config, l)
        if active:
            alpha = gate_activation(h_l, params.scr_gates[l])
            out = contextual_reweight(alpha, h_l, x)
        else:
            alpha, out = None, h_l
        block_outputs.append(h_l)
        attention.append(A)
        gates.append(alpha)
        realigned.append(active)
        hidden.append(out)
        x = out
    logits = output_logits(x, params)
    check_finite(logits, "logits")
    return HiddenTrace(tokens=tokens, embedded=embedded, hidden=hidden,
                       block_outputs=block_outputs, attention=attention, gates=gates,
                       realigned=realigned, logits=logits, scr_mode="on" if scr_on else "off")


@dataclass
class LanguageModel:
    """Parameters bundled with the realignment setting used at inference."""

    params: ModelParams
    scr_mode: str = "off"
    realign_config: RealignConfig = field(default_factory=RealignConfig)
    vocab: Any = None

    def encode(self, text: str) -> np.ndarray:
        if self.vocab is None:
            raise ConfigError("model has no vocabulary")
        return self.vocab.encode(text)

    def trace(self, tokens, keep_attention: bool = True) -> HiddenTrace:
        return forward(tokens, self.params, self.scr_mode, self.realign_config,
                       keep_attention=keep_attention)

    def logits(self, tokens) -> np.ndarray:
        return self.trace(tokens, keep_attention=False).logits

    @property
    def config(self) -> ModelConfig:
        return self.params.config
