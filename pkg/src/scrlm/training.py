"""Losses, hand-written reverse-mode gradients, and the training loop.

The batch objective is::

    total = mean_b CE_b + lambda_coh * sum_l mean_b coh_{b,l}

where ``CE_b`` is the mean next-token cross-entropy of window ``b`` and
``coh_{b,l}`` the coherence penalty of layer ``l`` (zero for layers where
realignment is inactive).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._validation import check_finite, check_tokens
from .data import batch as make_batch
from .exceptions import InputError, NumericError, ShapeError
from .model import (LN_EPS, HiddenTrace, ModelParams, _check_scr, _head_attention, causal_mask,
                    embed)
from .scr import RealignConfig, coherence_loss, contextual_reweight, gate_activation, realignment_active

log = logging.getLogger(__name__)

Batch = Sequence[tuple[np.ndarray, np.ndarray]]


@dataclass
class LossBreakdown:
    cross_entropy: float
    coherence_per_layer: list[float]
    total: float

    @property
    def coherence_total(self) -> float:
        return float(sum(self.coherence_per_layer))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``lambda_coh=None`` defers to the realignment config's weight.
    """

    learning_rate: float = 0.3
    warmup_steps: int = 100
    finetune_steps: int = 100
    batch_size: int = 8
    seq_len: int = 32
    lambda_coh: float | None = None
    clip_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        from .exceptions import ConfigError
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.warmup_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if self.lambda_coh is not None and self.lambda_coh < 0:
            raise ConfigError("lambda_coh must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or None")


def cross_entropy(logits: np.ndarray, targets) -> float:
    """Mean over positions of ``-log softmax(logits[i])[targets[i]]`` (nats)."""
    logits = np.asarray(logits, dtype=np.float64)
    check_finite(logits, "logits")
    targets = check_tokens(targets, logits.shape[1])
    if len(targets) != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows but {len(targets)} targets")
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(targets)), targets]))


def combined_loss(trace: HiddenTrace, targets, realign_config: RealignConfig) -> LossBreakdown:
    """Cross-entropy plus weighted coherence penalties of one forward trace.

    Traces recorded without realignment yield an empty coherence list.
    """
    ce = cross_entropy(trace.logits, targets)
    if trace.scr_mode == "off":
        return LossBreakdown(ce, [], ce)
    coh = []
    for l, on in enumerate(trace.realigned):
        prev = trace.embedded if l == 0 else trace.hidden[l - 1]
        coh.append(coherence_loss(trace.hidden[l], prev) if on else 0.0)
    return LossBreakdown(ce, coh, ce + realign_config.lambda_coh * sum(coh))


# ---------------------------------------------------------------- forward cache

def _ln(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    sd = np.sqrt(var + LN_EPS)
    return xc / sd, 1.0 / sd


def _ln_backward(y, inv, dy):
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


@dataclass
class _LayerCache:
    X: np.ndarray
    a: np.ndarray
    a_inv: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    P: list
    O: np.ndarray
    m: np.ndarray
    m_inv: np.ndarray
    U: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    active: bool
    alpha: np.ndarray | None = None
    out: np.ndarray | None = None
    target: np.ndarray | None = None
    coh: float = 0.0


@dataclass
class _SeqCache:
    tokens: np.ndarray
    layers: list[_LayerCache]
    final_y: np.ndarray
    final_inv: np.ndarray
    logits: np.ndarray


def _forward_cached(tokens, params: ModelParams, scr_on: bool, realign: RealignConfig,
                    frozen_targets: list | None = None) -> _SeqCache:
    cfg = params.config
    T = len(tokens)
    hd = cfg.head_dim
    mask = causal_mask(T)
    x = embed(tokens, params)
    layers = []
    for l, lp in enumerate(params.layers):
        a, a_inv = _ln(x)
        Q, K, V = a @ lp.W_q, a @ lp.W_k, a @ lp.W_v
        O = np.empty_like(Q)
        Ps = []
        for h in range(cfg.n_heads):
            s = slice(h * hd, (h + 1) * hd)
            P = _head_attention(Q[:, s], K[:, s], mask)
            O[:, s] = P @ V[:, s]
            Ps.append(P)
        R = x + O @ lp.W_o
        m, m_inv = _ln(R)
        U = m @ lp.W_f + lp.b_f
        Z = np.maximum(U, 0.0)
        H = R + (Z @ lp.W_f2 + lp.b_f2)
        c = _LayerCache(x, a, a_inv, Q, K, V, Ps, O, m, m_inv, U, Z, H,
                        active=scr_on and realignment_active(T, realign, l))
        if c.active:
            c.alpha = gate_activation(H, params.scr_gates[l])
            c.out = contextual_reweight(c.alpha, H, x)
            c.target = x if frozen_targets is None else frozen_targets[l]
            c.coh = coherence_loss(c.out, c.target)
            x = c.out
        else:
            x = H
        layers.append(c)
    fy, finv = _ln(x)
    logits = fy @ params.output_projection
    return _SeqCache(tokens, layers, fy, finv, logits)


def _resolve_scr(params: ModelParams, scr_mode: str | None) -> bool:
    if scr_mode is None:
        scr_mode = "on" if params.scr_gates else "off"
    return _check_scr(params, scr_mode)


def _check_batch(batch: Batch, params: ModelParams):
    if len(batch) == 0:
        raise InputError("batch is empty")
    out = []
    for inp, tgt in batch:
        inp = check_tokens(inp, params.config.vocab_size, params.config.max_seq_len)
        tgt = check_tokens(tgt, params.config.vocab_size)
        if len(inp) != len(tgt):
            raise ShapeError("input and target windows differ in length")
        out.append((inp, tgt))
    return out


def _batch_forward(params, batch, scr_on, realign, frozen=None):
    caches = [_forward_cached(inp, params, scr_on, realign, None if frozen is None else frozen[b])
              for b, (inp, _) in enumerate(batch)]
    B = len(batch)
    ce = sum(cross_entropy(c.logits, tgt) for c, (_, tgt) in zip(caches, batch)) / B
    if not scr_on:
        return caches, LossBreakdown(ce, [], ce)
    n_layers = params.config.n_layers
    coh = [sum(c.layers[l].coh for c in caches) / B for l in range(n_layers)]
    return caches, LossBreakdown(ce, coh, ce + realign.lambda_coh * sum(coh))


def batch_loss(params: ModelParams, batch: Batch, realign_config: RealignConfig,
               scr_mode: str | None = None) -> LossBreakdown:
    """Objective averaged over the windows of ``batch``."""
    batch = _check_batch(batch, params)
    return _batch_forward(params, batch, _resolve_scr(params, scr_mode), realign_config)[1]


# ---------------------------------------------------------------- backward

def _sequence_backward(c: _SeqCache, tgt: np.ndarray, params: ModelParams, grads: ModelParams,
                       B: int, realign: RealignConfig) -> None:
    cfg = params.config
    T = len(tgt)
    hd = cfg.head_dim
    scale = 1.0 / np.sqrt(hd)

    probs = np.exp(c.logits - c.logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(T), tgt] -= 1.0
    dlogits /= T * B

    grads.output_projection += c.final_y.T @ dlogits
    dY = _ln_backward(c.final_y, c.final_inv, dlogits @ params.output_projection.T)

    coh_w = 2.0 * realign.lambda_coh / B
    for l in reversed(range(cfg.n_layers)):
        lc = c.layers[l]
        lp, gp = params.layers[l], grads.layers[l]
        if lc.active:
            diff = lc.out - lc.target
            d_out = dY + coh_w * diff
            dX = (1.0 - lc.alpha) * d_out
            if not realign.detach_target:
                dX -= coh_w * diff
            dH = lc.alpha * d_out
            dsig = lc.alpha * (1.0 - lc.alpha)
            dG = (lc.H - lc.X) * d_out * dsig
            W_p = params.scr_gates[l].W_p
            if realign.gate_gradient == "combined":
                grads.scr_gates[l].W_p += dG.T @ lc.H
            else:
                dG_coh = (2.0 / B) * diff * (lc.H - lc.X) * dsig
                grads.scr_gates[l].W_p += dG_coh.T @ lc.H
            dH += dG @ W_p
        else:
            dX = np.zeros_like(dY)
            dH = dY

        # H = R + MLP(LN(R))
        gp.W_f2 += lc.Z.T @ dH
        gp.b_f2 += dH.sum(axis=0)
        dU = (dH @ lp.W_f2.T) * (lc.U > 0)
        gp.W_f += lc.m.T @ dU
        gp.b_f += dU.sum(axis=0)
        dR = dH + _ln_backward(lc.m, lc.m_inv, dU @ lp.W_f.T)

        # R = X + Attn(LN(X))
        dX += dR
        gp.W_o += lc.O.T @ dR
        dO = dR @ lp.W_o.T
        dQ, dK, dV = np.empty_like(lc.Q), np.empty_like(lc.K), np.empty_like(lc.V)
        for h in range(cfg.n_heads):
            s = slice(h * hd, (h + 1) * hd)
            P = lc.P[h]
            do = dO[:, s]
            dP = do @ lc.V[:, s].T
            dV[:, s] = P.T @ do
            dS = P * (dP - (dP * P).sum(axis=1, keepdims=True))
            dQ[:, s] = (dS @ lc.K[:, s]) * scale
            dK[:, s] = (dS.T @ lc.Q[:, s]) * scale
        gp.W_q += lc.a.T @ dQ
        gp.W_k += lc.a.T @ dK
        gp.W_v += lc.a.T @ dV
        da = dQ @ lp.W_q.T + dK @ lp.W_k.T + dV @ lp.W_v.T
        dX += _ln_backward(lc.a, lc.a_inv, da)
        dY = dX

    np.add.at(grads.token_embedding, c.tokens, dY)
    if cfg.positional_mode == "learned":
        grads.positional_embedding[: len(c.tokens)] += dY


def loss_and_gradients(params: ModelParams, batch: Batch, realign_config: RealignConfig,
                       scr_mode: str | None = None) -> tuple[LossBreakdown, ModelParams]:
    batch = _check_batch(batch, params)
    scr_on = _resolve_scr(params, scr_mode)
    caches, loss = _batch_forward(params, batch, scr_on, realign_config)
    grads = params.zeros_like()
    for c, (_, tgt) in zip(caches, batch):
        _sequence_backward(c, tgt, params, grads, len(batch), realign_config)
    for name, g in grads.named_arrays():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    return loss, grads


def backward(params: ModelParams, batch: Batch, realign_config: RealignConfig,
             scr_mode: str | None = None) -> ModelParams:
    """Exact gradients of the batch objective for every learnable tensor.

    ``scr_mode`` defaults to ``"on"`` when ``params`` carries gates.  With
    ``realign_config.detach_target`` the previous layer's state inside each
    coherence term is a constant (stop-gradient).
    """
    return loss_and_gradients(params, batch, realign_config, scr_mode)[1]


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    worst_index: tuple
    tol: float
    n_checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero pairs finite."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn: Callable[[], float], arrays: dict[str, np.ndarray],
                    grads: dict[str, np.ndarray], h: float = 1e-5, tol: float = 1e-4,
                    n_samples: int = 200, full: Callable[[str], bool] = lambda name: False,
                    seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``grads`` to central differences of ``loss_fn``.

    ``loss_fn`` is evaluated after perturbing entries of ``arrays`` in place.
    Per tensor, ``n_samples`` random coordinates are checked (all of them if
    the tensor is smaller, or if ``full(name)`` is true).
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    rng = np.random.default_rng(seed)
    worst = (-1.0, "", ())
    per_tensor = {}
    n_checked = 0
    for name, arr in arrays.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
        size = arr.size
        if full(name) or size <= n_samples:
            flat_idx = np.arange(size)
        else:
            flat_idx = rng.choice(size, n_samples, replace=False)
        tensor_worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn()
            arr[idx] = orig - h
            down = loss_fn()
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            err = relative_error(float(g[idx]), numeric, floor)
            tensor_worst = max(tensor_worst, err)
            if err > worst[0]:
                worst = (err, name, tuple(int(i) for i in idx))
        per_tensor[name] = tensor_worst
        n_checked += len(flat_idx)
    return GradCheckReport(worst[0], worst[1], worst[2], tol, n_checked, per_tensor)


def finite_diff_check(params: ModelParams, batch: Batch, realign_config: RealignConfig,
                      h: float = 1e-5, tol: float = 1e-4, scr_mode: str | None = None,
                      n_samples: int = 200, seed: int = 0,
                      grads: ModelParams | None = None) -> GradCheckReport:
    """Check :func:`backward` against central finite differences.

    Every ``W_p`` coordinate is checked; other tensors are sampled.  With a
    detached coherence target the differenced function holds each layer's
    target fixed at its unperturbed value, whose gradient is exactly the
    stop-gradient one.  ``grads`` overrides the analytic gradients (used for
    fault injection).
    """
    if realign_config.gate_gradient != "combined":
        raise ValueError("finite differences only apply to gate_gradient='combined'")
    batch = _check_batch(batch, params)
    scr_on = _resolve_scr(params, scr_mode)
    work = params.copy()
    if grads is None:
        grads = backward(work, batch, realign_config, "on" if scr_on else "off")
    frozen = None
    if scr_on and realign_config.detach_target:
        caches, _ = _batch_forward(work, batch, scr_on, realign_config)
        frozen = [[lc.target.copy() if lc.active else None for lc in c.layers] for c in caches]

    def loss_fn():
        return _batch_forward(work, batch, scr_on, realign_config, frozen)[1].total

    arrays = work.learnable()
    grad_arrays = dict(grads.named_arrays())
    return check_gradients(loss_fn, arrays, grad_arrays, h=h, tol=tol, n_samples=n_samples,
                           full=lambda name: name.startswith("scr."), seed=seed)


# ---------------------------------------------------------------- optimization

def sgd_step(params: ModelParams, gradients: ModelParams, learning_rate: float) -> ModelParams:
    """Return a copy of ``params`` with ``theta - learning_rate * g`` applied."""
    new = params.copy()
    grad_arrays = dict(gradients.named_arrays())
    for name, arr in new.named_arrays(include_fixed=False):
        g = grad_arrays.get(name)
        if g is None or g.shape != arr.shape:
            raise ShapeError(f"gradient for {name} missing or mis-shaped")
        arr -= learning_rate * g
    return new


def global_norm(grads: ModelParams) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for _, g in grads.named_arrays(include_fixed=False))))


def clip_gradients(grads: ModelParams, max_norm: float) -> ModelParams:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    clipped = grads.copy()
    for _, g in clipped.named_arrays():
        g *= max_norm / norm
    return clipped


def train(params: ModelParams, corpus, config: TrainConfig, realign_config: RealignConfig,
          scr_mode: str = "on",
          callback: Callable[[int, LossBreakdown, ModelParams], None] | None = None,
          ) -> tuple[ModelParams, list[LossBreakdown]]:
    """Two-phase SGD.

    The first ``warmup_steps`` run without realignment and with zero
    coherence weight; the following ``finetune_steps`` use
    ``realign_config`` (and ``scr_mode``) as given.  Window sampling for step
    ``s`` is seeded by ``(config.seed, s)``.  ``callback(step, loss, grads)``
    sees the unclipped gradients of every step.
    """
    corpus = np.asarray(corpus)
    if corpus.size == 0:
        raise InputError("corpus is empty")
    corpus = check_tokens(corpus, params.config.vocab_size)
    if config.lambda_coh is not None:
        realign_config = replace(realign_config, lambda_coh=config.lambda_coh)
    history: list[LossBreakdown] = []
    total_steps = config.warmup_steps + config.finetune_steps
    for step in range(total_steps):
        warm = step < config.warmup_steps
        mode = "off" if warm else scr_mode
        rc = RealignConfig.disabled() if warm else realign_config
        windows = make_batch(corpus, config.seq_len, config.batch_size, seed=[config.seed, step])
        loss, grads = loss_and_gradients(params, windows, rc, mode)
        if callback is not None:
            callback(step, loss, grads)
        if config.clip_norm is not None:
            grads = clip_gradients(grads, config.clip_norm)
        params = sgd_step(params, grads, config.learning_rate)
        history.append(loss)
        if step % 50 == 0:
            log.debug("step %d ce=%.4f total=%.4f", step, loss.cross_entropy, loss.total)
    return params, history


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_history_csv(history: Sequence[LossBreakdown], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "cross_entropy", "coherence_total", "total"])
        for step, lb in enumerate(history):
            w.writerow([step, repr(lb.cross_entropy), repr(lb.coherence_total), repr(lb.total)])
    return path
