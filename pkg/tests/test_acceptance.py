"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""
import time

import numpy as np
import pytest

import oracles
from conftest import random_batch, record_criterion, relu_margin
from scrlm.data import build_vocab, synth_pattern_corpus
from scrlm.decoding import DecodingConfig, generate
from scrlm.harness import (EXPERIMENTS, ExperimentConfig, experiment_vocab, run_experiment,
                           training_text)
from scrlm.metrics import (DEFAULT_POSITION_GROUPS, attention_head_deviation, clip_groups, entropy,
                           head_deviation, perplexity, positional_stability, profile_inference,
                           semantic_drift)
from scrlm.model import LanguageModel, ModelConfig, forward, init_params
from scrlm.scr import (GateParams, RealignConfig, coherence_loss, contextual_reweight,
                       gate_activation, inference_refinement)
from scrlm.training import TrainConfig, finite_diff_check, smoothed, train


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_correctness():
    cfg = ModelConfig(vocab_size=11, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=8)
    params = init_params(cfg, sigma2=0.1, seed=0)
    batch = random_batch(np.random.default_rng(0), 11, 8, 2)
    rc = RealignConfig(activation_threshold=0, enabled_layers=None)
    margin = min(relu_margin(params, batch, on, rc) for on in (True, False))
    t0 = time.perf_counter()
    on = finite_diff_check(params, batch, rc, h=1e-5, tol=1e-4, scr_mode="on")
    off = finite_diff_check(params, batch, rc, h=1e-5, tol=1e-4, scr_mode="off")
    elapsed = time.perf_counter() - t0
    ok = on.passed and off.passed and elapsed < 60 and margin > 1e-3
    record_criterion(1, ok, f"max_rel_error on={on.max_rel_error:.2e} ({on.worst_tensor}) "
                            f"off={off.max_rel_error:.2e} ({off.worst_tensor}), "
                            f"{on.n_checked + off.n_checked} coords, {elapsed:.1f}s (tol 1e-4, <60s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_realignment_identities():
    rng = np.random.default_rng(2)
    n_cases, failures = 1200, []
    for case in range(n_cases):
        T, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        scale = float(rng.uniform(0.1, 3.0))
        H = rng.normal(size=(T, d)) * scale
        P = rng.normal(size=(T, d)) * scale
        if case % 4 == 0:  # exercise the zero-difference branch of the equivalence
            rows = rng.random(T) < 0.5
            H[rows] = P[rows]
        W = rng.normal(size=(d, d)) / np.sqrt(d)
        alpha = gate_activation(H, GateParams(W, float(rng.uniform(0, 1))))
        blend = contextual_reweight(alpha, H, P)
        if not np.all((alpha > 0) & (alpha < 1)):
            failures.append((case, "alpha range"))
        if not np.all((blend >= np.minimum(H, P)) & (blend <= np.maximum(H, P))):
            failures.append((case, "convexity"))
        if not np.array_equal(contextual_reweight(np.ones_like(H), H, P), H):
            failures.append((case, "alpha=1"))
        if not np.array_equal(contextual_reweight(np.zeros_like(H), H, P), P):
            failures.append((case, "alpha=0"))
        zero_loss = coherence_loss(blend, P) == 0.0
        zero_shift = not np.any(alpha * (H - P))
        if zero_loss != zero_shift:
            failures.append((case, "loss-zero equivalence"))
    ok = not failures
    record_criterion(2, ok, f"{n_cases} randomized tensor sets, {len(failures)} failures "
                            f"{failures[:3] if failures else ''}".rstrip())
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_threshold_semantics():
    rng = np.random.default_rng(3)
    checked, problems = 0, []
    for seed in range(30):
        cfg = ModelConfig(vocab_size=7, d_model=8, n_layers=int(rng.integers(1, 4)), n_heads=2,
                          d_ff=8, max_seq_len=24)
        params = init_params(cfg, sigma2=0.2, seed=seed)
        threshold = int(rng.integers(2, 20))
        rc = RealignConfig(activation_threshold=threshold)
        for T in (threshold - 1, threshold, threshold + 1):
            if not 1 <= T <= 24:
                continue
            toks = rng.integers(0, 7, T)
            on = forward(toks, params, "on", rc)
            off = forward(toks, params, "off", rc)
            same = np.array_equal(on.logits, off.logits) and all(
                np.array_equal(a, b) for a, b in zip(on.hidden, off.hidden))
            if (T < threshold) != same:
                problems.append((seed, threshold, T))
            checked += 1
    ok = not problems
    record_criterion(3, ok, f"{checked} (model, threshold, length) cases incl. boundary T=threshold, "
                            f"{len(problems)} mismatches")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_training_descent():
    text = synth_pattern_corpus("abc", 4000, seed=0, noise=0.01)
    vocab = build_vocab(text)
    tokens = vocab.encode(text)
    cfg = ModelConfig(vocab_size=vocab.size, d_model=64, n_layers=2, n_heads=4, d_ff=256,
                      max_seq_len=64)
    tcfg = TrainConfig(learning_rate=0.3, warmup_steps=100, finetune_steps=100, batch_size=8,
                       seq_len=32, seed=0)
    init = init_params(cfg, sigma2=0.02, seed=0)
    t0 = time.perf_counter()
    lines, ok = [], True
    for mode in ("off", "on"):
        warm_gate_grad = []

        def watch(step, loss, grads):
            if step < tcfg.warmup_steps:
                warm_gate_grad.append(max(float(np.abs(g.W_p).max()) for g in grads.scr_gates))

        params, hist = train(init, tokens, tcfg, RealignConfig(), scr_mode=mode, callback=watch)
        ce = smoothed([h.cross_entropy for h in hist])
        ratio = ce[-1] / ce[0]
        gates_zero = len(warm_gate_grad) == tcfg.warmup_steps and max(warm_gate_grad) == 0.0
        cont = vocab.decode(generate(vocab.encode("abca"), 10, params, mode, DecodingConfig()))[4:]
        ok &= ratio <= 0.5 and gates_zero
        lines.append(f"scr={mode}: smoothed CE {ce[0]:.3f}->{ce[-1]:.3f} (ratio {ratio:.3f} <= 0.5), "
                     f"warm-up W_p grads zero={gates_zero}, greedy 'abca'+'{cont}'")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    record_criterion(4, ok, "; ".join(lines) + f"; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_metric_trivial_points():
    checks = {}
    rng = np.random.default_rng(5)
    drift_first = []
    for seed in range(5):
        cfg = ModelConfig(vocab_size=9, d_model=8, n_layers=2, n_heads=2, d_ff=8, max_seq_len=64)
        model = LanguageModel(init_params(cfg, sigma2=0.3, seed=seed), ("on", "off")[seed % 2])
        for strategy in ("greedy", "top_k", "nucleus"):
            dec = DecodingConfig(strategy, k=3, p=0.9, seed=seed)
            drift_first.append(semantic_drift(model, rng.integers(0, 9, 4), 3, dec, 8)[0])
    checks["semantic_drift[1] == 0"] = all(v == 0.0 for v in drift_first)

    cfg = ModelConfig(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=8, max_seq_len=64)
    params = init_params(cfg, sigma2=0.3, seed=1)
    params.output_projection[...] = 0.0
    ppl = perplexity(LanguageModel(params, "on"), [rng.integers(0, 16, 40), rng.integers(0, 16, 9)])
    checks[f"uniform perplexity {ppl!r} == 16 +- 1e-9"] = abs(ppl - 16.0) <= 1e-9

    checks["one-hot entropy == 0"] = entropy(np.eye(7)[3]) == 0.0

    A = np.random.default_rng(0).dirichlet(np.ones(6), size=(2, 6))
    trace = forward(rng.integers(0, 16, 12), params, "on")
    trace.attention = [A, A.copy(), A.copy()]
    checks["identical attention deviation == 0"] = (attention_head_deviation(trace) == [0.0, 0.0]
                                                    and head_deviation(A, A) == 0.0)

    const = np.tile(rng.normal(size=(1, 8)), (8193, 1))
    checks["constant positions stability == 0"] = positional_stability(
        const, DEFAULT_POSITION_GROUPS) == [0.0] * 5

    ok = all(checks.values())
    record_criterion(5, ok, ", ".join(f"{k}: {'ok' if v else 'NO'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_metric_oracles():
    worst = {m: oracles.sweep(m, 100) for m in oracles.METRICS}
    ok = all(w <= 1e-9 for w in worst.values())
    record_criterion(6, ok, "100 cases each, max |diff| " +
                     ", ".join(f"{m}={w:.1e}" for m, w in worst.items()) + " (tol 1e-9)")
    assert ok


# ---------------------------------------------------------------- 7

def _expected_grid(cfg):
    g, max_len = cfg.grid, cfg.model["max_seq_len"]
    if cfg.experiment in ("consistency_vs_length", "perplexity", "latency_vs_length"):
        return [str(L) for L in g["lengths"] if L <= max_len]
    if cfg.experiment == "retention_vs_shifts":
        return [str(k) for k in range(1, 7)]
    if cfg.experiment == "drift_vs_iterations":
        return [str(i) for i in range(1, 7)]
    if cfg.experiment == "entropy_profile":
        return [repr(round(b / 10, 12)) for b in range(1, 11)]
    if cfg.experiment == "head_deviation":
        return [str(l) for l in range(2, cfg.model["n_layers"] + 1)]
    groups = clip_groups([tuple(x) for x in g["groups"]], max_len)
    return [f"{lo}-{hi}" for lo, hi in groups]


@pytest.mark.slow
def test_criterion_7_protocol_shapes(tmp_path):
    t0 = time.perf_counter()
    problems, shapes = [], []
    for rerun in ("a", "b"):
        cache = tmp_path / f"models_{rerun}"  # fresh cache per pass: the rerun retrains
        for kind in EXPERIMENTS:
            cfg = ExperimentConfig.from_dict({"experiment": kind, "grid": (
                {"repeats": 3} if kind == "latency_vs_length" else {})})
            res = run_experiment(cfg, tmp_path / rerun / kind, cache_dir=cache)
            if rerun == "b":
                continue
            expected = _expected_grid(cfg)
            for variant in ("baseline", "scr"):
                rows = (tmp_path / "a" / kind / f"{kind}__{variant}__seed0.csv").read_text().splitlines()
                grid = [r.split(",")[0] for r in rows[1:]]
                if grid != expected:
                    problems.append(f"{kind}/{variant} grid {grid} != {expected}")
            shapes.append(f"{kind}={len(expected)}")
            assert len(res["reports"]["scr"]) == 1
    for kind in EXPERIMENTS:
        for f in sorted((tmp_path / "a" / kind).glob("*.*")):
            other = tmp_path / "b" / kind / f.name
            if kind == "latency_vs_length" and f.suffix in (".csv", ".json", ".dat", ".md"):
                # wall-clock values differ run to run; the grid must not
                if f.suffix == ".csv":
                    ga = [r.split(",")[0] for r in f.read_text().splitlines()]
                    gb = [r.split(",")[0] for r in other.read_text().splitlines()]
                    if ga != gb:
                        problems.append(f"latency grid differs in {f.name}")
                continue
            if f.read_bytes() != other.read_bytes():
                problems.append(f"{kind}/{f.name} differs between reruns")
    elapsed = time.perf_counter() - t0
    ok = not problems
    record_criterion(7, ok, "grids " + " ".join(shapes) + f"; reruns byte-identical "
                            f"(latency: grid only); {elapsed:.0f}s" + (f"; {problems[:3]}" if problems else ""))
    assert ok


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_latency():
    cfg = ExperimentConfig.from_dict({"experiment": "latency_vs_length"})
    est = cfg.estimator("scr", 0).set_params(warmup_steps=0, finetune_steps=0)
    est.fit(training_text(cfg.corpus, 0), vocab=experiment_vocab())
    prof = profile_inference(est, [512, 1024, 2048], repeats=5)
    off, on = prof.reports["off"].values, prof.reports["on"].values
    overhead = prof.overhead[-1]
    ok = prof.reports["on"].grid == [512, 1024, 2048] and overhead <= 0.5
    record_criterion(8, ok, "median ms off/on " + ", ".join(
        f"{L}: {a:.1f}/{b:.1f}" for L, a, b in zip([512, 1024, 2048], off, on))
        + f"; overhead at 2048 = {100 * overhead:+.1f}% (<= 50%; reference ~+10%)")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_refinement_agreement():
    rng = np.random.default_rng(9)
    n_models, mismatches = 60, []
    for seed in range(n_models):
        n_layers = int(rng.integers(1, 5))
        n_heads = int(rng.choice([1, 2, 4]))
        cfg = ModelConfig(vocab_size=int(rng.integers(3, 20)), d_model=4 * n_heads * int(rng.integers(1, 3)),
                          n_layers=n_layers, n_heads=n_heads, d_ff=int(rng.integers(4, 24)),
                          max_seq_len=32, positional_mode=str(rng.choice(["learned", "sinusoidal"])))
        params = init_params(cfg, sigma2=float(rng.uniform(0.01, 0.5)), seed=seed,
                             gate_epsilon=float(rng.uniform(0, 0.5)))
        layers = None if rng.random() < 0.5 else set(rng.choice(n_layers, int(rng.integers(0, n_layers + 1)),
                                                              replace=False).tolist())
        rc = RealignConfig(activation_threshold=int(rng.integers(0, 24)), enabled_layers=layers)
        toks = rng.integers(0, cfg.vocab_size, int(rng.integers(1, 33)))
        refined = inference_refinement(forward(toks, params, "off", rc), params, rc)
        direct = forward(toks, params, "on", rc)
        same = (np.array_equal(refined.logits, direct.logits)
                and all(np.array_equal(a, b) for a, b in zip(refined.hidden, direct.hidden)))
        if not same:
            mismatches.append(seed)
    ok = not mismatches
    record_criterion(9, ok, f"{n_models} randomized models (thresholds, layer subsets, epsilon), "
                            f"{len(mismatches)} bitwise mismatches")
    assert ok
