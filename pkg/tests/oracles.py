"""Naive scalar-loop re-implementations of the metrics, used as test oracles."""
import math
from fractions import Fraction

import numpy as np

from scrlm.data import ShiftCorpus
from scrlm.decoding import DecodingConfig, generate
from scrlm.metrics import (attention_head_deviation, coherence_divergence, coherence_retention,
                           contextual_consistency, drift_from_embeddings, perplexity,
                           semantic_drift,
                           positional_stability as positional_stability_metric,
                           token_entropy_profile)
from scrlm.model import LanguageModel, ModelConfig, forward, init_params

METRICS = ("perplexity", "consistency", "retention", "divergence", "drift", "entropy",
           "head_deviation", "positional")


def cos(u, v):
    dot = nu = nv = 0.0
    for a, b in zip(u, v):
        dot += a * b
        nu += a * a
        nv += b * b
    if nu == 0 or nv == 0:
        return 0.0
    return dot / math.sqrt(nu * nv)


def pool(rows):
    d = len(rows[0])
    return [sum(r[j] for r in rows) / len(rows) for j in range(d)]


def segments(hidden, seg, lo, hi):
    out = []
    s = lo
    while s + seg <= hi:
        out.append(pool([list(hidden[i]) for i in range(s, s + seg)]))
        s += seg
    return out


def consistency(hidden, seg):
    vs = segments(hidden, seg, 0, len(hidden))
    sims = [max(0.0, cos(vs[i], vs[i + 1])) for i in range(len(vs) - 1)]
    return 100.0 * sum(sims) / len(sims)


def retention(hidden, spans, seg):
    scores = []
    for lo, hi in spans:
        vs = segments(hidden, seg, lo, hi)
        sims = [max(0.0, cos(vs[i], vs[i + 1])) for i in range(len(vs) - 1)]
        scores.append(100.0 * sum(sims) / len(sims))
    return sum(scores) / len(scores)


def divergence(hidden, early_frac, late_frac):
    T = len(hidden)
    ne, nl = int(early_frac * T), int(late_frac * T)
    return 1.0 - cos(pool([list(hidden[i]) for i in range(ne)]),
                     pool([list(hidden[i]) for i in range(T - nl, T)]))


def drift(vectors):
    return [100.0 * (1.0 - cos(v, vectors[0])) if i else 0.0 for i, v in enumerate(vectors)]


def log_softmax_row(row):
    m = max(row)
    z = sum(math.exp(x - m) for x in row)
    return [x - m - math.log(z) for x in row]


def naive_perplexity(logit_rows_per_seq, targets_per_seq):
    nll, n = 0.0, 0
    for rows, tgts in zip(logit_rows_per_seq, targets_per_seq):
        for row, t in zip(rows, tgts):
            nll -= log_softmax_row(list(row))[int(t)]
            n += 1
    return math.exp(nll / n)


def entropy_profile(logits, n_bins):
    T = len(logits)
    sums, counts = [0.0] * n_bins, [0] * n_bins
    for i, row in enumerate(logits):
        lp = log_softmax_row(list(row))
        h = -sum(math.exp(x) * x for x in lp)
        b = math.ceil(Fraction(n_bins * (i + 1), T)) - 1
        sums[b] += h
        counts[b] += 1
    return [s / c for s, c in zip(sums, counts)]


def head_deviation(A, B):
    total, n = 0.0, 0
    for h in range(len(A)):
        for i in range(len(A[h])):
            total += 0.5 * sum(abs(a - b) for a, b in zip(A[h][i], B[h][i]))
            n += 1
    return 100.0 * total / n


def positional_stability(E, groups):
    out = []
    for lo, hi in groups:
        norms = [math.sqrt(sum(x * x for x in E[i])) for i in range(lo, hi + 1)]
        mu = sum(norms) / len(norms)
        out.append(math.sqrt(sum((x - mu) ** 2 for x in norms) / len(norms)))
    return out


# ---------------------------------------------------------------- sweeps

def _case(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=int(rng.integers(4, 12)), d_model=8, n_layers=3, n_heads=2,
                      d_ff=16, max_seq_len=32)
    m = LanguageModel(init_params(cfg, sigma2=float(rng.uniform(0.01, 0.5)), seed=seed),
                      str(rng.choice(["on", "off"])))
    return rng, m


def sweep(metric, n_cases):
    """Largest |library - oracle| over ``n_cases`` random small models."""
    worst = 0.0
    for seed in range(n_cases):
        rng, m = _case(seed)
        V = m.config.vocab_size
        toks = rng.integers(0, V, int(rng.integers(16, 33)))
        hidden = forward(toks, m.params, m.scr_mode, m.realign_config).final_hidden
        if metric == "perplexity":
            seqs = [rng.integers(0, V, int(rng.integers(2, 33))) for _ in range(3)]
            got = perplexity(m, seqs)
            ref = naive_perplexity([forward(s[:-1], m.params, m.scr_mode).logits for s in seqs],
                                   [s[1:] for s in seqs])
            diffs = [abs(got - ref) / ref]
        elif metric == "consistency":
            seg = int(rng.integers(1, len(toks) // 2 + 1))
            diffs = [contextual_consistency(m, toks, seg) - consistency(hidden, seg)]
        elif metric == "retention":
            seg = int(rng.integers(1, 5))
            k = int(rng.integers(1, 3))
            span = len(toks) // (k + 1)
            if span < 2 * seg:
                seg = 1
            toks = toks[: span * (k + 1)]
            corpus = ShiftCorpus(toks, [span * (i + 1) for i in range(k)], list(range(k + 1)))
            hidden = forward(toks, m.params, m.scr_mode).final_hidden
            diffs = [coherence_retention(m, corpus, seg) - retention(hidden, corpus.spans, seg)]
        elif metric == "divergence":
            ef, lf = float(rng.uniform(0.07, 0.5)), float(rng.uniform(0.07, 0.5))
            diffs = [coherence_divergence(m, toks, ef, lf) - divergence(hidden, ef, lf)]
        elif metric == "drift":
            vecs = [rng.normal(size=6) for _ in range(int(rng.integers(1, 8)))]
            diffs = list(np.subtract(drift_from_embeddings(vecs), drift(vecs)))
            n_iter, seg = int(rng.integers(1, 4)), int(rng.integers(2, 6))
            dec = DecodingConfig(str(rng.choice(["greedy", "top_k", "nucleus"])), k=3, p=0.8,
                                 seed=int(rng.integers(2**32)))
            prompt = toks[:4]
            got = semantic_drift(m, prompt, n_iter, dec, seg)
            seq, pooled = prompt, []
            for i in range(n_iter):
                step = DecodingConfig(dec.strategy, dec.k, dec.p, dec.temperature, dec.seed + i)
                new_seq = generate(seq, seg, m.params, m.scr_mode, step, m.realign_config)
                h = forward(new_seq, m.params, m.scr_mode, m.realign_config).final_hidden
                pooled.append(pool([list(h[j]) for j in range(len(seq), len(new_seq))]))
                seq = new_seq
            diffs += list(np.subtract(got, drift(pooled)))
        elif metric == "entropy":
            n_bins = int(rng.integers(1, 11))
            logits = forward(toks, m.params, m.scr_mode).logits
            diffs = np.subtract(token_entropy_profile(m, toks, n_bins),
                                entropy_profile(logits, n_bins))
        elif metric == "head_deviation":
            trace = m.trace(toks)
            ref = [head_deviation(trace.attention[l - 1], trace.attention[l])
                   for l in range(1, 3)]
            diffs = np.subtract(attention_head_deviation(trace), ref)
        else:
            E = rng.normal(size=(32, 5)) * rng.uniform(0.1, 3)
            cuts = sorted(rng.choice(np.arange(1, 32), 3, replace=False))
            groups = [(0, cuts[0] - 1), (cuts[0], cuts[1] - 1), (cuts[1], cuts[2] - 1), (cuts[2], 31)]
            diffs = np.subtract(positional_stability_metric(E, groups), positional_stability(E, groups))
        worst = max(worst, float(np.max(np.abs(diffs))))
    return worst
