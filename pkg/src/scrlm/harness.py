"""Baseline-vs-realignment experiment runs, report files, and summaries.

A run trains two models per seed from the same initialization (``baseline``
never realigns, ``scr`` realigns after warm-up), evaluates one metric over its
grid for both, and writes::

    <out>/<experiment>__<variant>__seed<seed>.csv   grid column, value column
    <out>/<experiment>__<variant>__seed<seed>.json  full report with metadata
    <out>/<experiment>.dat                          plot series
    <out>/summary.md                                side-by-side table
    <out>/manifest.json                             config, hash, versions, files
    <out>/models/*.npz                              cached trained weights
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
import yaml

from . import __version__, metrics
from .data import TOPIC_SYMBOLS, build_vocab, synth_shift_corpus
from .decoding import DecodingConfig, generate
from .estimator import SCRLanguageModel
from .exceptions import ConfigError, DataError
from .metrics import MetricReport

log = logging.getLogger(__name__)

EXPERIMENTS = ("consistency_vs_length", "retention_vs_shifts", "latency_vs_length",
               "drift_vs_iterations", "entropy_profile", "head_deviation",
               "positional_stability", "perplexity")
VARIANTS = ("baseline", "scr")
HELDOUT_OFFSET = 10_000

DEFAULTS = {
    "seeds": [0],
    "output_dir": None,
    "model": {"d_model": 32, "n_layers": 3, "n_heads": 2, "d_ff": 64, "max_seq_len": 4096,
              "positional_mode": "sinusoidal", "sigma2": 0.02},
    "train": {"learning_rate": 0.3, "warmup_steps": 100, "finetune_steps": 100,
              "batch_size": 8, "seq_len": 64, "clip_norm": 1.0},
    # L_coh sums over tokens and features, so at seq_len 64 it starts near 1e3;
    # the library default of 0.1 would swamp cross-entropy here.
    "realign": {"activation_threshold": 0, "lambda_coh": 1e-3, "enabled_layers": None,
                "detach_target": True, "gate_epsilon": 0.0},
    "decoding": {"strategy": "nucleus", "k": 1, "p": 0.9, "temperature": 1.0, "seed": 0},
    "corpus": {"topics": 8, "span_len": 400, "noise": 0.05},
}

GRID_DEFAULTS = {
    "consistency_vs_length": {"lengths": [512, 1024, 2048, 4096], "segment_len": 64, "span_len": 512},
    "retention_vs_shifts": {"shifts": [1, 2, 3, 4, 5, 6], "segment_len": 32, "span_len": 256},
    "latency_vs_length": {"lengths": [512, 1024, 2048, 4096], "repeats": 5},
    "drift_vs_iterations": {"iterations": 6, "prompt_len": 32, "segment_len": 32},
    "entropy_profile": {"n_bins": 10, "prompt_len": 16, "length": 256},
    "head_deviation": {"length": 256},
    "positional_stability": {"groups": [list(g) for g in metrics.DEFAULT_POSITION_GROUPS]},
    "perplexity": {"lengths": [512, 1024, 2048, 4096], "span_len": 512},
}


def _schema() -> dict:
    return json.loads(resources.files("scrlm").joinpath("schema/experiment.schema.json").read_text())


@dataclass
class ExperimentConfig:
    """Declarative description of one run; build with :meth:`from_dict`."""

    experiment: str
    seeds: list[int]
    output_dir: str | None
    model: dict
    train: dict
    realign: dict
    decoding: dict
    corpus: dict
    grid: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, _schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        merged = copy.deepcopy(DEFAULTS)
        for key, value in raw.items():
            if isinstance(merged.get(key), dict):
                merged[key].update(value)
            elif key != "grid":
                merged[key] = value
        kind = raw["experiment"]
        grid = copy.deepcopy(GRID_DEFAULTS[kind])
        grid.update(raw.get("grid", {}))
        cfg = cls(grid=grid, **{k: merged[k] for k in
                                ("experiment", "seeds", "output_dir", "model", "train",
                                 "realign", "decoding", "corpus")})
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} does not hold a mapping")
        return cls.from_dict(raw)

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        max_len = self.model["max_seq_len"]
        for key in ("lengths", "shifts"):
            if key in self.grid and not self.grid[key]:
                raise ConfigError(f"grid.{key} is empty")
        if "lengths" in self.grid and not any(L <= max_len for L in self.grid["lengths"]):
            raise ConfigError(f"no grid length fits max_seq_len={max_len}")
        if self.train["seq_len"] >= self.corpus["topics"] * self.corpus["span_len"]:
            raise ConfigError("training corpus shorter than one window")
        # construct once so bad values fail before any training
        est = self.estimator("scr", self.seeds[0])
        est._model_config(experiment_vocab().size)
        est.realign_config()
        est.train_config()
        DecodingConfig(**self.decoding)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seeds": list(self.seeds),
                "output_dir": self.output_dir, "model": self.model, "train": self.train,
                "realign": self.realign, "decoding": self.decoding, "corpus": self.corpus,
                "grid": self.grid}

    def config_hash(self) -> str:
        return _hash(self.to_dict())

    def estimator(self, variant: str, seed: int) -> SCRLanguageModel:
        return SCRLanguageModel(**self.model, **self.train, **self.realign,
                                scr="on" if variant == "scr" else "off", random_state=seed)

    def model_key(self, variant: str, seed: int) -> str:
        return _hash({"model": self.model, "train": self.train, "realign": self.realign,
                      "corpus": self.corpus, "variant": variant, "seed": seed})[:16]


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def experiment_vocab():
    return build_vocab(TOPIC_SYMBOLS)


def training_text(corpus: dict, seed: int) -> str:
    return synth_shift_corpus(corpus["topics"] - 1, corpus["span_len"], seed=seed,
                              noise=corpus["noise"]).text


def heldout_text(length: int, span_len: int, seed: int, noise: float) -> str:
    """Multi-topic text of ``length`` characters from a held-out seed."""
    n_spans = max(1, -(-length // span_len))
    text = synth_shift_corpus(n_spans - 1, span_len, seed=seed + HELDOUT_OFFSET, noise=noise).text
    return text[:length]


def fit_variant(config: ExperimentConfig, variant: str, seed: int,
                cache_dir: Path | None = None) -> SCRLanguageModel:
    """Train (or load from ``cache_dir``) one variant for one seed."""
    path = None
    if cache_dir is not None:
        path = cache_dir / f"{variant}__seed{seed}__{config.model_key(variant, seed)}.npz"
        if path.exists():
            return SCRLanguageModel.load(path)
    est = config.estimator(variant, seed)
    est.fit(training_text(config.corpus, seed), vocab=experiment_vocab())
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        est.save(path)
    return est


def evaluate(config: ExperimentConfig, est: SCRLanguageModel, variant: str,
             seed: int) -> MetricReport:
    """Evaluate the configured metric for one trained variant."""
    g = config.grid
    kind = config.experiment
    max_len = est.params_.config.max_seq_len
    noise = config.corpus["noise"]
    meta = {"seed": seed, "model_id": f"{variant}-{config.model_key(variant, seed)}",
            "config_hash": config.config_hash()}

    def report(grid_name, grid, values):
        return MetricReport(kind, grid_name, list(grid), [float(v) for v in values], variant, meta)

    if kind == "consistency_vs_length":
        lengths = [L for L in g["lengths"] if L <= max_len]
        vals = [metrics.contextual_consistency(est, heldout_text(L, g["span_len"], seed, noise),
                                               g["segment_len"]) for L in lengths]
        return report("seq_len", lengths, vals)
    if kind == "perplexity":
        lengths = [L for L in g["lengths"] if L <= max_len]
        vals = [metrics.perplexity(est, heldout_text(L, g["span_len"], seed, noise))
                for L in lengths]
        return report("seq_len", lengths, vals)
    if kind == "retention_vs_shifts":
        vals = []
        for k in g["shifts"]:
            corpus = synth_shift_corpus(k, g["span_len"], seed=seed + HELDOUT_OFFSET + k,
                                        segment_len=g["segment_len"], noise=noise)
            vals.append(metrics.coherence_retention(est, corpus, g["segment_len"]))
        return report("shifts", g["shifts"], vals)
    if kind == "latency_vs_length":
        lengths = [L for L in g["lengths"] if L <= max_len]
        prof = metrics.profile_inference(est, lengths, g["repeats"], seed=seed)
        rep = prof.reports["on" if variant == "scr" else "off"]
        meta = dict(meta, memory_bytes=prof.memory_bytes["on" if variant == "scr" else "off"])
        return MetricReport(kind, "seq_len", lengths, rep.values, variant, meta)
    decoding = DecodingConfig(**config.decoding)
    if kind == "drift_vs_iterations":
        prompt = heldout_text(g["prompt_len"], g["prompt_len"], seed, noise)
        vals = metrics.semantic_drift(est, prompt, g["iterations"], decoding, g["segment_len"])
        return report("iteration", range(1, g["iterations"] + 1), vals)
    if kind == "entropy_profile":
        prompt = est.encode(heldout_text(g["prompt_len"], g["prompt_len"], seed, noise))
        seq = generate(prompt, g["length"] - len(prompt), est.params_, est.scr, decoding,
                       est.realign_config())
        vals = metrics.token_entropy_profile(est, seq, g["n_bins"])
        grid = [round((b + 1) / g["n_bins"], 12) for b in range(g["n_bins"])]
        return report("position", grid, vals)
    if kind == "head_deviation":
        tokens = est.encode(heldout_text(g["length"], g["length"], seed, noise))
        vals = metrics.attention_head_deviation(est.trace(tokens, keep_attention=True))
        return report("layer", range(2, len(vals) + 2), vals)
    if kind == "positional_stability":
        groups = metrics.clip_groups([tuple(x) for x in g["groups"]], max_len)
        if not groups:
            raise ConfigError("no position group fits max_seq_len")
        emb = metrics.recalibrated_positions(est, groups[-1][1] + 1)
        vals = metrics.positional_stability(emb, groups)
        return report("position_group", [f"{lo}-{hi}" for lo, hi in groups], vals)
    raise ConfigError(f"unknown experiment {kind!r}")


def run_experiment(config: ExperimentConfig, output_dir=None, cache_dir=None) -> dict:
    """Run every (seed, variant) cell and write reports, plot data, summary and manifest.

    Trained weights are cached in ``cache_dir`` (default ``<out>/models``);
    the cache key ignores the experiment kind, so kinds sharing model and
    training settings can share one cache.
    """
    out = Path(output_dir or config.output_dir or "runs/" + config.experiment)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    reports: dict[str, list[MetricReport]] = {v: [] for v in VARIANTS}
    files = []
    for seed in config.seeds:
        for variant in VARIANTS:
            est = fit_variant(config, variant, seed,
                              Path(cache_dir) if cache_dir else out / "models")
            rep = evaluate(config, est, variant, seed)
            reports[variant].append(rep)
            files.append(rep.to_csv(out / f"{rep.stem}.csv").name)
            files.append(rep.to_json(out / f"{rep.stem}.json").name)
            log.info("%s seed=%d %s: %s", config.experiment, seed, variant, rep.values)
    all_reports = reports["baseline"] + reports["scr"]
    files.append(emit_plotdata(all_reports, out / f"{config.experiment}.dat").name)
    summary = compare_summary(reports["baseline"], reports["scr"])
    (out / "summary.md").write_text(summary)
    files.append("summary.md")
    manifest = {
        "experiment": config.experiment,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": list(config.seeds),
        "versions": {"scrlm": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "files": sorted(files),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"output_dir": out, "reports": reports, "manifest": manifest}


def _check_grids(reports: Sequence[MetricReport]) -> None:
    if not reports:
        raise DataError("no reports")
    grid = [metrics._fmt(x) for x in reports[0].grid]
    for r in reports[1:]:
        if [metrics._fmt(x) for x in r.grid] != grid:
            raise DataError(f"grid mismatch between {reports[0].stem} and {r.stem}")


def emit_plotdata(reports: Sequence[MetricReport], path) -> Path:
    """Whitespace-delimited x/y blocks, one per report, separated by blank lines.

    Values are formatted exactly as in the CSV files.
    """
    _check_grids(reports)
    path = Path(path)
    lines = [f"# {reports[0].name}: {reports[0].grid_name} value"]
    for r in reports:
        lines.append("")
        lines.append("")
        seed = r.metadata.get("seed")
        lines.append(f"# series {r.variant}" + ("" if seed is None else f" seed={seed}"))
        lines.extend(f"{metrics._fmt(x)} {metrics._fmt(y)}" for x, y in zip(r.grid, r.values))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_plotdata(path) -> list[tuple[str, list[str], list[str]]]:
    """Parse a file written by :func:`emit_plotdata` into ``(label, xs, ys)`` blocks."""
    blocks = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# series "):
            blocks.append((line[len("# series "):], [], []))
        elif line and not line.startswith("#"):
            x, y = line.split()
            blocks[-1][1].append(x)
            blocks[-1][2].append(y)
    return blocks


def compare_summary(baseline: Sequence[MetricReport], scr: Sequence[MetricReport]) -> str:
    """Markdown table of seed-averaged values with per-point and mean deltas."""
    _check_grids(list(baseline) + list(scr))
    b = np.mean([r.values for r in baseline], axis=0)
    s = np.mean([r.values for r in scr], axis=0)
    delta = s - b
    first = baseline[0]
    lines = [f"## {first.name}", "",
             f"seeds: baseline={len(baseline)}, scr={len(scr)}", "",
             f"| {first.grid_name} | baseline | scr | delta |",
             "|---|---|---|---|"]
    for x, bv, sv, dv in zip(first.grid, b, s, delta):
        lines.append(f"| {metrics._fmt(x)} | {bv:.6g} | {sv:.6g} | {dv:+.6g} |")
    lines += ["", f"mean delta: {float(np.mean(delta)):+.6g}", ""]
    return "\n".join(lines)


def summary_from_dir(run_dir) -> str:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    groups = {v: [MetricReport.from_json(run_dir / f)
                  for f in manifest["files"] if f.endswith(".json") and f"__{v}__" in f]
              for v in VARIANTS}
    return compare_summary(groups["baseline"], groups["scr"])
