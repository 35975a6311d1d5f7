"""Command-line entry point: ``scrlm {train,eval,experiment,compare,profile}``.

Every failure ends with one line on stderr, ``error: <category>: <message>``,
and a nonzero exit status (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, metrics
from .exceptions import ConfigError, SCRError
from .harness import (EXPERIMENTS, ExperimentConfig, evaluate, experiment_vocab, fit_variant,
                      run_experiment, summary_from_dir, training_text)
from .estimator import SCRLanguageModel
from .training import write_history_csv

log = logging.getLogger("scrlm")

U64_MAX = 2**64 - 1


class UsageError(Exception):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _u64(text: str) -> int:
    try:
        value = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2**64 - 1], got {value}")
    return value


def _load_config(args, default_kind: str = "perplexity") -> ExperimentConfig:
    if args.config is None:
        raw = {"experiment": default_kind}
    else:
        cfg = ExperimentConfig.from_yaml(args.config)
        raw = cfg.to_dict()
        if raw.get("output_dir") is None:
            del raw["output_dir"]
    if getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed]
    return ExperimentConfig.from_dict(raw)


def _variant(scr: str) -> str:
    return "scr" if scr == "on" else "baseline"


def _out_dir(args, fallback: str) -> Path:
    out = Path(args.out or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, obj) -> None:
    if not args.quiet:
        print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------- verbs

def cmd_train(args) -> None:
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    out = _out_dir(args, f"runs/train__{_variant(args.scr)}__seed{seed}")
    if args.corpus:
        text = Path(args.corpus).read_text(encoding="utf-8")
        est = cfg.estimator(_variant(args.scr), seed).fit(text)
    else:
        est = fit_variant(cfg, _variant(args.scr), seed)
    est.save(out / "model.npz")
    write_history_csv(est.history_, out / "loss_history.csv")
    summary = {"checkpoint": str(out / "model.npz"), "scr": args.scr, "seed": seed,
               "steps": len(est.history_),
               "initial_cross_entropy": est.history_[0].cross_entropy if est.history_ else None,
               "final_cross_entropy": est.history_[-1].cross_entropy if est.history_ else None}
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(args, summary)


def cmd_eval(args) -> None:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    est = SCRLanguageModel.load(args.checkpoint)
    if args.scr is not None:
        est.set_params(scr=args.scr)
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    rep = evaluate(cfg, est, _variant(est.scr), seed)
    out = _out_dir(args, "runs/eval")
    rep.to_csv(out / f"{rep.stem}.csv")
    rep.to_json(out / f"{rep.stem}.json")
    _emit(args, rep.to_dict())


def cmd_experiment(args) -> None:
    if args.config is None:
        raise ConfigError("experiment needs --config")
    cfg = _load_config(args)
    result = run_experiment(cfg, args.out)
    if not args.quiet:
        print((Path(result["output_dir"]) / "summary.md").read_text(), end="")


def cmd_compare(args) -> None:
    text = summary_from_dir(args.run_dir)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    if not args.quiet:
        print(text, end="")


def cmd_profile(args) -> None:
    cfg = _load_config(args, "latency_vs_length")
    seed = cfg.seeds[0]
    if args.checkpoint:
        est = SCRLanguageModel.load(args.checkpoint)
    else:
        # latency does not depend on trained values; skip training
        est = cfg.estimator("scr", seed).set_params(warmup_steps=0, finetune_steps=0)
        est.fit(training_text(cfg.corpus, seed), vocab=experiment_vocab())
    if args.scr is not None:
        est.set_params(scr=args.scr)
    lengths = args.lengths or cfg.grid.get("lengths", [512, 1024, 2048])
    repeats = args.repeats or cfg.grid.get("repeats", 5)
    max_len = est.params_.config.max_seq_len
    prof = metrics.profile_inference(est, [L for L in lengths if L <= max_len], repeats, seed)
    out = _out_dir(args, "runs/profile")
    for rep in prof.reports.values():
        rep.metadata["memory_bytes"] = prof.memory_bytes[rep.variant]
        rep.to_csv(out / f"{rep.stem}.csv")
        rep.to_json(out / f"{rep.stem}.json")
    summary = {"seq_len": prof.reports["on"].grid, "off_ms": prof.reports["off"].values,
               "on_ms": prof.reports["on"].values, "overhead": prof.overhead,
               "memory_bytes": prof.memory_bytes}
    (out / "profile.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(args, summary)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=_u64, help="override the config's seeds with one seed")
    common.add_argument("--out", help="output directory (file for compare)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    scr = argparse.ArgumentParser(add_help=False)
    scr.add_argument("--scr", choices=("on", "off"), help="realignment at train/inference")

    parser = _Parser(prog="scrlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"scrlm {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common, scr], help="train one model variant")
    p.add_argument("--corpus", help="UTF-8 text file to train on (default: synthetic corpus)")
    p.set_defaults(func=cmd_train, scr="on")

    p = sub.add_parser("eval", parents=[common, scr], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="model .npz written by train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[common],
                       help=f"baseline vs realignment sweep ({', '.join(EXPERIMENTS)})")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", parents=[common], help="summary table of an experiment run")
    p.add_argument("run_dir", help="directory written by `experiment`")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("profile", parents=[common, scr], help="inference latency, off vs on")
    p.add_argument("--checkpoint", help="model .npz (default: untrained config model)")
    p.add_argument("--lengths", type=int, nargs="+", help="sequence lengths")
    p.add_argument("--repeats", type=int, help="timed passes per length (>= 3)")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SCRError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
