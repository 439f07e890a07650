"""Command-line entry point: ``odinlab <subcommand> [--config c.json] [--a.b=value ...]``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .evaluate import compare_fronts, pareto_front, write_pareto_csv
from .policy import PolicyParams
from .synthdata import CalibrationError, ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("odinlab")


class UsageError(Exception):
    pass


def _config(args) -> dict:
    overrides = list(args.overrides)
    if getattr(args, "out_dir", None):
        overrides.append(f"out_dir={args.out_dir}")
    return ex.load_config(args.config, overrides)


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    corpus, ccfg, stats = ex.build_corpus(cfg)
    out = Path(cfg["out_dir"]) / "data" / ex.data_key(cfg)
    _print({"corpus": str(out / "corpus.jsonl"), "stats": str(out / "stats.json"),
            "n_pairs": stats["n_pairs"], "chosen_longer_fraction": stats["chosen_longer_fraction"],
            "length_bias": stats["length_bias"]})
    return EXIT_OK


def cmd_train_rm(args) -> int:
    cfg = _config(args)
    out = Path(cfg["out_dir"]) / "data" / ex.data_key(cfg) / "stats.json"
    if args.require_corpus and not out.exists():
        raise FileNotFoundError(f"corpus not found ({out}); run gen-data first")
    _, report = ex.train_reward_model(cfg, args.mode)
    report["checkpoint"] = str(Path(cfg["out_dir"]) / "rm" / f"{args.mode}-{ex.rm_key(cfg, args.mode)}" / "rm.json")
    _print(report)
    return EXIT_OK


def cmd_train_rl(args) -> int:
    over = list(args.overrides)
    if args.algo:
        over.append(f"rl.algo={args.algo}")
    if args.head:
        over.append(f"rl.head={args.head}")
    if args.rm:
        over.append(f"rl.rm={args.rm}")
    args.overrides = over
    cfg = _config(args)
    if args.rm_checkpoint is not None and not Path(args.rm_checkpoint).exists():
        raise FileNotFoundError(f"reward model checkpoint not found: {args.rm_checkpoint}")
    rec = ex.run_rl(cfg, rm_checkpoint=args.rm_checkpoint)
    _print(rec.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    for p in (args.policy, args.sft):
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"policy checkpoint not found: {p}")
    policy = PolicyParams.load(args.policy)
    sft = PolicyParams.load(args.sft) if args.sft else ex.train_sft(cfg)
    rep = ex.evaluate_policy(cfg, policy, sft)
    d = rep.to_json()
    d.pop("verdicts")
    if args.output:
        ex.write_json(args.output, rep.to_json())
    if args.aggregate:
        ex.append_aggregate(args.aggregate, [{"method": args.method, "length": rep.mean_length,
                                              "win_score": rep.win_score, "true_quality": rep.mean_true_quality,
                                              "run_id": args.run_id, "checkpoint": args.checkpoint}])
    _print(d)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = ex.SweepSpec.from_json(args.spec)
    if args.dry_run:
        _print({"name": spec.name, "n_cells": spec.size()})
        return EXIT_OK
    base = _config(args)
    print(f"sweep {spec.name}: {spec.size()} cells", file=sys.stderr)
    summary = ex.run_sweep(spec, base, plot=not args.no_plot)
    _print({k: summary[k] for k in ("name", "n_cells", "n_failed", "sft_length")})
    return EXIT_OK if summary["n_failed"] == 0 else EXIT_RUNTIME


def cmd_pareto(args) -> int:
    rows = ex.read_aggregate(args.aggregate)
    groups = ex.points_by_method(rows)
    out = Path(args.out or Path(args.aggregate).parent)
    out.mkdir(parents=True, exist_ok=True)
    fronts = {m: pareto_front(p) for m, p in groups.items()}
    for m, f in fronts.items():
        write_pareto_csv(out / f"pareto_{m}.csv", f)
    result = {"fronts": {m: [[p.mean_length, p.win_score] for p in f] for m, f in fronts.items()}}
    if args.compare:
        a, b = args.compare
        if a not in groups or b not in groups:
            raise UsageError(f"--compare methods must be among {sorted(groups)}")
        if args.l_sft is None or args.t_max is None:
            raise UsageError("--compare needs --l-sft and --t-max")
        bins = ex.length_bins(args.l_sft, args.t_max)
        fin = lambda v: None if v == float("-inf") else v  # noqa: E731  (empty bin -> null, keeps JSON strict)
        result["comparison"] = [{"bin": e, a: fin(va), b: fin(vb)}
                                for e, va, vb in compare_fronts(groups[a], groups[b], bins)]
    _print(result)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_fronts
    rows = ex.read_aggregate(args.aggregate)
    plot_fronts(ex.points_by_method(rows), args.output, l_sft=args.l_sft)
    print(args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odinlab", description="Length-disentangled reward models and RLHF at toy scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
        sp.add_argument("--out-dir", help="artifact root (same as --out_dir=...)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="generate and calibrate the preference corpus"))
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("train-rm", help="train a baseline or ODIN reward model"))
    sp.add_argument("--mode", choices=sorted(ex.RM_MODES), default="odin")
    sp.add_argument("--require-corpus", action="store_true", help="fail instead of generating a missing corpus")
    sp.set_defaults(func=cmd_train_rm)

    sp = with_config(sub.add_parser("train-rl", help="PPO or ReMax against a reward model"))
    sp.add_argument("--algo", choices=["ppo", "remax"])
    sp.add_argument("--head", choices=["full", "quality"])
    sp.add_argument("--rm", choices=sorted(ex.RM_MODES), help="which reward model to train or load from cache")
    sp.add_argument("--rm-checkpoint", help="use this RM checkpoint instead of the cached one")
    sp.set_defaults(func=cmd_train_rl)

    sp = with_config(sub.add_parser("eval", help="judge a policy against the SFT policy"))
    sp.add_argument("--policy", required=True)
    sp.add_argument("--sft", help="baseline policy (default: the config's SFT policy)")
    sp.add_argument("--output", help="write the full EvalReport JSON here")
    sp.add_argument("--aggregate", help="append a Pareto point to this aggregate CSV")
    sp.add_argument("--method", default="default")
    sp.add_argument("--run-id", default="")
    sp.add_argument("--checkpoint", default="")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("sweep", help="run a resumable grid of RL runs"))
    sp.add_argument("spec", help="sweep spec JSON")
    sp.add_argument("--dry-run", action="store_true", help="only report the number of cells")
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("pareto", help="Pareto fronts from an aggregate CSV")
    sp.add_argument("aggregate")
    sp.add_argument("--out")
    sp.add_argument("--compare", nargs=2, metavar=("OURS", "THEIRS"))
    sp.add_argument("--l-sft", type=float)
    sp.add_argument("--t-max", type=int)
    sp.set_defaults(func=cmd_pareto, overrides=[])

    sp = sub.add_parser("plot", help="SVG scatter-plus-front plot from an aggregate CSV")
    sp.add_argument("aggregate")
    sp.add_argument("-o", "--output", default="pareto.svg")
    sp.add_argument("--l-sft", type=float)
    sp.set_defaults(func=cmd_plot, overrides=[])
    return p


def split_overrides(argv):
    """Separate ``--a.b=value`` overrides (dotted keys) from regular flags."""
    flags, overrides = [], []
    for a in argv:
        if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]:
            overrides.append(a[2:])
        elif a.startswith("--") and "=" in a and a[2:].split("=", 1)[0] in ex.DEFAULT_CONFIG:
            overrides.append(a[2:])
        else:
            flags.append(a)
    return flags, overrides


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    flags, overrides = split_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(flags)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    if not hasattr(args, "overrides") or args.func not in (cmd_pareto, cmd_plot):
        args.overrides = overrides
    elif overrides:
        print(f"error: {args.command} takes no config overrides", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
