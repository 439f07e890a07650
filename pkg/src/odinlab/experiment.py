"""Config-driven pipeline: corpus -> reward models -> SFT -> RL runs -> judge.

Every stage writes its artifacts under ``out_dir`` in a directory named by a
hash of the config that produced it, so reruns reuse finished work and a
sweep can be interrupted and resumed.  All randomness flows from the single
top-level ``seed`` through named sub-streams (data / rm / sft / rl / eval).
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import tempfile
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .evaluate import EvalReport, JudgeConfig, ParetoPoint, eval_policy, pareto_front
from .policy import PolicyParams, bc_pretrain, greedy_response
from .rl import RewardModel, RLConfig, save_checkpoints, train_rl
from .rm import (SINGLE, TWO_HEAD, PairBatch, RMHyper, RMParams, default_head, rm_length_report,
                 rm_validation_accuracy, split_train_val, train_rm)
from .synthdata import (ConfigError, CorpusConfig, DemoSampler, calibrate_length_bias, corpus_stats,
                        gen_demonstrations, gen_preference_corpus, gen_prompts, read_corpus, write_corpus)

log = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ("method", "length", "win_score", "true_quality", "run_id", "checkpoint")
AGGREGATE_VERSION = 1
RM_MODES = {"baseline": SINGLE, "odin": TWO_HEAD}

# Prompt id ranges per use, so held-out sets never overlap the corpus.
RL_PROMPT_OFFSET = 1_000_000
EVAL_PROMPT_OFFSET = 2_000_000
SFT_PROMPT_OFFSET = 3_000_000
DEV_PROMPT_OFFSET = 4_000_000

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "odin_runs",
    "data": {
        "n_pairs": 20000,
        # calibrate the annotator length bias on its own corpus when null
        "length_bias": None,
        "target_fraction": 0.66,
        "calibration_pairs": 5000,
        "corpus": {},
    },
    "rm": {
        "lambda_l": 1.0, "lambda_o": 1.0, "lr": 1e-2, "batch_size": 64, "epochs": 30,
        "hidden": 16, "val_fraction": 0.1, "train_gains": False,
    },
    "sft": {
        "n_prompts": 400, "epochs": 30, "lr": 0.05, "batch_size": 64,
        "demonstrator": {"p_skip": 0.15},
    },
    "rl": {
        "rm": "odin", "head": "quality", "n_prompts": 1000, "n_dev_prompts": 64,
        "algo": "ppo", "beta": 0.005, "eps": 0.2, "clip": None, "alpha": 0.0,
        "n_rollouts": 64, "minibatch": 32, "inner_epochs": 1, "iterations": 150,
        "lr": 3e-3, "seed": 0,
    },
    "eval": {"n_prompts": 300, "length_bias": 0.0, "position_bias": 0.0, "tie_margin": 0.02,
             "noise_std": 0.0},
}


# -- config handling ---------------------------------------------------------

def parse_value(text: str) -> Any:
    """JSON literal if it parses (numbers, true, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            if p in node:
                raise ConfigError(f"cannot override below non-section key {p!r} in {key!r}")
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def get_dotted(cfg: dict, key: str, default=None):
    node = cfg
    for p in key.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    """``overrides``: mapping of dotted keys, or ``["a.b=1", ...]`` strings."""
    cfg = copy.deepcopy(cfg)
    if isinstance(overrides, dict):
        items = overrides.items()
    else:
        items = []
        for s in overrides:
            s = s[2:] if s.startswith("--") else s
            if "=" not in s:
                raise ConfigError(f"override {s!r} is not of the form key=value")
            k, v = s.split("=", 1)
            items.append((k, parse_value(v)))
    for k, v in items:
        set_dotted(cfg, k, v)
    return cfg


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = deep_merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> dict:
    _check_keys(cfg, DEFAULT_CONFIG, "config")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    _check_keys(cfg["data"], DEFAULT_CONFIG["data"], "data")
    corpus_config(cfg, n_pairs=1)
    _check_keys(cfg["rm"], DEFAULT_CONFIG["rm"], "rm")
    _check_keys(cfg["sft"], DEFAULT_CONFIG["sft"], "sft")
    try:
        DemoSampler(**cfg["sft"]["demonstrator"])
    except TypeError as e:
        raise ConfigError(f"sft.demonstrator: {e}") from e
    rl = cfg["rl"]
    extra = {"rm", "head", "n_prompts", "n_dev_prompts"}
    _check_keys(rl, {f.name for f in fields(RLConfig)} | extra, "rl")
    if rl["rm"] not in RM_MODES:
        raise ConfigError(f"rl.rm must be one of {sorted(RM_MODES)}")
    if rl["head"] not in ("full", "quality"):
        raise ConfigError("rl.head must be 'full' or 'quality'")
    if rl["head"] == "quality" and rl["rm"] != "odin":
        raise ConfigError("rl.head=quality needs rl.rm=odin (a two-head reward model)")
    rl_config(cfg)
    _check_keys(cfg["eval"], DEFAULT_CONFIG["eval"], "eval")
    judge_config(cfg)
    return cfg


def sub_seed(seed: int, name: str, *extra: int) -> int:
    """Deterministic child seed for a named pipeline stage."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra])
    return int(ss.generate_state(1)[0])


def config_hash(obj) -> str:
    """Hash of the canonical JSON form (sorted keys, no whitespace)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def corpus_config(cfg: dict, n_pairs=None, seed=None, length_bias=None) -> CorpusConfig:
    d = dict(cfg["data"]["corpus"])
    for k in ("n_pairs", "seed", "length_bias"):
        if k in d:
            raise ConfigError(f"data.corpus.{k} is set by the pipeline; use data.{k} or seed")
    d["n_pairs"] = cfg["data"]["n_pairs"] if n_pairs is None else n_pairs
    d["seed"] = sub_seed(cfg["seed"], "data") if seed is None else seed
    d["length_bias"] = 0.0 if length_bias is None else length_bias
    return CorpusConfig.from_dict(d)


def rl_config(cfg: dict) -> RLConfig:
    d = {k: v for k, v in cfg["rl"].items() if k not in ("rm", "head", "n_prompts", "n_dev_prompts")}
    d["seed"] = sub_seed(cfg["seed"], "rl", int(d.get("seed", 0)))
    try:
        return RLConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def judge_config(cfg: dict) -> JudgeConfig:
    d = {k: v for k, v in cfg["eval"].items() if k != "n_prompts"}
    c = corpus_config(cfg, n_pairs=1)
    try:
        return JudgeConfig(seed=sub_seed(cfg["seed"], "eval"), t_max=c.t_max, c_rep=c.c_rep, **d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def rm_hyper(cfg: dict) -> RMHyper:
    return RMHyper(seed=sub_seed(cfg["seed"], "rm") % (2 ** 31), **cfg["rm"])


# -- file helpers ------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# -- stages --------------------------------------------------------------------

def data_key(cfg: dict) -> str:
    return config_hash({"seed": cfg["seed"], "data": cfg["data"]})


def resolve_length_bias(cfg: dict) -> float:
    b = cfg["data"]["length_bias"]
    if b is not None:
        return float(b)
    calib = corpus_config(cfg, n_pairs=cfg["data"]["calibration_pairs"], seed=sub_seed(cfg["seed"], "calibration"))
    return calibrate_length_bias(calib, cfg["data"]["target_fraction"])


def build_corpus(cfg: dict, out_dir=None):
    """(corpus, CorpusConfig, stats); cached under ``out_dir/data/<key>``."""
    out = Path(out_dir or cfg["out_dir"]) / "data" / data_key(cfg)
    path = out / "corpus.jsonl"
    if (out / "stats.json").exists():
        stats = read_json(out / "stats.json")
        ccfg = corpus_config(cfg, length_bias=stats["length_bias"])
        return read_corpus(path, ccfg.vocab), ccfg, stats
    b = resolve_length_bias(cfg)
    ccfg = corpus_config(cfg, length_bias=b)
    corpus = gen_preference_corpus(ccfg)
    stats = corpus_stats(corpus, ccfg.t_max)
    stats["length_bias"] = b
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(path, corpus)
    write_json(out / "config.json", {"seed": cfg["seed"], "data": cfg["data"], "corpus": ccfg.to_dict()})
    write_json(out / "stats.json", stats)
    log.info("corpus: %d pairs, chosen-longer %.3f, b=%.3f", len(corpus), stats["chosen_longer_fraction"], b)
    return corpus, ccfg, stats


def rm_key(cfg: dict, mode_name: str) -> str:
    return config_hash({"data": data_key(cfg), "rm": cfg["rm"], "mode": mode_name})


def train_reward_model(cfg: dict, mode_name: str, out_dir=None):
    """(RMParams, report dict); cached under ``out_dir/rm/<mode>-<key>``."""
    if mode_name not in RM_MODES:
        raise ConfigError(f"unknown reward model mode {mode_name!r}")
    out = Path(out_dir or cfg["out_dir"]) / "rm" / f"{mode_name}-{rm_key(cfg, mode_name)}"
    if (out / "report.json").exists():
        return RMParams.load(out / "rm.json"), read_json(out / "report.json")
    corpus, ccfg, _ = build_corpus(cfg, out_dir)
    hyper = rm_hyper(cfg)
    batch = PairBatch.from_pairs(corpus, ccfg.t_max, ccfg.n_keywords)
    tr, va = split_train_val(len(batch), hyper.val_fraction, hyper.seed)
    val = batch.take(va)
    params, hist = train_rm(batch.take(tr), val, hyper, RM_MODES[mode_name])
    report = rm_report(params, val)
    report.update(mode=mode_name, best_epoch=hist.best_epoch)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "rm.json")
    hist.to_csv(out / "history.csv")
    write_json(out / "report.json", report)
    return params, report


def rm_report(params: RMParams, val: PairBatch) -> dict:
    """Validation accuracy, length correlations and balanced-subset accuracies."""
    head = default_head(params)
    rep = rm_length_report(params, val, head)
    cl = val.len_chosen > val.len_rejected
    rl = val.len_chosen < val.len_rejected
    return {"head": head, "val_acc": rm_validation_accuracy(params, val, head),
            "pearson": rep.pearson, "spearman": rep.spearman, "kendall": rep.kendall,
            "acc_chosen_longer": rm_validation_accuracy(params, val.take(cl), head),
            "acc_rejected_longer": rm_validation_accuracy(params, val.take(rl), head),
            "n_val": len(val)}


def sft_key(cfg: dict) -> str:
    shape = corpus_config(cfg, n_pairs=1)
    return config_hash({"seed": cfg["seed"], "sft": cfg["sft"],
                        "vocab": [shape.n_keywords, shape.n_filler, shape.t_max]})


def train_sft(cfg: dict, out_dir=None) -> PolicyParams:
    out = Path(out_dir or cfg["out_dir"]) / "sft" / sft_key(cfg)
    if (out / "sft.json").exists():
        return PolicyParams.load(out / "sft.json")
    s = cfg["sft"]
    pcfg = corpus_config(cfg, n_pairs=1, seed=sub_seed(cfg["seed"], "sft"))
    prompts = gen_prompts(pcfg, s["n_prompts"], offset=SFT_PROMPT_OFFSET)
    demos = gen_demonstrations(pcfg, prompts, DemoSampler(**s["demonstrator"]))
    sft, curve = bc_pretrain(demos, pcfg.vocab, epochs=s["epochs"], lr=s["lr"], batch_size=s["batch_size"],
                             seed=sub_seed(cfg["seed"], "sft") % (2 ** 31))
    out.mkdir(parents=True, exist_ok=True)
    sft.save(out / "sft.json")
    write_json(out / "curve.json", {"demo_nll": [float(x) for x in curve]})
    return sft


def prompt_sets(cfg: dict) -> dict:
    pcfg = corpus_config(cfg, n_pairs=1)
    rl_cfg = replace(pcfg, seed=sub_seed(cfg["seed"], "rl"))
    ev_cfg = replace(pcfg, seed=sub_seed(cfg["seed"], "eval"))
    return {"rl": gen_prompts(rl_cfg, cfg["rl"]["n_prompts"], offset=RL_PROMPT_OFFSET),
            "dev": gen_prompts(rl_cfg, cfg["rl"]["n_dev_prompts"], offset=DEV_PROMPT_OFFSET),
            "eval": gen_prompts(ev_cfg, cfg["eval"]["n_prompts"], offset=EVAL_PROMPT_OFFSET)}


def evaluate_policy(cfg: dict, policy: PolicyParams, sft: PolicyParams, prompts=None) -> EvalReport:
    rcfg = rl_config(cfg)
    prompts = prompt_sets(cfg)["eval"] if prompts is None else prompts
    return eval_policy(policy, sft, judge_config(cfg), prompts, seed=sub_seed(cfg["seed"], "eval"),
                       temperature=rcfg.eval_temperature, top_p=rcfg.eval_top_p)


# -- RL runs -------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    config: dict
    status: str = "pending"
    paths: dict = field(default_factory=dict)
    points: list = field(default_factory=list)
    started: float | None = None
    finished: float | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(**d)


def run_id(cfg: dict) -> str:
    """Hash of everything that affects a run (``out_dir`` excluded)."""
    return config_hash({k: v for k, v in cfg.items() if k != "out_dir"})


def run_rl(cfg: dict, out_dir=None, rm_checkpoint=None) -> RunRecord:
    """Train one RL run, evaluate its three checkpoints and persist a record.

    A finished run (record status ``done``) is returned without retraining.
    """
    validate_config(cfg)
    rid = run_id(cfg)
    # absolute, so record paths stay valid from any working directory
    out = (Path(out_dir or cfg["out_dir"]) / "runs" / rid).resolve()
    rec_path = out / "record.json"
    if rec_path.exists():
        rec = RunRecord.from_json(read_json(rec_path))
        if rec.status == "done":
            return rec
    rec = RunRecord(rid, cfg, status="running", started=time.time())
    out.mkdir(parents=True, exist_ok=True)
    write_json(rec_path, rec.to_json())
    try:
        rl = cfg["rl"]
        if rm_checkpoint is not None:
            rm_params = RMParams.load(rm_checkpoint)
        else:
            rm_params, _ = train_reward_model(cfg, rl["rm"], out_dir)
        ccfg = corpus_config(cfg, n_pairs=1)
        reward_fn = RewardModel(rm_params, rl["head"], ccfg.t_max, ccfg.n_keywords)
        sft = train_sft(cfg, out_dir)
        sets = prompt_sets(cfg)
        dev = sets["dev"]

        def dev_reward(pol):
            return float(np.mean(reward_fn(dev, [greedy_response(pol, p) for p in dev])))

        result = train_rl(sft, sft, reward_fn, sets["rl"], rl_config(cfg), eval_fn=dev_reward,
                          c_rep=ccfg.c_rep)
        rec.paths = {tag: str(p) for tag, p in save_checkpoints(result, out).items()}
        result.log.to_csv(out / "runlog.csv")
        rec.paths["runlog"] = str(out / "runlog.csv")
        for tag, (it, pol) in sorted(result.checkpoints.items()):
            rep = evaluate_policy(cfg, pol, sft, sets["eval"])
            write_json(out / f"eval_{tag}.json", rep.to_json())
            rec.points.append({"checkpoint": tag, "iteration": it, "length": rep.mean_length,
                               "win_score": rep.win_score, "true_quality": rep.mean_true_quality})
        rec.status = "done"
    except Exception as e:
        rec.status, rec.error = "failed", f"{type(e).__name__}: {e}"
        write_json(rec_path, rec.to_json())
        raise
    rec.finished = time.time()
    write_json(rec_path, rec.to_json())
    return rec


# -- aggregate CSV ---------------------------------------------------------

def read_aggregate(path) -> list[dict]:
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if head != f"# aggregate_version={AGGREGATE_VERSION}":
            raise ValueError(f"unsupported aggregate CSV header {head!r}")
        return list(csv.DictReader(fh))


def _aggregate_text(rows) -> str:
    lines = [f"# aggregate_version={AGGREGATE_VERSION}", ",".join(AGGREGATE_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) for c in AGGREGATE_COLUMNS))
    return "\n".join(lines) + "\n"


def write_aggregate(path, rows) -> None:
    atomic_write_text(path, _aggregate_text(rows))


def append_aggregate(path, rows) -> None:
    """Append rows by rewriting to a temp file and renaming over ``path``."""
    old = read_aggregate(path) if Path(path).exists() else []
    write_aggregate(path, old + [{c: r[c] for c in AGGREGATE_COLUMNS} for r in rows])


def points_by_method(rows) -> dict[str, list[ParetoPoint]]:
    out: dict[str, list[ParetoPoint]] = {}
    for r in rows:
        out.setdefault(r["method"], []).append(
            ParetoPoint(float(r["length"]), float(r["win_score"]), r["run_id"], r["checkpoint"]))
    return out


# -- sweeps --------------------------------------------------------------------

@dataclass
class SweepSpec:
    base: dict
    arms: dict  # name -> {"set": {dotted: value}, "grid": dict | list[dict]}
    seeds: list = field(default_factory=lambda: [0])
    name: str = "sweep"

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        _check_keys(d, {"base", "arms", "grid", "seeds", "name"}, "sweep spec")
        if "arms" in d and "grid" in d:
            raise ConfigError("give either a top-level grid or per-arm grids, not both")
        arms = d.get("arms") or {"default": {"grid": d.get("grid", {})}}
        for name, arm in arms.items():
            _check_keys(arm, {"set", "grid"}, f"arm {name!r}")
            grids = arm.get("grid", {})
            for g in grids if isinstance(grids, list) else [grids]:
                for k, vals in g.items():
                    if not isinstance(vals, list) or not vals:
                        raise ConfigError(f"grid entry {k!r} of arm {name!r} must be a non-empty list")
        seeds = d.get("seeds", [0])
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        return cls(d.get("base", {}), arms, list(seeds), d.get("name", "sweep"))

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def cells(self) -> list[tuple[str, dict]]:
        """(arm, dotted overrides) for every grid point x seed."""
        out = []
        for name, arm in self.arms.items():
            grids = arm.get("grid", {})
            for g in grids if isinstance(grids, list) else [grids]:
                keys = sorted(g)
                for combo in itertools.product(*(g[k] for k in keys)):
                    for s in self.seeds:
                        over = dict(arm.get("set", {}))
                        over.update(zip(keys, combo))
                        over["rl.seed"] = s
                        out.append((name, over))
        return out

    def size(self) -> int:
        return len(self.cells())


def run_sweep(spec: SweepSpec, base_config: dict | None = None, out_dir=None, plot: bool = True) -> dict:
    """Run every cell (skipping finished ones), then write the aggregate CSV,
    per-arm Pareto CSVs, a summary JSON and an overlay SVG."""
    base = load_config(None) if base_config is None else base_config
    base = apply_overrides(deep_merge(base, {k: v for k, v in spec.base.items() if "." not in k}),
                           {k: v for k, v in spec.base.items() if "." in k})
    validate_config(base)
    root = Path(out_dir or base["out_dir"])
    sweep_dir = root / "sweeps" / spec.name
    cells = spec.cells()
    log.info("sweep %s: %d cells", spec.name, len(cells))
    rows, failures, records = [], [], []
    for arm, over in cells:
        cfg = apply_overrides(base, over)
        try:
            rec = run_rl(cfg, root)
        except ConfigError:
            raise
        except Exception as e:  # noqa: BLE001 - record and keep sweeping
            log.warning("cell %s %s failed: %s", arm, over, e)
            failures.append({"arm": arm, "overrides": over, "error": f"{type(e).__name__}: {e}"})
            continue
        records.append({"arm": arm, "run_id": rec.run_id, "overrides": over})
        for p in rec.points:
            rows.append({"method": arm, "run_id": rec.run_id, **p})
    write_aggregate(sweep_dir / "aggregate.csv", rows)
    sft = train_sft(base, root)
    sft_rep = evaluate_policy(base, sft, sft)
    fronts = write_fronts(rows, sweep_dir)
    summary = {"name": spec.name, "n_cells": len(cells), "n_failed": len(failures), "failures": failures,
               "records": records, "sft_length": sft_rep.mean_length,
               "fronts": {m: [asdict(p) for p in f] for m, f in fronts.items()}}
    write_json(sweep_dir / "summary.json", summary)
    if plot and rows:
        from .plotting import plot_fronts
        plot_fronts(points_by_method(rows), sweep_dir / "overlay.svg", l_sft=sft_rep.mean_length)
    return summary


def write_fronts(rows, out_dir) -> dict[str, list[ParetoPoint]]:
    from .evaluate import write_pareto_csv
    fronts = {}
    for method, pts in points_by_method(rows).items():
        fronts[method] = pareto_front(pts)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_pareto_csv(Path(out_dir) / f"pareto_{method}.csv", fronts[method])
    return fronts


def length_bins(l_sft: float, t_max: int) -> list[float]:
    """Bin edges from the SFT length up to ``t_max`` in one-token steps."""
    return [float(l_sft)] + [float(x) for x in range(int(np.floor(l_sft)) + 1, t_max + 1)]
