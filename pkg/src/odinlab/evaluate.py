"""Pairwise judge, win score, Pareto fronts and RM diagnostics.

The judge is a programmable stand-in for an LLM grader: it scores each
response by its true quality, optionally plus a length bonus, a bonus for
the first-listed response and noise.  Each pair is judged in both orders.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .correlation import CorrelationReport, correlation_report, kendall, pearson, spearman  # noqa: F401
from .policy import PolicyParams, sample_response
from .rm import rm_length_report  # noqa: F401
from .synthdata import Prompt, Response, stream, true_quality

WIN, TIE, LOSE = "win", "tie", "lose"
STREAM_JUDGE = 41
STREAM_EVAL = 43
PARETO_COLUMNS = ("length", "win_score", "run_id", "checkpoint")
PARETO_VERSION = 1


@dataclass(frozen=True)
class JudgeConfig:
    length_bias: float = 0.0
    position_bias: float = 0.0
    tie_margin: float = 0.02
    noise_std: float = 0.0
    seed: int = 0
    t_max: int = 64
    c_rep: float = 0.5

    def __post_init__(self):
        if self.tie_margin < 0:
            raise ValueError("tie_margin must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def order_outcome(s_first: float, s_second: float, margin: float) -> str:
    """Outcome for the first-listed response in one presentation order."""
    d = s_first - s_second
    if d > margin:
        return WIN
    if d < -margin:
        return LOSE
    return TIE


def aggregate(o1: str, o2: str) -> str:
    """Overall verdict from the two per-order outcomes of the same response.

    Win needs at least one win and at most one tie; lose is symmetric; every
    other combination is a tie.
    """
    outs = (o1, o2)
    if WIN in outs and LOSE not in outs:
        return WIN
    if LOSE in outs and WIN not in outs:
        return LOSE
    return TIE


def judge_scores(cfg: JudgeConfig, prompt: Prompt, y: Response) -> float:
    return true_quality(prompt, y, cfg.t_max, cfg.c_rep) + cfg.length_bias * y.length / cfg.t_max


def judge_pair(cfg: JudgeConfig, prompt: Prompt, y_a: Response, y_b: Response,
               rng: np.random.Generator | None = None) -> str:
    """Verdict for y_a against y_b, judged with y_a first and then second.

    Identical responses are a tie outright, so judge noise can never break
    self-play away from 50.
    """
    if y_a.tokens == y_b.tokens:
        return TIE
    if rng is None:
        rng = stream(cfg.seed, STREAM_JUDGE, prompt.id)
    base_a = judge_scores(cfg, prompt, y_a)
    base_b = judge_scores(cfg, prompt, y_b)
    if cfg.noise_std > 0:
        na1, nb1, na2, nb2 = cfg.noise_std * rng.standard_normal(4)
    else:
        na1 = nb1 = na2 = nb2 = 0.0
    # order 1: y_a listed first
    o1 = order_outcome(base_a + na1 + cfg.position_bias, base_b + nb1, cfg.tie_margin)
    # order 2: y_b listed first; outcome re-expressed for y_a
    o2_b = order_outcome(base_b + nb2 + cfg.position_bias, base_a + na2, cfg.tie_margin)
    o2 = {WIN: LOSE, LOSE: WIN, TIE: TIE}[o2_b]
    return aggregate(o1, o2)


def win_score(n: int, n_win: int, n_lose: int) -> float:
    if n <= 0:
        raise ValueError("n must be positive")
    if n_win < 0 or n_lose < 0 or n_win + n_lose > n:
        raise ValueError("need 0 <= n_win + n_lose <= n")
    return 50.0 + 100.0 * (n_win - n_lose) / n


@dataclass
class EvalReport:
    n: int
    n_win: int
    n_lose: int
    n_tie: int
    win_score: float
    mean_length: float
    baseline_mean_length: float
    mean_true_quality: float
    verdicts: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_verdicts(cls, verdicts: Sequence[str], lengths, base_lengths, qualities) -> "EvalReport":
        n = len(verdicts)
        nw = sum(v == WIN for v in verdicts)
        nl = sum(v == LOSE for v in verdicts)
        return cls(n, nw, nl, n - nw - nl, win_score(n, nw, nl), float(np.mean(lengths)),
                   float(np.mean(base_lengths)), float(np.mean(qualities)), list(verdicts))


def eval_policy(policy: PolicyParams, sft_policy: PolicyParams, judge_cfg: JudgeConfig,
                prompts: Sequence[Prompt], seed: int = 0, temperature: float = 0.8,
                top_p: float = 0.8) -> EvalReport:
    """One sampled response per prompt from each policy, judged pairwise.

    Both policies draw from the same per-prompt stream, so evaluating a
    policy against itself yields identical responses and all ties.
    """
    if not prompts:
        raise ValueError("empty prompt set")
    verdicts, lens, base_lens, quals = [], [], [], []
    for p in prompts:
        y = sample_response(policy, p, temperature, top_p, stream(seed, STREAM_EVAL, p.id))
        y0 = sample_response(sft_policy, p, temperature, top_p, stream(seed, STREAM_EVAL, p.id))
        verdicts.append(judge_pair(judge_cfg, p, y, y0, stream(judge_cfg.seed, STREAM_JUDGE, p.id)))
        lens.append(y.length)
        base_lens.append(y0.length)
        quals.append(true_quality(p, y, judge_cfg.t_max, judge_cfg.c_rep))
    return EvalReport.from_verdicts(verdicts, lens, base_lens, quals)


# -- Pareto fronts -------------------------------------------------------------

@dataclass(frozen=True)
class ParetoPoint:
    mean_length: float
    win_score: float
    run_id: str = ""
    checkpoint: str = ""


def dominates(q: ParetoPoint, p: ParetoPoint) -> bool:
    return (q.mean_length <= p.mean_length and q.win_score >= p.win_score
            and (q.mean_length < p.mean_length or q.win_score > p.win_score))


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points (shorter and higher is better), sorted by length."""
    front = [p for p in points if not any(dominates(q, p) for q in points)]
    return sorted(front, key=lambda p: (p.mean_length, -p.win_score))


def front_value(points: Sequence[ParetoPoint], length: float) -> float:
    """Best score reachable at mean length <= ``length`` (-inf if none)."""
    vals = [p.win_score for p in points if p.mean_length <= length]
    return max(vals) if vals else float("-inf")


def compare_fronts(ours: Sequence[ParetoPoint], theirs: Sequence[ParetoPoint], bins: Sequence[float]):
    """Per-bin (edge, our front value, their front value) on the step-function fronts."""
    return [(b, front_value(ours, b), front_value(theirs, b)) for b in bins]


def write_pareto_csv(path, points: Sequence[ParetoPoint]):
    with open(path, "w", newline="") as fh:
        fh.write(f"# pareto_version={PARETO_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(PARETO_COLUMNS)
        for p in points:
            w.writerow([repr(p.mean_length), repr(p.win_score), p.run_id, p.checkpoint])


def read_pareto_csv(path) -> list[ParetoPoint]:
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if head != f"# pareto_version={PARETO_VERSION}":
            raise ValueError(f"unsupported Pareto CSV header {head!r}")
        rows = list(csv.DictReader(fh))
    return [ParetoPoint(float(r["length"]), float(r["win_score"]), r["run_id"], r["checkpoint"]) for r in rows]


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True)
