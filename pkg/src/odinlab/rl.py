"""ReMax and PPO on the toy keyword environment.

Rewards are sequence level: the shaped reward (clip, length penalty, KL
term) is paid on the final token and every other step gets 0, unless
``per_token_kl`` spreads the KL term over steps.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .optim import Adam
from .policy import (STATE_DIM, PolicyParams, Trajectory, greedy_response, length_penalized_reward,
                     clip_reward, sample_response)
from .rm import RMParams, reward as rm_reward, response_features
from .synthdata import ConfigError, Prompt, Response, true_quality

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = 20.0
RUNLOG_VERSION = 1


class RLDivergence(RuntimeError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass(frozen=True)
class RLConfig:
    algo: str = "ppo"
    beta: float = 0.005
    eps: float = 0.2
    clip: float = math.inf
    alpha: float = 0.0
    n_rollouts: int = 64
    minibatch: int = 32
    inner_epochs: int = 1
    iterations: int = 150
    gamma: float = 1.0
    lam: float = 0.95
    lr: float = 3e-3
    temperature: float = 1.0
    top_p: float = 0.9
    eval_temperature: float = 0.8
    eval_top_p: float = 0.8
    normalize_advantages: bool = True
    per_token_kl: bool = False
    # iteration of the "step 500" checkpoint; None -> half of ``iterations``
    checkpoint_step: int | None = None
    eval_every: int = 10
    # critic start when none is passed in: "fit" regresses the first batch's
    # returns-to-go (the analogue of initialising the critic from a trained
    # model); "zero" starts from w = 0
    value_init: str = "fit"
    seed: int = 0

    def validate(self):
        if self.algo not in ("ppo", "remax"):
            raise ConfigError(f"unknown algorithm {self.algo!r}")
        if self.n_rollouts < 1:
            raise ConfigError("n_rollouts must be positive")
        if self.algo == "ppo" and not 0 < self.minibatch <= self.n_rollouts:
            raise ConfigError("need 0 < minibatch <= n_rollouts")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        if not self.clip > 0:
            raise ConfigError("clip must be positive or inf")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigError("beta and alpha must be non-negative")
        if self.value_init not in ("fit", "zero"):
            raise ConfigError("value_init must be 'fit' or 'zero'")
        if self.inner_epochs < 1 or self.iterations < 0:
            raise ConfigError("inner_epochs >= 1 and iterations >= 0 required")
        return self

    @property
    def mid_step(self) -> int:
        return self.iterations // 2 if self.checkpoint_step is None else self.checkpoint_step

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no infinity
        d["clip"] = None if math.isinf(self.clip) else self.clip
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RLConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown RL config keys: {sorted(bad)}")
        d = dict(d)
        if d.get("clip", 0) is None:
            d["clip"] = math.inf
        return cls(**d).validate()


class RewardModel:
    """Sequence reward from one head of a trained RM."""

    def __init__(self, params: RMParams, head: str, t_max: int, n_keywords: int):
        if head == "quality" and not params.two_head:
            raise ConfigError("head=quality needs a two-head checkpoint")
        if head not in ("full", "quality", "length"):
            raise ConfigError(f"unknown head {head!r}")
        self.params, self.head = params, head
        self.t_max, self.n_keywords = t_max, n_keywords

    def __call__(self, prompts: Sequence[Prompt], responses: Sequence[Response]) -> np.ndarray:
        f = np.array([response_features(p, r, self.t_max, self.n_keywords)
                      for p, r in zip(prompts, responses)])
        return rm_reward(self.params, f, self.head)


# -- advantage estimation and value function --------------------------------

def gae(rewards, values, bootstrap: float = 0.0, gamma: float = 1.0, lam: float = 0.95):
    """Generalised advantage estimates and returns (A_t + V_t)."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.size == 0:
        raise ValueError("empty trajectory")
    if r.shape != v.shape:
        raise ValueError("rewards and values differ in length")
    adv = np.zeros_like(r)
    nxt_v, acc = bootstrap, 0.0
    for t in range(r.size - 1, -1, -1):
        delta = r[t] + gamma * nxt_v - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt_v = v[t]
    return adv, adv + v


@dataclass
class ValueParams:
    w: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM))

    def predict(self, H: np.ndarray) -> np.ndarray:
        return H @ self.w

    def copy(self) -> "ValueParams":
        return ValueParams(self.w.copy())

    def to_json(self) -> dict:
        return {"w": self.w.tolist()}

    @classmethod
    def from_json(cls, d) -> "ValueParams":
        return cls(np.asarray(d["w"], dtype=float))


def value_loss(value: ValueParams, H: np.ndarray, returns: np.ndarray) -> float:
    return float(np.mean((H @ value.w - returns) ** 2))


def value_grad(value: ValueParams, H: np.ndarray, returns: np.ndarray) -> np.ndarray:
    return 2.0 * H.T @ (H @ value.w - returns) / len(returns)


def fit_value(rollouts: Sequence["Rollout"], ridge: float = 1e-6) -> ValueParams:
    """Least-squares critic on the Monte Carlo returns-to-go of ``rollouts``.

    A zero critic trained at the actor's step size lags far behind the
    return scale, and GAE with lam < 1 then credits padding tokens of long
    responses; starting from this fit avoids that.
    """
    H = np.vstack([ro.traj.H for ro in rollouts])
    G = np.concatenate([np.cumsum(ro.rewards[::-1])[::-1] for ro in rollouts])
    A = H.T @ H + ridge * len(G) * np.eye(H.shape[1])
    return ValueParams(np.linalg.solve(A, H.T @ G))


# -- PPO pieces --------------------------------------------------------------

def ppo_clip_loss(ratio, adv, eps: float):
    """Clipped surrogate min(ratio * A, clip(ratio) * A), to be maximised."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_active(ratio, adv, eps: float):
    """Mask of tokens whose surrogate still depends on the ratio."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return ~(((adv > 0) & (ratio > 1 + eps)) | ((adv < 0) & (ratio < 1 - eps)))


@dataclass
class Rollout:
    prompt: Prompt
    response: Response
    traj: Trajectory
    old_logp: np.ndarray
    sft_logp: np.ndarray
    rm_reward: float
    shaped_reward: float
    rewards: np.ndarray
    values: np.ndarray
    gen_version: int
    adv: np.ndarray | None = None
    returns: np.ndarray | None = None


@dataclass
class ExperienceBatch:
    rollouts: list[Rollout]

    def __len__(self):
        return len(self.rollouts)

    def recompute_advantages(self, value: ValueParams, cfg: RLConfig):
        """GAE from stored rewards and current values; standardised if enabled."""
        for ro in self.rollouts:
            ro.values = value.predict(ro.traj.H)
            ro.adv, ro.returns = gae(ro.rewards, ro.values, 0.0, cfg.gamma, cfg.lam)
        if cfg.normalize_advantages:
            allv = np.concatenate([ro.adv for ro in self.rollouts])
            mu, sd = allv.mean(), allv.std()
            for ro in self.rollouts:
                ro.adv = (ro.adv - mu) / (sd + 1e-8)


def shape(cfg: RLConfig, r_rm: float, length: int, logp: np.ndarray, logp_sft: np.ndarray):
    """(sequence shaped reward, per-step reward vector)."""
    base = length_penalized_reward(clip_reward(r_rm, cfg.clip), cfg.alpha, length)
    kl_steps = logp - logp_sft
    seq = base - cfg.beta * float(kl_steps.sum())
    steps = np.zeros(len(logp))
    if cfg.per_token_kl:
        steps -= cfg.beta * kl_steps
        steps[-1] += base
    else:
        steps[-1] = seq
    return seq, steps


def collect(policy: PolicyParams, sft: PolicyParams, reward_fn, prompts: Sequence[Prompt],
            cfg: RLConfig, rng: np.random.Generator, value: ValueParams | None = None,
            version: int = 0) -> ExperienceBatch:
    vocab = policy.vocab
    resp = [sample_response(policy, p, cfg.temperature, cfg.top_p, rng) for p in prompts]
    r_rm = reward_fn(prompts, resp)
    out = []
    for p, y, r in zip(prompts, resp, r_rm):
        tr = Trajectory.build(p, y, vocab)
        lp = tr.logprobs(policy.U)
        lps = tr.logprobs(sft.U)
        seq, steps = shape(cfg, float(r), y.length, lp, lps)
        vals = value.predict(tr.H) if value is not None else np.zeros(len(lp))
        out.append(Rollout(p, y, tr, lp, lps, float(r), seq, steps, vals, version))
    return ExperienceBatch(out)


def ppo_minibatch_grads(policy: PolicyParams, value: ValueParams, mb: Sequence[Rollout], cfg: RLConfig):
    """Token-mean gradients of the clipped objective (ascent) and value loss (descent)."""
    gU = np.zeros_like(policy.U)
    H_all, R_all = [], []
    ratios, actives = [], []
    n_tok = sum(ro.traj.tokens.size for ro in mb)
    for ro in mb:
        lp = ro.traj.logprobs(policy.U)
        log_ratio = np.clip(lp - ro.old_logp, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
        ratio = np.exp(log_ratio)
        act = ppo_active(ratio, ro.adv, cfg.eps)
        # d/dtheta of ratio * A = ratio * A * dlogpi
        w = np.where(act, ratio * ro.adv, 0.0)
        gU += ro.traj.grad(policy.U, w)[1]
        ratios.append(ratio)
        actives.append(act)
        H_all.append(ro.traj.H)
        R_all.append(ro.returns)
    H = np.vstack(H_all)
    gV = value_grad(value, H, np.concatenate(R_all))
    return gU / n_tok, gV, np.concatenate(ratios), np.concatenate(actives)


# -- run log -----------------------------------------------------------------

RUNLOG_COLUMNS = ("iter", "mean_shaped_reward", "mean_rm_reward", "mean_true_quality", "mean_length",
                  "kl_estimate", "off_policy_fraction", "clip_fraction", "max_ratio_dev",
                  "clip_inactive", "eval_reward")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, **row):
        self.rows.append({k: row.get(k, "") for k in RUNLOG_COLUMNS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# runlog_version={RUNLOG_VERSION}\n")
            w = csv.DictWriter(fh, fieldnames=RUNLOG_COLUMNS)
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="") as fh:
            head = fh.readline().strip()
            if head != f"# runlog_version={RUNLOG_VERSION}":
                raise ValueError(f"unsupported run log header {head!r}")
            return cls(rows=list(csv.DictReader(fh)))


@dataclass
class RLResult:
    policy: PolicyParams
    value: ValueParams | None
    log: RunLog
    checkpoints: dict  # tag -> (iteration, PolicyParams)


def _check_finite(policy, value, it):
    ok = np.all(np.isfinite(policy.U)) and (value is None or np.all(np.isfinite(value.w)))
    if not ok:
        raise RLDivergence(f"non-finite parameters at iteration {it}",
                           snapshot={"iter": it, "U": policy.U.tolist()})


def _sample_prompts(prompts, n, rng):
    return [prompts[i] for i in rng.integers(len(prompts), size=n)]


def _log_iteration(log_, it, batch: ExperienceBatch, t_max, c_rep, **extra):
    ros = batch.rollouts
    log_.append(iter=it,
                mean_shaped_reward=float(np.mean([r.shaped_reward for r in ros])),
                mean_rm_reward=float(np.mean([r.rm_reward for r in ros])),
                mean_true_quality=float(np.mean([true_quality(r.prompt, r.response, t_max, c_rep) for r in ros])),
                mean_length=float(np.mean([r.response.length for r in ros])),
                kl_estimate=float(np.mean([(r.old_logp - r.sft_logp).sum() for r in ros])),
                **extra)


class _Checkpointer:
    """Keeps the mid-run, final and best-eval-reward policies."""

    def __init__(self, cfg: RLConfig, eval_fn):
        self.cfg, self.eval_fn = cfg, eval_fn
        self.ckpts: dict = {}
        self.best = -math.inf

    def after(self, it: int, policy: PolicyParams):
        """Called with the policy after ``it`` updates; returns eval reward or ''."""
        if it == self.cfg.mid_step:
            self.ckpts["mid"] = (it, policy.copy())
        score = ""
        if self.eval_fn is not None and (it % self.cfg.eval_every == 0 or it == self.cfg.iterations):
            score = float(self.eval_fn(policy))
            if score > self.best:
                self.best = score
                self.ckpts["best"] = (it, policy.copy())
        return score

    def finish(self, it, policy):
        self.ckpts["final"] = (it, policy.copy())
        self.ckpts.setdefault("best", (it, policy.copy()))
        self.ckpts.setdefault("mid", (it, policy.copy()))
        return self.ckpts


def train_ppo(policy: PolicyParams, sft: PolicyParams, reward_fn, prompts: Sequence[Prompt],
              cfg: RLConfig, value: ValueParams | None = None, eval_fn: Callable | None = None,
              c_rep: float = 0.5) -> RLResult:
    """Algorithm-1 style PPO: N rollouts per iteration, K epochs of size-b minibatches."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    fit_critic = value is None and cfg.value_init == "fit"
    policy, value = policy.copy(), (value or ValueParams()).copy()
    opt_pi = Adam({"U": policy.U}, lr=cfg.lr)
    opt_v = Adam({"w": value.w}, lr=cfg.lr)
    clip_inactive = cfg.n_rollouts == cfg.minibatch and cfg.inner_epochs == 1
    log_ = RunLog(meta={"algo": "ppo", "normalize_advantages": cfg.normalize_advantages,
                        "clip_inactive": clip_inactive, "config": cfg.to_dict()})
    ck = _Checkpointer(cfg, eval_fn)
    ck.after(0, policy)
    version = 0
    for it in range(1, cfg.iterations + 1):
        batch = collect(policy, sft, reward_fn, _sample_prompts(prompts, cfg.n_rollouts, rng),
                        cfg, rng, value, version)
        if fit_critic:
            value.w[:] = fit_value(batch.rollouts).w
            fit_critic = False
        batch.recompute_advantages(value, cfg)
        n_stale = n_seen = n_clipped = n_tok = 0
        max_dev = 0.0
        for _ in range(cfg.inner_epochs):
            order = rng.permutation(len(batch))
            for s in range(0, len(batch), cfg.minibatch):
                mb = [batch.rollouts[i] for i in order[s:s + cfg.minibatch]]
                n_stale += sum(ro.gen_version != version for ro in mb)
                n_seen += len(mb)
                gU, gV, ratio, act = ppo_minibatch_grads(policy, value, mb, cfg)
                max_dev = max(max_dev, float(np.max(np.abs(ratio - 1.0))))
                n_clipped += int((~act).sum())
                n_tok += act.size
                policy.U = opt_pi.step({"U": policy.U}, {"U": gU}, ascent=True)["U"]
                value.w = opt_v.step({"w": value.w}, {"w": gV})["w"]
                version += 1
                _check_finite(policy, value, it)
        score = ck.after(it, policy)
        _log_iteration(log_, it, batch, policy.t_max, c_rep, off_policy_fraction=n_stale / n_seen,
                       clip_fraction=n_clipped / max(n_tok, 1), max_ratio_dev=max_dev,
                       clip_inactive=int(clip_inactive), eval_reward=score)
    return RLResult(policy, value, log_, ck.finish(cfg.iterations, policy))


# -- ReMax -------------------------------------------------------------------

def remax_gradient(policy: PolicyParams, sft: PolicyParams, reward_fn, prompts: Sequence[Prompt],
                   samples: Sequence[Response], cfg: RLConfig):
    """Mean of (r(y) - r(y_greedy)) * grad log pi(y) over the prompts.

    Both rewards are fully shaped (clip, length penalty, KL).  Returns
    (gradient, per-prompt weights).
    """
    vocab = policy.vocab
    greedy = [greedy_response(policy, p) for p in prompts]
    r_s = reward_fn(prompts, samples)
    r_g = reward_fn(prompts, greedy)
    g = np.zeros_like(policy.U)
    weights = np.zeros(len(prompts))
    for i, (p, y, yg) in enumerate(zip(prompts, samples, greedy)):
        tr = Trajectory.build(p, y, vocab)
        trg = Trajectory.build(p, yg, vocab)
        s_y = shape(cfg, float(r_s[i]), y.length, tr.logprobs(policy.U), tr.logprobs(sft.U))[0]
        s_g = shape(cfg, float(r_g[i]), yg.length, trg.logprobs(policy.U), trg.logprobs(sft.U))[0]
        weights[i] = s_y - s_g
        if weights[i] != 0.0:
            g += weights[i] * tr.grad(policy.U)[1]
    return g / max(len(prompts), 1), weights


def remax_update(policy: PolicyParams, sft: PolicyParams, reward_fn, prompts: Sequence[Prompt],
                 cfg: RLConfig, rng: np.random.Generator, opt: Adam | None = None):
    """One ReMax ascent step; returns (new policy, samples, weights)."""
    samples = [sample_response(policy, p, cfg.temperature, cfg.top_p, rng) for p in prompts]
    g, w = remax_gradient(policy, sft, reward_fn, prompts, samples, cfg)
    new = policy.copy()
    if opt is None:
        new.U = new.U + cfg.lr * g
    else:
        new.U = opt.step({"U": new.U}, {"U": g}, ascent=True)["U"]
    return new, samples, w


def train_remax(policy: PolicyParams, sft: PolicyParams, reward_fn, prompts: Sequence[Prompt],
                cfg: RLConfig, eval_fn: Callable | None = None, c_rep: float = 0.5) -> RLResult:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    policy = policy.copy()
    opt = Adam({"U": policy.U}, lr=cfg.lr)
    log_ = RunLog(meta={"algo": "remax", "config": cfg.to_dict()})
    ck = _Checkpointer(cfg, eval_fn)
    ck.after(0, policy)
    vocab = policy.vocab
    for it in range(1, cfg.iterations + 1):
        ps = _sample_prompts(prompts, cfg.n_rollouts, rng)
        new, samples, _ = remax_update(policy, sft, reward_fn, ps, cfg, rng, opt)
        # log the rollouts that produced this update
        r_rm = reward_fn(ps, samples)
        ros = []
        for p, y, r in zip(ps, samples, r_rm):
            tr = Trajectory.build(p, y, vocab)
            lp, lps = tr.logprobs(policy.U), tr.logprobs(sft.U)
            seq, steps = shape(cfg, float(r), y.length, lp, lps)
            ros.append(Rollout(p, y, tr, lp, lps, float(r), seq, steps, np.zeros(len(lp)), it - 1))
        policy = new
        _check_finite(policy, None, it)
        score = ck.after(it, policy)
        _log_iteration(log_, it, ExperienceBatch(ros), policy.t_max, c_rep, off_policy_fraction=0.0,
                       clip_fraction=0.0, max_ratio_dev=0.0, clip_inactive=0, eval_reward=score)
    return RLResult(policy, None, log_, ck.finish(cfg.iterations, policy))


def train_rl(policy, sft, reward_fn, prompts, cfg: RLConfig, eval_fn=None, c_rep=0.5) -> RLResult:
    if cfg.algo == "ppo":
        return train_ppo(policy, sft, reward_fn, prompts, cfg, eval_fn=eval_fn, c_rep=c_rep)
    return train_remax(policy, sft, reward_fn, prompts, cfg, eval_fn=eval_fn, c_rep=c_rep)


def save_checkpoints(result: RLResult, out_dir, stem: str = "policy") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for tag, (it, pol) in result.checkpoints.items():
        path = out / f"{stem}_{tag}.json"
        d = pol.to_json()
        d["iteration"] = it
        path.write_text(json.dumps(d))
        paths[tag] = str(path)
    return paths
