"""Toy autoregressive policy, behaviour cloning, decoding and reward shaping.

The policy is a linear softmax over a prompt-relative token table.  Every
token maps to a row of ``U``:

    rows 0..4      the prompt's keyword in that slot
    row 5          any keyword the prompt did not ask for
    rows 6..6+F-1  filler tokens
    row 6+F        EOS

and its logit at step t is ``U[row(v)] . h_t``.  Sharing rows across
prompts is what lets a policy with a dozen parameters per row generalise
to unseen keyword sets.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .optim import Adam
from .synthdata import ConfigError, Prompt, Response, Vocab

MAX_SLOTS = 5
STATE_DIM = MAX_SLOTS + 1 + 4 + 1
# last-token classes
START, PROMPT_KW, OTHER_KW, FILLER = range(4)
CHECKPOINT_VERSION = 1


class PolicyDivergence(RuntimeError):
    pass


def n_rows(vocab: Vocab) -> int:
    return MAX_SLOTS + 1 + vocab.n_filler + 1


def row_map(prompt: Prompt, vocab: Vocab) -> np.ndarray:
    """Row index of every token id for this prompt."""
    rows = np.full(vocab.size, MAX_SLOTS, dtype=np.int64)
    for i, kw in enumerate(prompt.keywords):
        rows[kw] = i
    rows[vocab.n_keywords:vocab.eos] = MAX_SLOTS + 1 + np.arange(vocab.n_filler)
    rows[vocab.eos] = n_rows(vocab) - 1
    return rows


def token_class(prompt: Prompt, vocab: Vocab, tok: int) -> int:
    if tok < vocab.n_keywords:
        return PROMPT_KW if tok in prompt.keywords else OTHER_KW
    return FILLER


def state_features(prompt: Prompt, tokens: Sequence[int], vocab: Vocab) -> np.ndarray:
    """h_t for the prefix ``tokens`` (no EOS in the prefix)."""
    h = np.zeros(STATE_DIM)
    h[:MAX_SLOTS] = 1.0
    for i, kw in enumerate(prompt.keywords):
        h[i] = float(kw in tokens)
    h[MAX_SLOTS] = len(tokens) / vocab.t_max
    last = START if not tokens else token_class(prompt, vocab, tokens[-1])
    h[MAX_SLOTS + 1 + last] = 1.0
    h[-1] = 1.0
    return h


def trajectory_features(prompt: Prompt, response: Response, vocab: Vocab) -> np.ndarray:
    """Stacked h_t for every decision step of ``response`` (EOS step included)."""
    toks = response.tokens
    n = len(toks)
    H = np.zeros((n, STATE_DIM))
    H[:, :MAX_SLOTS] = 1.0
    pos = {kw: i for i, kw in enumerate(prompt.keywords)}
    for i in pos.values():
        H[:, i] = 0.0
    last = START
    for t in range(n):
        H[t, MAX_SLOTS] = t / vocab.t_max
        H[t, MAX_SLOTS + 1 + last] = 1.0
        tok = toks[t]
        if tok == vocab.eos:
            break
        if tok in pos:
            H[t + 1:, pos[tok]] = 1.0
        last = token_class(prompt, vocab, tok)
    H[:, -1] = 1.0
    return H


@dataclass
class PolicyParams:
    U: np.ndarray
    n_keywords: int = 20
    n_filler: int = 11
    t_max: int = 64

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_keywords, self.n_filler, self.t_max)

    @classmethod
    def zeros(cls, vocab: Vocab) -> "PolicyParams":
        return cls(np.zeros((n_rows(vocab), STATE_DIM)), vocab.n_keywords, vocab.n_filler, vocab.t_max)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.U.copy(), self.n_keywords, self.n_filler, self.t_max)

    def config_hash(self) -> str:
        meta = {"n_keywords": self.n_keywords, "n_filler": self.n_filler, "t_max": self.t_max,
                "state_dim": STATE_DIM}
        return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "config_hash": self.config_hash(),
                "n_keywords": self.n_keywords, "n_filler": self.n_filler, "t_max": self.t_max,
                "U": self.U.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PolicyParams":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported policy checkpoint version {d.get('version')}")
        p = cls(np.asarray(d["U"], dtype=float), d["n_keywords"], d["n_filler"], d["t_max"])
        if p.U.shape != (n_rows(p.vocab), STATE_DIM):
            raise ValueError(f"bad U shape {p.U.shape}")
        if d.get("config_hash") not in (None, p.config_hash()):
            raise ValueError("policy checkpoint config hash mismatch")
        return p

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def step_logits(params: PolicyParams, prompt: Prompt, response: Response) -> np.ndarray:
    """(steps, V) logits along ``response``."""
    vocab = params.vocab
    if any(t < 0 or t >= vocab.size for t in response.tokens):
        raise ValueError("token id out of range")
    H = trajectory_features(prompt, response, vocab)
    return (H @ params.U.T)[:, row_map(prompt, vocab)]


def step_logprobs(params: PolicyParams, prompt: Prompt, response: Response) -> np.ndarray:
    toks = np.asarray(response.tokens, dtype=np.int64)
    if toks.size == 0:
        return np.zeros(0)
    lp = _log_softmax(step_logits(params, prompt, response))
    return lp[np.arange(toks.size), toks]


def policy_logprob(params: PolicyParams, prompt: Prompt, response: Response) -> float:
    return float(step_logprobs(params, prompt, response).sum())


@dataclass
class Trajectory:
    """Cached per-step inputs of a (prompt, response) pair."""
    H: np.ndarray       # (steps, STATE_DIM)
    rows: np.ndarray    # token id -> row of U
    tokens: np.ndarray  # (steps,)

    @classmethod
    def build(cls, prompt: Prompt, response: Response, vocab: Vocab) -> "Trajectory":
        toks = np.asarray(response.tokens, dtype=np.int64)
        if toks.size and (toks.min() < 0 or toks.max() >= vocab.size):
            raise ValueError("token id out of range")
        return cls(trajectory_features(prompt, response, vocab), row_map(prompt, vocab), toks)

    def logprobs(self, U: np.ndarray) -> np.ndarray:
        if self.tokens.size == 0:
            return np.zeros(0)
        lp = _log_softmax((self.H @ U.T)[:, self.rows])
        return lp[np.arange(self.tokens.size), self.tokens]

    def grad(self, U: np.ndarray, weights=None):
        """(per-step logprobs, d/dU of sum_t weights[t] * log pi(a_t | h_t))."""
        n = self.tokens.size
        if n == 0:
            return np.zeros(0), np.zeros_like(U)
        lp = _log_softmax((self.H @ U.T)[:, self.rows])
        # probability mass aggregated per row, minus the taken row
        P = np.exp(lp) @ np.eye(U.shape[0])[self.rows]
        P[np.arange(n), self.rows[self.tokens]] -= 1.0
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        return lp[np.arange(n), self.tokens], -(P * w[:, None]).T @ self.H


def logprob_grad(params: PolicyParams, prompt: Prompt, response: Response, weights=None):
    """Gradient w.r.t. U of sum_t weights[t] * log pi(a_t | h_t).

    Returns (per-step logprobs, grad).  ``weights`` defaults to all ones.
    """
    return Trajectory.build(prompt, response, params.vocab).grad(params.U, weights)


def _choose(probs: np.ndarray, top_p: float, u: float) -> int:
    order = np.argsort(-probs, kind="stable")
    sp = probs[order]
    cum = np.cumsum(sp)
    keep = int(np.searchsorted(cum, top_p * cum[-1] - 1e-12)) + 1
    kept = sp[:keep] / sp[:keep].sum()
    j = int(np.searchsorted(np.cumsum(kept), u * (1 - 1e-12), side="right"))
    return int(order[min(j, keep - 1)])


def _decode(params: PolicyParams, prompt: Prompt, pick) -> Response:
    vocab = params.vocab
    rows = row_map(prompt, vocab)
    pos = {kw: i for i, kw in enumerate(prompt.keywords)}
    h = np.zeros(STATE_DIM)
    h[:MAX_SLOTS] = 1.0
    for i in pos.values():
        h[i] = 0.0
    h[MAX_SLOTS + 1 + START] = 1.0
    h[-1] = 1.0
    out: list[int] = []
    for t in range(vocab.t_max):
        h[MAX_SLOTS] = t / vocab.t_max
        logits = (params.U @ h)[rows]
        tok = pick(logits)
        out.append(tok)
        if tok == vocab.eos:
            return Response(tuple(out), True)
        if tok in pos:
            h[pos[tok]] = 1.0
        h[MAX_SLOTS + 1:MAX_SLOTS + 5] = 0.0
        h[MAX_SLOTS + 1 + token_class(prompt, vocab, tok)] = 1.0
    return Response(tuple(out), False)


def sample_response(params: PolicyParams, prompt: Prompt, temperature: float = 1.0,
                    top_p: float = 0.9, rng: np.random.Generator | None = None) -> Response:
    """Nucleus sampling; one uniform draw per step."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    rng = np.random.default_rng() if rng is None else rng

    def pick(logits):
        z = logits / temperature
        p = np.exp(z - z.max())
        return _choose(p / p.sum(), top_p, rng.random())

    return _decode(params, prompt, pick)


def greedy_response(params: PolicyParams, prompt: Prompt) -> Response:
    # np.argmax returns the lowest id among ties
    return _decode(params, prompt, lambda logits: int(np.argmax(logits)))


# -- behaviour cloning ------------------------------------------------------

def demo_nll(params: PolicyParams, demos) -> float:
    steps = sum(len(r.tokens) for _, r in demos)
    return -sum(policy_logprob(params, p, r) for p, r in demos) / max(steps, 1)


def bc_pretrain(demos: Sequence[tuple[Prompt, Response]], vocab: Vocab, epochs: int = 30,
                lr: float = 0.05, batch_size: int | None = 64, seed: int = 0,
                init: PolicyParams | None = None, patience: int = 5):
    """Maximise demo log-likelihood with Adam.

    Returns (params, per-epoch mean per-token NLL).  Raises
    PolicyDivergence if the epoch loss rises ``patience`` epochs in a row.
    """
    if not demos:
        raise ValueError("no demonstrations")
    params = PolicyParams.zeros(vocab) if init is None else init.copy()
    if epochs == 0:
        return params, []
    opt = Adam({"U": params.U}, lr=lr)
    rng = np.random.default_rng(seed)
    n = len(demos)
    bs = n if batch_size is None else min(batch_size, n)
    curve, rises = [], 0
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for s in range(0, n, bs):
            batch = [demos[i] for i in order[s:s + bs]]
            g = np.zeros_like(params.U)
            steps = 0
            for p, r in batch:
                g += logprob_grad(params, p, r)[1]
                steps += len(r.tokens)
            params.U = opt.step({"U": params.U}, {"U": g / max(steps, 1)}, ascent=True)["U"]
        loss = demo_nll(params, demos)
        if not np.isfinite(loss):
            raise PolicyDivergence("behaviour cloning produced a non-finite loss")
        rises = rises + 1 if curve and loss > curve[-1] else 0
        curve.append(loss)
        if rises >= patience:
            raise PolicyDivergence(f"demo loss rose for {patience} consecutive epochs")
    return params, curve


# -- reward shaping ---------------------------------------------------------

def aux_reward(r: float, logp_policy: float, logp_sft: float, beta: float) -> float:
    """KL-regularised sequence reward r - beta * log(pi / pi_sft)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return r - beta * (logp_policy - logp_sft)


def clip_reward(r: float, c: float) -> float:
    if not c > 0:
        raise ConfigError("reward clip threshold must be positive (or inf)")
    return min(max(r, -c), c)


def length_penalized_reward(r: float, alpha: float, length: int) -> float:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return r - alpha * length


def shaped_reward(r_rm: float, length: int, logp_policy: float, logp_sft: float,
                  beta: float, clip: float = float("inf"), alpha: float = 0.0) -> float:
    """Clip, then length-penalise, then subtract the KL term."""
    r = length_penalized_reward(clip_reward(r_rm, clip), alpha, length)
    return aux_reward(r, logp_policy, logp_sft, beta)


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 0.9

    def as_dict(self):
        return asdict(self)
