"""Reward model: tanh feature body with one plain head or two weight-normalised heads.

Two-head rewards are ``r_Q = g_Q * (w_Q / |w_Q|) . z`` and likewise ``r_L``,
with ``z = tanh(B f)``.  The two-head objective is the Bradley-Terry loss on
``r_Q + r_L`` plus a length-correlation penalty (applied separately to the
chosen and rejected batch) and an orthogonality penalty on the head
directions.  Gradients are derived by hand.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .correlation import correlation_report, is_degenerate, pearson, pearson_grad
from .optim import Adam
from .synthdata import PreferencePair, Prompt, Response, keyword_counts

log = logging.getLogger(__name__)

FEATURE_DIM = 16
MAX_KEYWORDS = 5
CHECKPOINT_VERSION = 1
SINGLE, TWO_HEAD = "single-head", "two-head"


class UnsupportedModeError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot


# -- features --------------------------------------------------------------

def response_features(prompt: Prompt, response: Response, t_max: int, n_keywords: int) -> np.ndarray:
    """Fixed 16-dim description of a response.

    coverage, 5 keyword-presence slots, normalised repeats, filler fraction,
    normalised length, 4 length buckets, other-keyword fraction, truncated
    flag, constant.
    """
    body = response.body
    L = response.length
    f = np.zeros(FEATURE_DIM)
    distinct, total = keyword_counts(prompt, response)
    present = set(body)
    f[0] = distinct / prompt.k
    for i, kw in enumerate(prompt.keywords[:MAX_KEYWORDS]):
        f[1 + i] = float(kw in present)
    f[6] = (total - distinct) / t_max
    denom = max(L, 1)
    kws = set(prompt.keywords)
    f[7] = sum(t >= n_keywords for t in body) / denom
    f[8] = L / t_max
    f[9 + min(int(4 * L / t_max), 3)] = 1.0
    f[13] = sum(t < n_keywords and t not in kws for t in body) / denom
    f[14] = float(not response.terminated)
    f[15] = 1.0
    return f


@dataclass
class PairBatch:
    """Features and lengths for a batch of preference pairs."""

    f_chosen: np.ndarray
    f_rejected: np.ndarray
    len_chosen: np.ndarray
    len_rejected: np.ndarray

    def __len__(self):
        return len(self.len_chosen)

    def take(self, idx):
        return PairBatch(self.f_chosen[idx], self.f_rejected[idx],
                         self.len_chosen[idx], self.len_rejected[idx])

    @classmethod
    def from_pairs(cls, pairs: Sequence[PreferencePair], t_max: int, n_keywords: int) -> "PairBatch":
        fc = np.array([response_features(p.prompt, p.chosen, t_max, n_keywords) for p in pairs])
        fr = np.array([response_features(p.prompt, p.rejected, t_max, n_keywords) for p in pairs])
        lc = np.array([p.chosen.length for p in pairs], dtype=float)
        lr = np.array([p.rejected.length for p in pairs], dtype=float)
        return cls(fc.reshape(-1, FEATURE_DIM), fr.reshape(-1, FEATURE_DIM), lc, lr)


# -- parameters ------------------------------------------------------------

@dataclass
class RMParams:
    body: np.ndarray          # (h, d)
    w_q: np.ndarray           # (h,)
    w_l: np.ndarray           # (h,)
    g_q: float = 1.0
    g_l: float = 1.0
    mode: str = TWO_HEAD

    @classmethod
    def init(cls, rng: np.random.Generator, d=FEATURE_DIM, h=16, mode=TWO_HEAD) -> "RMParams":
        if mode not in (SINGLE, TWO_HEAD):
            raise UnsupportedModeError(mode)
        body = rng.normal(0, 1 / np.sqrt(d), size=(h, d))
        w_q = rng.normal(0, 1 / np.sqrt(h), size=h)
        w_l = rng.normal(0, 1 / np.sqrt(h), size=h)
        return cls(body, w_q, w_l, 1.0, 1.0, mode)

    @property
    def two_head(self) -> bool:
        return self.mode == TWO_HEAD

    def arrays(self) -> dict:
        return {"body": self.body, "w_q": self.w_q, "w_l": self.w_l,
                "g_q": np.asarray(self.g_q, dtype=float), "g_l": np.asarray(self.g_l, dtype=float)}

    def with_arrays(self, a: dict) -> "RMParams":
        return replace(self, body=a["body"], w_q=a["w_q"], w_l=a["w_l"],
                       g_q=float(a["g_q"]), g_l=float(a["g_l"]))

    def copy(self) -> "RMParams":
        return self.with_arrays({k: np.array(v, copy=True) for k, v in self.arrays().items()})

    def effective_heads(self):
        """Projection vectors actually applied to the body output."""
        if not self.two_head:
            return self.w_q, np.zeros_like(self.w_l)
        uq = self.w_q / np.linalg.norm(self.w_q)
        ul = self.w_l / np.linalg.norm(self.w_l)
        return self.g_q * uq, self.g_l * ul

    def to_json(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "kind": "reward_model", "mode": self.mode,
                "body": self.body.tolist(), "w_q": self.w_q.tolist(), "w_l": self.w_l.tolist(),
                "g_q": self.g_q, "g_l": self.g_l}

    @classmethod
    def from_json(cls, d: dict) -> "RMParams":
        if d.get("version") != CHECKPOINT_VERSION or d.get("kind") != "reward_model":
            raise ValueError(f"unsupported reward model checkpoint (version={d.get('version')})")
        return cls(np.array(d["body"]), np.array(d["w_q"]), np.array(d["w_l"]),
                   float(d["g_q"]), float(d["g_l"]), d["mode"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "RMParams":
        return cls.from_json(json.loads(Path(path).read_text()))


# -- forward ---------------------------------------------------------------

def _body(params: RMParams, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != params.body.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} != {params.body.shape[1]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite features")
    return np.tanh(f @ params.body.T)


def rm_forward(params: RMParams, f: np.ndarray):
    """(r_Q, r_L) for one feature vector or a batch of them (rows)."""
    z = _body(params, f)
    eq, el = params.effective_heads()
    return z @ eq, z @ el


def reward(params: RMParams, f: np.ndarray, head="full"):
    r_q, r_l = rm_forward(params, f)
    if head == "quality":
        return r_q
    if head == "length":
        return r_l
    if head == "full":
        return r_q + r_l
    raise ValueError(f"unknown head selector {head!r}")


def score_responses(params, prompt_responses, t_max, n_keywords, head="full"):
    """Reward for a list of (prompt, response)."""
    f = np.array([response_features(p, y, t_max, n_keywords) for p, y in prompt_responses])
    return reward(params, f.reshape(-1, FEATURE_DIM), head)


# -- losses ----------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def ranking_loss_from_margin(delta) -> float:
    """mean of -log sigmoid(delta) as softplus(-delta)."""
    return float(np.mean(softplus(-np.asarray(delta, dtype=float))))


def ranking_loss(params: RMParams, batch: PairBatch) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    delta = reward(params, batch.f_chosen) - reward(params, batch.f_rejected)
    return ranking_loss_from_margin(delta)


def pearson_batch(xs, ys) -> float:
    return pearson(xs, ys)


def length_corr_loss(r_q, r_l, lengths):
    """(|rho(r_Q, L)| - rho(r_L, L), degenerate) over the whole batch."""
    lengths = np.asarray(lengths, dtype=float)
    if lengths.size < 2:
        raise ValueError("length correlation needs a batch of at least 2")
    degenerate = is_degenerate(lengths)
    if degenerate:
        return 0.0, True
    return abs(pearson(r_q, lengths)) - pearson(r_l, lengths), False


def orthogonality_loss(params: RMParams) -> float:
    if not params.two_head:
        raise UnsupportedModeError("orthogonality loss needs two heads")
    uq = params.w_q / np.linalg.norm(params.w_q)
    ul = params.w_l / np.linalg.norm(params.w_l)
    return float(abs(uq @ ul))


@dataclass(frozen=True)
class RMHyper:
    lambda_l: float = 1.0
    lambda_o: float = 1.0
    lr: float = 1e-2
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    hidden: int = 16
    val_fraction: float = 0.1
    train_gains: bool = True
    # head whose length correlation is tracked in the history
    report_head: str = "auto"


def loss_components(params: RMParams, batch: PairBatch) -> dict:
    rqc, rlc = rm_forward(params, batch.f_chosen)
    rqr, rlr = rm_forward(params, batch.f_rejected)
    out = {"ranking": ranking_loss_from_margin(rqc + rlc - rqr - rlr)}
    if params.two_head:
        out["corr_chosen"] = length_corr_loss(rqc, rlc, batch.len_chosen)[0]
        out["corr_rejected"] = length_corr_loss(rqr, rlr, batch.len_rejected)[0]
        out["orth"] = orthogonality_loss(params)
    return out


def odin_total_loss(params: RMParams, batch: PairBatch, hyper: RMHyper) -> float:
    if not params.two_head:
        raise UnsupportedModeError("combined loss needs two heads")
    c = loss_components(params, batch)
    return (c["ranking"] + hyper.lambda_l * (c["corr_chosen"] + c["corr_rejected"])
            + hyper.lambda_o * c["orth"])


def total_loss(params: RMParams, batch: PairBatch, hyper: RMHyper) -> float:
    if params.two_head:
        return odin_total_loss(params, batch, hyper)
    return ranking_loss(params, batch)


# -- gradients -------------------------------------------------------------

def _corr_term_grad(r_q, r_l, lengths):
    """d(|rho(r_Q,L)| - rho(r_L,L)) / d r_Q, d r_L."""
    if is_degenerate(lengths):
        return np.zeros_like(r_q), np.zeros_like(r_l)
    rho_q, gq = pearson_grad(r_q, lengths)
    _, gl = pearson_grad(r_l, lengths)
    return np.sign(rho_q) * gq, -gl


def _normalize_grad(w, u_grad):
    """Chain rule through u = w / |w|: project out the radial part."""
    n = np.linalg.norm(w)
    u = w / n
    return (u_grad - u * (u @ u_grad)) / n


def rm_grad(params: RMParams, batch: PairBatch, hyper: RMHyper | None = None) -> dict:
    """Gradient of ``total_loss`` keyed like ``RMParams.arrays()``."""
    hyper = hyper or RMHyper()
    n = len(batch)
    zc = _body(params, batch.f_chosen)
    zr = _body(params, batch.f_rejected)
    eq, el = params.effective_heads()
    rqc, rlc = zc @ eq, zc @ el
    rqr, rlr = zr @ eq, zr @ el
    delta = rqc + rlc - rqr - rlr
    # d ranking / d delta_i
    gd = -sigmoid(-delta) / n

    # dLoss/dr for each (response, head)
    a_qc, a_lc = gd.copy(), gd.copy()
    a_qr, a_lr = -gd, -gd.copy()
    two = params.two_head
    if two and hyper.lambda_l:
        gq, gl = _corr_term_grad(rqc, rlc, batch.len_chosen)
        a_qc = a_qc + hyper.lambda_l * gq
        a_lc = a_lc + hyper.lambda_l * gl
        gq, gl = _corr_term_grad(rqr, rlr, batch.len_rejected)
        a_qr = a_qr + hyper.lambda_l * gq
        a_lr = a_lr + hyper.lambda_l * gl

    # head vectors: r = z . e
    de_q = zc.T @ a_qc + zr.T @ a_qr
    de_l = zc.T @ a_lc + zr.T @ a_lr
    # body: dL/dz_i = a_q,i e_q + a_l,i e_l
    dzc = np.outer(a_qc, eq) + np.outer(a_lc, el)
    dzr = np.outer(a_qr, eq) + np.outer(a_lr, el)
    d_body = (dzc * (1 - zc ** 2)).T @ batch.f_chosen + (dzr * (1 - zr ** 2)).T @ batch.f_rejected

    grads = {"body": d_body}
    if not two:
        grads.update(w_q=de_q, w_l=np.zeros_like(params.w_l), g_q=np.asarray(0.0), g_l=np.asarray(0.0))
        return grads

    uq = params.w_q / np.linalg.norm(params.w_q)
    ul = params.w_l / np.linalg.norm(params.w_l)
    # e = g u  ->  dL/du = g dL/de, dL/dg = u . dL/de
    du_q = params.g_q * de_q
    du_l = params.g_l * de_l
    dg_q = float(uq @ de_q)
    dg_l = float(ul @ de_l)
    if hyper.lambda_o:
        s = np.sign(uq @ ul)
        du_q = du_q + hyper.lambda_o * s * ul
        du_l = du_l + hyper.lambda_o * s * uq
    grads["w_q"] = _normalize_grad(params.w_q, du_q)
    grads["w_l"] = _normalize_grad(params.w_l, du_l)
    grads["g_q"] = np.asarray(dg_q if hyper.train_gains else 0.0)
    grads["g_l"] = np.asarray(dg_l if hyper.train_gains else 0.0)
    return grads


# -- evaluation helpers ----------------------------------------------------

def rm_validation_accuracy(params: RMParams, batch: PairBatch, head="full") -> float:
    """Fraction of pairs scored higher for chosen; exact ties count half."""
    if len(batch) == 0:
        return float("nan")
    rc = reward(params, batch.f_chosen, head)
    rr = reward(params, batch.f_rejected, head)
    return float(np.mean((rc > rr) + 0.5 * (rc == rr)))


def rm_length_report(params: RMParams, batch: PairBatch, head="full"):
    """Correlations between the selected head and length over every response."""
    f = np.vstack([batch.f_chosen, batch.f_rejected])
    lengths = np.concatenate([batch.len_chosen, batch.len_rejected])
    return correlation_report(reward(params, f, head), lengths)


def default_head(params: RMParams) -> str:
    return "quality" if params.two_head else "full"


# -- training --------------------------------------------------------------

@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("-inf")

    COLUMNS = ("epoch", "ranking_loss", "corr_loss", "orth_loss", "val_acc", "rho", "r_s", "tau")
    VERSION = 1

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# history_version={self.VERSION}\n")
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in self.COLUMNS})


def split_train_val(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 101])).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return perm[n_val:], perm[:n_val]


def train_rm(train: PairBatch, val: PairBatch, hyper: RMHyper = RMHyper(), mode=TWO_HEAD,
             init: RMParams | None = None):
    """Adam on minibatches; returns the best-validation-accuracy parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 202]))
    params = init.copy() if init is not None else RMParams.init(rng, h=hyper.hidden, mode=mode)
    head = default_head(params) if hyper.report_head == "auto" else hyper.report_head
    arrays = params.arrays()
    opt = Adam(arrays, lr=hyper.lr)
    hist = TrainHistory()
    best = params.copy()
    n = len(train)
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        nb = 0
        for s in range(0, n, hyper.batch_size):
            idx = perm[s:s + hyper.batch_size]
            if len(idx) < 2:
                continue
            mb = train.take(idx)
            params = params.with_arrays(arrays)
            comps = loss_components(params, mb)
            loss = (comps["ranking"] + hyper.lambda_l * (comps.get("corr_chosen", 0) + comps.get("corr_rejected", 0))
                    + hyper.lambda_o * comps.get("orth", 0)) if params.two_head else comps["ranking"]
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", snapshot=params.to_json())
            g = rm_grad(params, mb, hyper)
            arrays = opt.step(arrays, g)
            if params.two_head:
                # gains stay positive
                arrays["g_q"] = np.maximum(arrays["g_q"], 1e-6)
                arrays["g_l"] = np.maximum(arrays["g_l"], 1e-6)
            sums += [comps["ranking"], comps.get("corr_chosen", 0) + comps.get("corr_rejected", 0),
                     comps.get("orth", 0)]
            nb += 1
        params = params.with_arrays(arrays)
        acc = rm_validation_accuracy(params, val, head)
        rep = rm_length_report(params, val, head)
        sums /= max(nb, 1)
        hist.rows.append({"epoch": epoch, "ranking_loss": sums[0], "corr_loss": sums[1], "orth_loss": sums[2],
                          "val_acc": acc, "rho": rep.pearson, "r_s": rep.spearman, "tau": rep.kendall})
        log.debug("epoch %d loss %.4f val_acc %.4f rho %.3f", epoch, sums[0], acc, rep.pearson)
        if acc > hist.best_val_acc:
            hist.best_val_acc, hist.best_epoch = acc, epoch
            best = params.copy()
    return best, hist
