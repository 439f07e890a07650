"""Synthetic prompts, demonstrations and length-biased preference pairs.

Token layout for a vocabulary with ``K`` keyword ids and ``F`` filler ids::

    0 .. K-1        keywords
    K .. K+F-1      filler
    K+F             EOS

A prompt asks for a handful of keywords.  Ground-truth quality rewards
covering them and mildly penalises repeating them; filler is free, so
verbosity beyond coverage never helps.  The synthetic annotator adds a
linear bonus for length, which is what a reward model can latch onto.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration values."""


class CalibrationError(RuntimeError):
    """Target chosen-longer fraction cannot be reached."""

    def __init__(self, msg, achievable=None):
        super().__init__(msg)
        self.achievable = achievable


# Sub-stream tags for np.random.SeedSequence entropy.
STREAM_PROMPTS = 11
STREAM_PAIRS = 23
STREAM_DEMOS = 37


@dataclass(frozen=True)
class Prompt:
    id: int
    keywords: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.keywords)


@dataclass(frozen=True)
class Response:
    """Token ids; when ``terminated`` the last token is EOS."""

    tokens: tuple[int, ...]
    terminated: bool = True

    @property
    def length(self) -> int:
        return len(self.tokens) - int(self.terminated)

    @property
    def body(self) -> tuple[int, ...]:
        return self.tokens[:-1] if self.terminated else self.tokens


@dataclass(frozen=True)
class Vocab:
    n_keywords: int = 20
    n_filler: int = 11
    t_max: int = 64

    @property
    def eos(self) -> int:
        return self.n_keywords + self.n_filler

    @property
    def size(self) -> int:
        return self.n_keywords + self.n_filler + 1

    def is_filler(self, tok: int) -> bool:
        return self.n_keywords <= tok < self.eos

    def response(self, tokens: Sequence[int]) -> Response:
        """Build a validated response, appending nothing."""
        tokens = tuple(int(t) for t in tokens)
        for i, t in enumerate(tokens):
            if not 0 <= t < self.size:
                raise ValueError(f"token id {t} outside vocabulary of size {self.size}")
            if t == self.eos and i != len(tokens) - 1:
                raise ValueError("EOS may only appear as the last token")
        terminated = bool(tokens) and tokens[-1] == self.eos
        r = Response(tokens, terminated)
        if r.length > self.t_max:
            raise ValueError(f"response length {r.length} exceeds t_max={self.t_max}")
        if not terminated and r.length != self.t_max and tokens:
            # unterminated responses only arise from truncation
            raise ValueError("unterminated response shorter than t_max")
        return r


@dataclass(frozen=True)
class DemoSampler:
    """Scripted demonstrator: each keyword once, geometric filler runs, EOS.

    The error rates perturb the script; with all of them at zero this is the
    clean demonstrator used for behaviour cloning.  A skipped slot drops its
    keyword but keeps its filler run.  ``filler_counts`` fixes the run length
    per slot (shared between the two responses of a pair); ``filler_extra``
    then adds an independent geometric run on top.  ``skip_per_keyword``
    raises the skip rate on prompts with more keywords (scaled by
    (k - 2) / 3) and ``substitute_verbose`` raises the substitution rate with
    the prompt's relative verbosity in [0, 1].
    """

    filler_p: float = 0.5
    filler_jitter: float = 0.0
    p_skip: float = 0.0
    p_substitute: float = 0.0
    p_repeat: float = 0.0
    skip_per_keyword: float = 0.0
    substitute_verbose: float = 0.0
    filler_extra: float = 0.0

    def sample(self, prompt: Prompt, vocab: Vocab, rng: np.random.Generator,
               filler_p: float | None = None, verbosity: float = 0.0,
               filler_counts=None, p_substitute: float | None = None) -> Response:
        fp = self.filler_p if filler_p is None else filler_p
        if self.filler_jitter > 0:
            fp = float(np.clip(fp + self.filler_jitter * rng.standard_normal(), 0.0, 0.95))
        p_skip = min(0.9, self.p_skip + self.skip_per_keyword * (prompt.k - 2) / 3)
        base_sub = self.p_substitute if p_substitute is None else p_substitute
        p_sub = min(0.9 - p_skip, base_sub + self.substitute_verbose * verbosity)
        out: list[int] = []
        others = [w for w in range(vocab.n_keywords) if w not in prompt.keywords]

        def emit(tok):
            if len(out) < vocab.t_max:
                out.append(tok)

        def filler():
            emit(vocab.n_keywords + int(rng.integers(vocab.n_filler)))

        for i, kw in enumerate(prompt.keywords):
            u = rng.random()
            if u < p_skip:
                pass
            elif u < p_skip + p_sub and others:
                emit(int(rng.choice(others)))
            else:
                emit(kw)
                while rng.random() < self.p_repeat:
                    emit(kw)
            if filler_counts is None:
                while rng.random() < fp:
                    filler()
            else:
                for _ in range(filler_counts[i]):
                    filler()
                while rng.random() < self.filler_extra:
                    filler()
        if len(out) < vocab.t_max:
            out.append(vocab.eos)
            return Response(tuple(out), True)
        return Response(tuple(out), False)


CLEAN_DEMONSTRATOR = DemoSampler()

# Default pair of perturbed demonstrators for the preference corpus.  Their
# filler rate is overridden by a per-prompt verbosity shared by both
# responses, so most length variance lies between prompts.
DEFAULT_PAIR_SAMPLER = DemoSampler(p_skip=0.35, p_repeat=0.14, filler_extra=0.13)
DEFAULT_PAIR_SAMPLERS = (DEFAULT_PAIR_SAMPLER, DEFAULT_PAIR_SAMPLER)


@dataclass(frozen=True)
class CorpusConfig:
    n_pairs: int = 2000
    n_keywords: int = 20
    n_filler: int = 11
    t_max: int = 64
    length_bias: float = 0.0
    noise_std: float = 0.274
    seed: int = 0
    c_rep: float = 0.5
    # annotators call pairs closer than this in quality a tie; ties are dropped
    min_quality_gap: float = 0.1
    # per-prompt filler continuation probability ~ U(lo, hi); None keeps
    # each sampler's own filler_p
    verbosity_range: tuple[float, float] | None = (0.0, 0.85)
    max_retries: int = 20
    # both responses of a pair share their per-slot filler run lengths
    shared_filler: bool = True
    # per-prompt substitution rate ~ U(lo, hi) shared by both responses;
    # None keeps each sampler's own p_substitute
    difficulty_range: tuple[float, float] | None = (0.0, 0.52)
    # draw the mean filler run length uniformly instead of the continuation
    # probability, which spreads prompt lengths more evenly
    uniform_filler_mean: bool = True
    samplers: tuple[DemoSampler, DemoSampler] = field(default=DEFAULT_PAIR_SAMPLERS)

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_keywords, self.n_filler, self.t_max)

    def validate(self):
        if self.n_pairs <= 0:
            raise ConfigError("n_pairs must be positive")
        if self.n_keywords < 5 or self.n_filler < 1:
            raise ConfigError("need at least 5 keyword ids and 1 filler id")
        if self.t_max < 8:
            raise ConfigError("t_max must be >= 8")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.min_quality_gap < 0:
            raise ConfigError("min_quality_gap must be >= 0")
        if self.verbosity_range is not None:
            lo, hi = self.verbosity_range
            if not 0 <= lo <= hi < 1:
                raise ConfigError("verbosity_range must satisfy 0 <= lo <= hi < 1")
        if self.difficulty_range is not None:
            lo, hi = self.difficulty_range
            if not 0 <= lo <= hi <= 0.9:
                raise ConfigError("difficulty_range must satisfy 0 <= lo <= hi <= 0.9")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samplers"] = [asdict(s) for s in self.samplers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        if "samplers" in d:
            d["samplers"] = tuple(DemoSampler(**s) for s in d["samplers"])
        for key in ("verbosity_range", "difficulty_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, path) -> "CorpusConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e


@dataclass(frozen=True)
class PreferencePair:
    prompt: Prompt
    chosen: Response
    rejected: Response
    true_utilities: tuple[float, float]


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, sub-stream, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


def gen_prompts(config: CorpusConfig, n: int, offset: int = 0) -> list[Prompt]:
    """``n`` prompts with 2..5 distinct keywords each; ids start at ``offset``."""
    if n <= 0:
        raise ConfigError("number of prompts must be positive")
    config.validate()
    prompts = []
    for i in range(offset, offset + n):
        rng = stream(config.seed, STREAM_PROMPTS, i)
        k = int(rng.integers(2, 6))
        kws = rng.choice(config.n_keywords, size=k, replace=False)
        prompts.append(Prompt(i, tuple(int(w) for w in kws)))
    return prompts


def keyword_counts(prompt: Prompt, response: Response) -> tuple[int, int]:
    """(distinct prompt keywords present, total prompt-keyword occurrences)."""
    kws = set(prompt.keywords)
    hits = [t for t in response.body if t in kws]
    return len(set(hits)), len(hits)


def true_quality(prompt: Prompt, response: Response, t_max: int, c_rep: float = 0.5) -> float:
    distinct, total = keyword_counts(prompt, response)
    coverage = distinct / prompt.k
    return coverage - c_rep * (total - distinct) / t_max


def annotator_utility(quality: float, length: int, t_max: int, length_bias: float, noise: float = 0.0):
    return quality + length_bias * length / t_max + noise


def _pair_draws(config: CorpusConfig, prompt: Prompt):
    """Yield up to ``max_retries`` candidate (y_a, y_b, eps_a, eps_b) draws.

    The draws depend only on (seed, prompt id), never on the length bias, so
    the same responses and noise are reused as the bias is varied.
    """
    rng = stream(config.seed, STREAM_PAIRS, prompt.id)
    vocab = config.vocab
    sa, sb = config.samplers
    for _ in range(config.max_retries):
        v, x = None, 0.0
        if config.verbosity_range is not None:
            lo, hi = config.verbosity_range
            if config.uniform_filler_mean:
                # uniform in the mean filler run length p / (1 - p)
                m = float(rng.uniform(lo / (1 - lo), hi / (1 - hi)))
                v = m / (1 + m)
            else:
                v = float(rng.uniform(lo, hi))
            x = (v - lo) / (hi - lo) if hi > lo else 0.0
        counts = None
        if config.shared_filler:
            fp = sa.filler_p if v is None else v
            counts = [int(c) for c in rng.geometric(1.0 - fp, size=prompt.k) - 1]
        d = None
        if config.difficulty_range is not None:
            d = float(rng.uniform(*config.difficulty_range))
        ya = sa.sample(prompt, vocab, rng, v, x, counts, d)
        yb = sb.sample(prompt, vocab, rng, v, x, counts, d)
        ea, eb = config.noise_std * rng.standard_normal(2)
        yield ya, yb, float(ea), float(eb)


def _label_pair(config, prompt, draws) -> PreferencePair | None:
    for ya, yb, ea, eb in draws:
        if ya.tokens == yb.tokens:
            continue
        qa = true_quality(prompt, ya, config.t_max, config.c_rep)
        qb = true_quality(prompt, yb, config.t_max, config.c_rep)
        if abs(qa - qb) < config.min_quality_gap:
            continue
        ua = annotator_utility(qa, ya.length, config.t_max, config.length_bias, ea)
        ub = annotator_utility(qb, yb.length, config.t_max, config.length_bias, eb)
        if ua == ub and config.noise_std == 0:
            # exact tie carries no preference signal; redraw
            continue
        # ties go to the first-sampled response
        if ua >= ub:
            return PreferencePair(prompt, ya, yb, (ua, ub))
        return PreferencePair(prompt, yb, ya, (ub, ua))
    return None


def gen_preference_corpus(config: CorpusConfig, policies=None) -> list[PreferencePair]:
    """One labelled pair per prompt; prompts whose sampler keeps producing
    identical responses are skipped after ``max_retries`` draws."""
    config.validate()
    if policies is not None:
        config = replace(config, samplers=tuple(policies))
    prompts = gen_prompts(config, config.n_pairs)
    out = []
    for p in prompts:
        pair = _label_pair(config, p, _pair_draws(config, p))
        if pair is not None:
            out.append(pair)
    return out


def chosen_longer_fraction(corpus: Sequence[PreferencePair]) -> float:
    if not corpus:
        return float("nan")
    return sum(p.chosen.length > p.rejected.length for p in corpus) / len(corpus)


class _CachedDraws:
    """Pre-drawn candidates so bisection re-labels without re-sampling."""

    def __init__(self, config):
        self.config = config
        self.items = [(p, list(_pair_draws(config, p))) for p in gen_prompts(config, config.n_pairs)]

    def fraction(self, length_bias: float) -> float:
        cfg = replace(self.config, length_bias=length_bias)
        pairs = [_label_pair(cfg, p, iter(d)) for p, d in self.items]
        return chosen_longer_fraction([q for q in pairs if q is not None])


def calibrate_length_bias(config: CorpusConfig, target_frac: float, tol: float = 0.03,
                          lo: float = 0.0, hi: float = 20.0, iters: int = 40) -> float:
    """Bisect the annotator length bias until the chosen-longer fraction of
    the fixed-seed corpus lands within ``tol`` of ``target_frac``.

    Bisection continues past ``tol`` towards the target so the returned value
    also holds on fresh seeds.
    """
    if not 0 < target_frac < 1:
        raise CalibrationError(f"target fraction {target_frac} outside (0, 1)")
    cache = _CachedDraws(config.validate())
    f_lo, f_hi = cache.fraction(lo), cache.fraction(hi)
    if not (f_lo - tol <= target_frac <= f_hi + tol):
        raise CalibrationError(
            f"target {target_frac:.3f} unreachable; achievable range [{f_lo:.3f}, {f_hi:.3f}]",
            achievable=(f_lo, f_hi))
    if target_frac <= f_lo:
        return lo
    if target_frac >= f_hi:
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = cache.fraction(mid)
        if abs(f - target_frac) < 1e-3:
            return mid
        if f < target_frac:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def split_by_length(corpus: Iterable[PreferencePair]):
    """(chosen_longer, rejected_longer); equal-length pairs go in neither."""
    chosen_longer, rejected_longer = [], []
    for p in corpus:
        if p.chosen.length > p.rejected.length:
            chosen_longer.append(p)
        elif p.chosen.length < p.rejected.length:
            rejected_longer.append(p)
    return chosen_longer, rejected_longer


def gen_demonstrations(config: CorpusConfig, prompts: Sequence[Prompt],
                       sampler: DemoSampler = CLEAN_DEMONSTRATOR) -> list[tuple[Prompt, Response]]:
    vocab = config.vocab
    return [(p, sampler.sample(p, vocab, stream(config.seed, STREAM_DEMOS, p.id))) for p in prompts]


# -- serialization ---------------------------------------------------------

def pair_to_record(pair: PreferencePair) -> dict:
    return {
        "prompt": {"id": pair.prompt.id, "keywords": list(pair.prompt.keywords)},
        "chosen_tokens": list(pair.chosen.tokens),
        "rejected_tokens": list(pair.rejected.tokens),
        "lengths": [pair.chosen.length, pair.rejected.length],
        "true_utilities": list(pair.true_utilities),
    }


def pair_from_record(rec: dict, vocab: Vocab) -> PreferencePair:
    prompt = Prompt(int(rec["prompt"]["id"]), tuple(rec["prompt"]["keywords"]))
    chosen = vocab.response(rec["chosen_tokens"])
    rejected = vocab.response(rec["rejected_tokens"])
    if [chosen.length, rejected.length] != list(rec["lengths"]):
        raise ValueError(f"length mismatch in record for prompt {prompt.id}")
    return PreferencePair(prompt, chosen, rejected, tuple(rec["true_utilities"]))


def write_corpus(path, corpus: Sequence[PreferencePair]):
    lines = [json.dumps(pair_to_record(p), sort_keys=True) for p in corpus]
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path, vocab: Vocab) -> list[PreferencePair]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(pair_from_record(json.loads(line), vocab))
    return out


def corpus_stats(corpus: Sequence[PreferencePair], t_max: int) -> dict:
    lengths = np.array([[p.chosen.length, p.rejected.length] for p in corpus])
    edges = np.linspace(0, t_max, 9)
    return {
        "n_pairs": len(corpus),
        "chosen_longer_fraction": chosen_longer_fraction(corpus),
        "equal_length_fraction": float(np.mean(lengths[:, 0] == lengths[:, 1])),
        "mean_length_chosen": float(lengths[:, 0].mean()),
        "mean_length_rejected": float(lengths[:, 1].mean()),
        "histogram_edges": edges.tolist(),
        "histogram_chosen": np.histogram(lengths[:, 0], edges)[0].tolist(),
        "histogram_rejected": np.histogram(lengths[:, 1], edges)[0].tolist(),
    }
