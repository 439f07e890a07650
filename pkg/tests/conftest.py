import numpy as np
import pytest


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# A pipeline small enough to run end to end in a few seconds.
SMALL_CONFIG = {
    "data": {"n_pairs": 1500, "calibration_pairs": 800},
    "rm": {"epochs": 4},
    "sft": {"n_prompts": 80, "epochs": 8},
    "rl": {"n_prompts": 60, "n_dev_prompts": 8, "iterations": 4, "n_rollouts": 16, "minibatch": 8,
           "eval_every": 2},
    "eval": {"n_prompts": 30},
}


@pytest.fixture
def small_config(tmp_path):
    from odinlab.experiment import apply_overrides, deep_merge, load_config
    cfg = deep_merge(load_config(None), SMALL_CONFIG)
    return apply_overrides(cfg, {"out_dir": str(tmp_path / "runs")})


@pytest.fixture(scope="session")
def default_out(tmp_path_factory):
    """Artifact root shared by every test that runs the default pipeline."""
    return tmp_path_factory.mktemp("default_pipeline")


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_LINES: dict = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.details = number, title, []

    def note(self, text):
        self.details.append(str(text))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        extra = "; ".join(self.details)
        if exc is not None:
            msg = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
            extra = f"{extra}; {msg}" if extra else msg
        ACCEPTANCE_LINES[self.number] = f"criterion {self.number:>2} {status}: {self.title}" + (f" [{extra}]" if extra else "")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
