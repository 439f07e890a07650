import math
from dataclasses import replace
from decimal import Decimal, getcontext

import numpy as np
import pytest

from odinlab.correlation import pearson
from odinlab.rm import (FEATURE_DIM, SINGLE, TWO_HEAD, PairBatch, RMHyper, RMParams, UnsupportedModeError,
                        length_corr_loss, loss_components, odin_total_loss, orthogonality_loss, ranking_loss,
                        ranking_loss_from_margin, reward, rm_forward, rm_grad, rm_length_report,
                        rm_validation_accuracy, response_features, split_train_val, total_loss, train_rm)
from odinlab.synthdata import CorpusConfig, Prompt, Response, gen_preference_corpus

from conftest import central_diff, rel_err


def random_batch(rng, n=24, d=FEATURE_DIM):
    return PairBatch(rng.normal(size=(n, d)), rng.normal(size=(n, d)),
                     rng.integers(1, 40, size=n).astype(float), rng.integers(1, 40, size=n).astype(float))


def random_params(rng, mode=TWO_HEAD, h=6):
    p = RMParams.init(rng, h=h, mode=mode)
    return replace(p, g_q=float(rng.uniform(0.5, 2)), g_l=float(rng.uniform(0.5, 2)))


def fd_check(params, batch, hyper, loss_fn):
    g = rm_grad(params, batch, hyper)
    arrays = params.arrays()
    for key in ("body", "w_q", "w_l", "g_q", "g_l"):
        if not params.two_head and key in ("w_l", "g_q", "g_l"):
            continue
        if key in ("g_q", "g_l") and not hyper.train_gains:
            continue

        def f(x, key=key):
            a = dict(arrays)
            a[key] = x
            return loss_fn(params.with_arrays(a), batch, hyper)

        num = central_diff(f, np.array(arrays[key], dtype=float))
        assert rel_err(g[key], num, floor=1e-4) < 1e-4, key


# -- forward pass ------------------------------------------------------------

def test_forward_hand_examples():
    # body output e_1: choose body so tanh(Bf) = [tanh(big), 0] ~ e_1
    p = RMParams(np.array([[50.0], [0.0]]), np.array([3.0, 4.0]), np.array([0.0, 1.0]), 1.0, 1.0, TWO_HEAD)
    rq, rl = rm_forward(p, np.array([1.0]))
    assert rq == pytest.approx(0.6, abs=1e-12)
    assert rl == pytest.approx(0.0, abs=1e-12)
    rq, rl = rm_forward(p, np.array([0.0]))
    assert rq == 0.0 and rl == 0.0


def test_forward_matches_high_precision_oracle(rng):
    getcontext().prec = 40
    p = random_params(rng, h=5)
    f = rng.normal(size=(3, FEATURE_DIM))
    out = reward(p, f, "full")
    for i in range(3):
        z = []
        for j in range(5):
            s = sum(Decimal(float(p.body[j, k])) * Decimal(float(f[i, k])) for k in range(FEATURE_DIM))
            z.append(Decimal(math.tanh(float(s))))
        nq = sum(Decimal(float(w)) ** 2 for w in p.w_q).sqrt()
        nl = sum(Decimal(float(w)) ** 2 for w in p.w_l).sqrt()
        rq = Decimal(p.g_q) * sum(Decimal(float(w)) * zj for w, zj in zip(p.w_q, z)) / nq
        rl = Decimal(p.g_l) * sum(Decimal(float(w)) * zj for w, zj in zip(p.w_l, z)) / nl
        assert float(rq + rl) == pytest.approx(out[i], abs=1e-12)


def test_weight_norm_invariance(rng):
    p = random_params(rng)
    b = random_batch(rng)
    scaled = replace(p, w_q=p.w_q * 7.3, w_l=p.w_l * 0.02)
    f = np.vstack([b.f_chosen, b.f_rejected])
    np.testing.assert_allclose(reward(p, f), reward(scaled, f), atol=1e-12, rtol=0)
    assert odin_total_loss(p, b, RMHyper()) == pytest.approx(odin_total_loss(scaled, b, RMHyper()), abs=1e-12)
    eq, el = p.effective_heads()
    assert np.linalg.norm(eq) == pytest.approx(p.g_q) and np.linalg.norm(el) == pytest.approx(p.g_l)


# -- losses ------------------------------------------------------------------

def test_ranking_loss_closed_forms():
    assert ranking_loss_from_margin(np.zeros(5)) == pytest.approx(math.log(2), abs=1e-15)
    assert ranking_loss_from_margin([50.0]) < 1e-20
    assert ranking_loss_from_margin([1.0]) == pytest.approx(0.313261687518223, abs=1e-15)
    # stable for very negative margins
    assert ranking_loss_from_margin([-800.0]) == pytest.approx(800.0)


def test_length_corr_loss_hand_values():
    L = np.array([1.0, 2, 3, 4, 5])
    assert length_corr_loss(np.ones(5), L, L)[0] == pytest.approx(-1.0)
    assert length_corr_loss(L, -L, L)[0] == pytest.approx(2.0)
    # degenerate lengths contribute nothing
    assert length_corr_loss(L, L, np.full(5, 3.0)) == (0.0, True)


def test_length_corr_loss_matches_oracle(rng):
    for _ in range(5):
        rq, rl, L = rng.normal(size=(3, 30))
        assert length_corr_loss(rq, rl, L)[0] == pytest.approx(abs(pearson(rq, L)) - pearson(rl, L), abs=1e-14)


def test_orthogonality_loss_hand_values():
    body = np.zeros((2, FEATURE_DIM))
    mk = lambda a, b: RMParams(body, np.array(a, float), np.array(b, float))
    assert orthogonality_loss(mk([1, 0], [0, 2])) == 0.0
    assert orthogonality_loss(mk([1, 2], [1, 2])) == pytest.approx(1.0)
    assert orthogonality_loss(mk([1 / math.sqrt(2), 1 / math.sqrt(2)], [1, 0])) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(UnsupportedModeError):
        orthogonality_loss(replace(mk([1, 0], [0, 1]), mode=SINGLE))


def test_combined_loss_reductions(rng):
    p = random_params(rng)
    b = random_batch(rng)
    assert odin_total_loss(p, b, RMHyper(lambda_l=0, lambda_o=0)) == ranking_loss(p, b)
    c = loss_components(p, b)
    want = c["ranking"] + 0.7 * (c["corr_chosen"] + c["corr_rejected"]) + 1.3 * c["orth"]
    assert odin_total_loss(p, b, RMHyper(lambda_l=0.7, lambda_o=1.3)) == pytest.approx(want, abs=1e-14)


def test_combined_loss_at_known_component_values():
    # zero body output -> delta = 0 (ln 2); r_Q constant, r_L = L on each side -> -1 twice; orthogonal heads
    h = 2
    body = np.zeros((h, FEATURE_DIM))
    body[0, 0] = 1e-3  # z_0 = tanh(1e-3 f_0), linear in f_0 to within 1e-9 relative
    p = RMParams(body, np.array([0.0, 1.0]), np.array([1.0, 0.0]), 1.0, 1.0)
    Lc, Lr = np.array([1.0, 2, 3]), np.array([2.0, 5, 4])
    fc = np.zeros((3, FEATURE_DIM)); fc[:, 0] = Lc
    fr = np.zeros((3, FEATURE_DIM)); fr[:, 0] = Lr
    b = PairBatch(fc, fr, Lc, Lr)
    c = loss_components(p, b)
    assert c["corr_chosen"] == pytest.approx(-1.0) and c["corr_rejected"] == pytest.approx(-1.0)
    assert c["orth"] == 0.0
    # ranking term differs from ln 2 only through tiny r_L margins
    assert odin_total_loss(p, b, RMHyper()) == pytest.approx(math.log(2) - 2, abs=2e-3)


def test_global_batch_correlation_is_not_sharded(rng):
    # the loss uses the whole batch; averaging over shards gives a different number
    rq, rl, L = rng.normal(size=(3, 40))
    whole = length_corr_loss(rq, rl, L)[0]
    again = length_corr_loss(*(np.concatenate([v[:20], v[20:]]) for v in (rq, rl, L)))[0]
    assert whole == again


def test_two_head_capacity_matches_single_head(rng):
    p2 = random_params(rng)
    b = random_batch(rng)
    eq, el = p2.effective_heads()
    p1 = RMParams(p2.body, eq + el, np.ones_like(el), mode=SINGLE)
    assert ranking_loss(p2, b) == pytest.approx(ranking_loss(p1, b), abs=1e-12)


# -- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng)
    p = random_params(rng)
    rank_only = RMHyper(lambda_l=0, lambda_o=0)
    corr_only = RMHyper(lambda_l=1, lambda_o=0)
    fd_check(p, b, rank_only, total_loss)
    fd_check(p, b, RMHyper(), total_loss)
    fd_check(p, b, RMHyper(lambda_l=0.5, lambda_o=2.0, train_gains=False), total_loss)
    # individual terms: corr-only and orth-only gradients by differencing hypers
    g_all = rm_grad(p, b, corr_only)
    g_rank = rm_grad(p, b, rank_only)
    for key in ("body", "w_q", "w_l"):
        def corr_terms(x, key=key):
            a = dict(p.arrays())
            a[key] = x
            c = loss_components(p.with_arrays(a), b)
            return c["corr_chosen"] + c["corr_rejected"]
        num = central_diff(corr_terms, np.array(p.arrays()[key], dtype=float))
        assert rel_err(g_all[key] - g_rank[key], num, floor=1e-4) < 1e-4
    fd_check(random_params(rng, SINGLE), b, rank_only, total_loss)


def test_gradient_radial_component_vanishes(rng):
    p = random_params(rng)
    g = rm_grad(p, random_batch(rng))
    assert abs(g["w_q"] @ p.w_q) < 1e-12
    assert abs(g["w_l"] @ p.w_l) < 1e-12


def test_gradient_single_pair_at_zero_margin(rng):
    p = RMParams.init(rng, h=4, mode=SINGLE)
    f = rng.normal(size=(1, FEATURE_DIM))
    b = PairBatch(f, f.copy(), np.array([3.0]), np.array([5.0]))
    g = rm_grad(p, b, RMHyper(lambda_l=0, lambda_o=0))
    # delta = 0 and d delta / d params = 0 for identical features
    assert np.allclose(g["body"], 0) and np.allclose(g["w_q"], 0)
    f2 = rng.normal(size=(1, FEATURE_DIM))
    b = PairBatch(f, f2, np.array([3.0]), np.array([5.0]))
    p = replace(p, w_q=np.zeros(4))  # delta = 0 exactly
    g = rm_grad(p, b, RMHyper(lambda_l=0, lambda_o=0))
    z = np.tanh(f @ p.body.T) - np.tanh(f2 @ p.body.T)
    np.testing.assert_allclose(g["w_q"], -0.5 * z.ravel(), atol=1e-15)


# -- training and evaluation ---------------------------------------------------

def test_accuracy_edge_cases(rng):
    b = random_batch(rng)
    p = RMParams(np.zeros((2, FEATURE_DIM)), np.ones(2), np.ones(2), mode=SINGLE)
    assert rm_validation_accuracy(p, b) == 0.5


def test_length_report_extremes():
    # reward = normalised length through feature 8 and a linear-ish body
    body = np.zeros((1, FEATURE_DIM)); body[0, 8] = 1e-3
    p = RMParams(body, np.ones(1), np.ones(1), mode=SINGLE)
    L = np.arange(1.0, 11)
    f = np.zeros((10, FEATURE_DIM)); f[:, 8] = L / 64
    b = PairBatch(f[:5], f[5:], L[:5], L[5:])
    r = rm_length_report(p, b)
    assert (r.pearson, r.spearman, r.kendall) == pytest.approx((1, 1, 1))
    p0 = RMParams(np.zeros((1, FEATURE_DIM)), np.ones(1), np.ones(1), mode=SINGLE)
    assert rm_length_report(p0, b).as_dict() == {"pearson": 0.0, "spearman": 0.0, "kendall": 0.0}


def test_features_shape_and_values():
    p = Prompt(0, (1, 2, 3))
    y = Response((1, 1, 25, 2, 31), True)
    f = response_features(p, y, 64, 20)
    assert f.shape == (FEATURE_DIM,)
    assert f[0] == pytest.approx(2 / 3) and f[1] == 1 and f[3] == 0
    assert f[6] == pytest.approx(1 / 64) and f[8] == pytest.approx(4 / 64) and f[15] == 1


@pytest.fixture(scope="module")
def small_corpus():
    cfg = CorpusConfig(n_pairs=1500, seed=3, noise_std=0.0, length_bias=0.0)
    c = gen_preference_corpus(cfg)
    B = PairBatch.from_pairs(c, cfg.t_max, cfg.n_keywords)
    tr, va = split_train_val(len(B), 0.2, 0)
    return B.take(tr), B.take(va)


def test_unbiased_corpus_is_learnable(small_corpus):
    tr, va = small_corpus
    _, hist = train_rm(tr, va, RMHyper(epochs=8), SINGLE)
    assert hist.best_val_acc > 0.9


def test_two_head_without_penalties_matches_single_head(small_corpus):
    tr, va = small_corpus
    _, h1 = train_rm(tr, va, RMHyper(epochs=8), SINGLE)
    _, h2 = train_rm(tr, va, RMHyper(epochs=8, lambda_l=0, lambda_o=0), TWO_HEAD)
    assert abs(h1.best_val_acc - h2.best_val_acc) <= 0.02


def test_training_keeps_head_norms_at_gains(small_corpus):
    tr, va = small_corpus
    p, hist = train_rm(tr, va, RMHyper(epochs=2), TWO_HEAD)
    eq, el = p.effective_heads()
    assert np.linalg.norm(eq) == pytest.approx(p.g_q) and np.linalg.norm(el) == pytest.approx(p.g_l)
    assert len(hist.rows) == 2 and hist.best_epoch in (0, 1)
    pf, _ = train_rm(tr, va, RMHyper(epochs=2, train_gains=False), TWO_HEAD)
    assert (pf.g_q, pf.g_l) == (1.0, 1.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    p = random_params(rng)
    p.save(tmp_path / "rm.json")
    q = RMParams.load(tmp_path / "rm.json")
    f = rng.normal(size=(4, FEATURE_DIM))
    np.testing.assert_array_equal(reward(p, f), reward(q, f))
    (tmp_path / "bad.json").write_text('{"version": 99}')
    with pytest.raises(ValueError):
        RMParams.load(tmp_path / "bad.json")
