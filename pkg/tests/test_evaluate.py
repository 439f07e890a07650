import itertools

import numpy as np
import pytest

from odinlab.evaluate import (LOSE, TIE, WIN, EvalReport, JudgeConfig, ParetoPoint, aggregate, compare_fronts,
                              dominates, eval_policy, front_value, judge_pair, order_outcome, pareto_front,
                              read_pareto_csv, win_score, write_pareto_csv)
from odinlab.policy import PolicyParams, bc_pretrain
from odinlab.synthdata import CorpusConfig, Prompt, Response, Vocab, gen_demonstrations, gen_prompts

V = Vocab(20, 11, 64)
P = Prompt(0, (3, 9))


def test_win_score_full_grid():
    n = 10
    for w in range(n + 1):
        for l in range(n + 1 - w):
            # independent form: percentage of wins minus percentage of losses, shifted by 50
            assert win_score(n, w, l) == pytest.approx(50 + 100 * w / n - 100 * l / n, abs=1e-12)
    assert win_score(10, 4, 0) == 90
    assert win_score(7, 7, 0) == 150 and win_score(7, 0, 7) == -50
    for bad in [(0, 0, 0), (5, 3, 3), (5, -1, 0)]:
        with pytest.raises(ValueError):
            win_score(*bad)


def test_order_outcome_margin():
    assert order_outcome(0.5, 0.47, 0.02) == WIN
    assert order_outcome(0.5, 0.49, 0.02) == TIE
    assert order_outcome(0.5, 0.515, 0.02) == TIE
    assert order_outcome(0.5, 0.53, 0.02) == LOSE


TRUTH = {
    (WIN, WIN): WIN, (WIN, TIE): WIN, (TIE, WIN): WIN,
    (LOSE, LOSE): LOSE, (LOSE, TIE): LOSE, (TIE, LOSE): LOSE,
    (TIE, TIE): TIE, (WIN, LOSE): TIE, (LOSE, WIN): TIE,
}


def test_aggregate_truth_table():
    assert len(TRUTH) == 9
    for (o1, o2), want in TRUTH.items():
        assert aggregate(o1, o2) == want


def _resp(*tokens):
    return Response(tuple(tokens) + (V.eos,), True)


def test_judge_symmetry():
    ys = [_resp(3), _resp(3, 9), _resp(3, 25, 9), _resp(), _resp(3, 3, 9), _resp(21, 22)]
    flip = {WIN: LOSE, LOSE: WIN, TIE: TIE}
    for cfg in [JudgeConfig(), JudgeConfig(length_bias=0.4, position_bias=0.1), JudgeConfig(position_bias=0.5)]:
        for a, b in itertools.product(ys, ys):
            assert judge_pair(cfg, P, a, b) == flip[judge_pair(cfg, P, b, a)]


def test_position_bias_alone_produces_ties():
    # each response wins when listed first and loses when listed second
    cfg = JudgeConfig(position_bias=1.0)
    assert judge_pair(cfg, P, _resp(3, 9), _resp(3)) == TIE
    assert judge_pair(JudgeConfig(), P, _resp(3, 9), _resp(3)) == WIN


def test_length_bias_rewards_padding():
    short, padded = _resp(3, 9), _resp(3, 25, 26, 27, 28, 9)
    assert judge_pair(JudgeConfig(), P, padded, short) == TIE
    assert judge_pair(JudgeConfig(length_bias=1.0), P, padded, short) == WIN


def _sft():
    cfg = CorpusConfig(seed=8)
    demos = gen_demonstrations(cfg, gen_prompts(cfg, 150))
    return bc_pretrain(demos, V, epochs=15)[0], gen_prompts(cfg, 100, offset=9000)


def test_self_play_is_exactly_fifty():
    sft, prompts = _sft()
    rep = eval_policy(sft, sft, JudgeConfig(noise_std=0.3, length_bias=0.5), prompts)
    assert rep.win_score == 50 and rep.n_tie == rep.n == 100
    assert rep.n_win + rep.n_lose + rep.n_tie == rep.n


def test_length_biased_judge_favours_padded_policy():
    sft, prompts = _sft()
    padded = sft.copy()
    # raise every filler logit: same keywords, more filler
    padded.U[6:6 + V.n_filler, -1] += 2.0
    unbiased = eval_policy(padded, sft, JudgeConfig(), prompts)
    biased = eval_policy(padded, sft, JudgeConfig(length_bias=2.0), prompts)
    assert unbiased.mean_length > unbiased.baseline_mean_length
    assert biased.win_score > 50
    assert biased.win_score > unbiased.win_score


def test_eval_is_deterministic_and_order_invariant():
    sft, prompts = _sft()
    other = sft.copy()
    other.U[0] += 0.5
    a = eval_policy(other, sft, JudgeConfig(noise_std=0.05), prompts)
    b = eval_policy(other, sft, JudgeConfig(noise_std=0.05), prompts)
    c = eval_policy(other, sft, JudgeConfig(noise_std=0.05), prompts[::-1])
    assert a.to_json() == b.to_json()
    assert c.win_score == a.win_score and c.mean_length == pytest.approx(a.mean_length)
    with pytest.raises(ValueError):
        eval_policy(sft, sft, JudgeConfig(), [])


def test_report_invariants():
    rep = EvalReport.from_verdicts([WIN, WIN, TIE, LOSE], [1, 2, 3, 4], [1, 1, 1, 1], [1, 1, 0.5, 0])
    assert (rep.n, rep.n_win, rep.n_lose, rep.n_tie) == (4, 2, 1, 1)
    assert rep.win_score == 75 and rep.mean_length == 2.5


def _pt(l, w, tag=""):
    return ParetoPoint(float(l), float(w), tag)


def _brute_front(points):
    out = []
    for p in points:
        dominated = False
        for q in points:
            if q is p:
                continue
            if q.mean_length <= p.mean_length and q.win_score >= p.win_score and \
                    (q.mean_length, q.win_score) != (p.mean_length, p.win_score):
                dominated = True
        if not dominated:
            out.append(p)
    return sorted(out, key=lambda p: (p.mean_length, -p.win_score))


def test_pareto_examples():
    pts = [_pt(100, 60), _pt(150, 70), _pt(120, 55)]
    assert pareto_front(pts) == [_pt(100, 60), _pt(150, 70)]
    assert pareto_front([_pt(3, 4)]) == [_pt(3, 4)]
    assert pareto_front([_pt(3, 4, "a"), _pt(3, 4, "b")]) == [_pt(3, 4, "a"), _pt(3, 4, "b")]
    assert pareto_front([]) == []
    assert dominates(_pt(1, 5), _pt(2, 5)) and not dominates(_pt(2, 5), _pt(2, 5))


def test_pareto_matches_brute_force_and_is_idempotent(rng):
    for _ in range(50):
        pts = [_pt(*xy) for xy in rng.integers(0, 8, size=(15, 2))]
        f = pareto_front(pts)
        assert f == _brute_front(pts)
        assert pareto_front(f) == f


def test_front_value_and_comparison():
    ours = [_pt(4, 60), _pt(10, 70)]
    theirs = [_pt(6, 55)]
    assert front_value(ours, 3.9) == float("-inf")
    assert front_value(ours, 4) == 60 and front_value(ours, 9.9) == 60 and front_value(ours, 12) == 70
    assert compare_fronts(ours, theirs, [5, 6, 11]) == [(5, 60, float("-inf")), (6, 60, 55), (11, 70, 55)]


def test_pareto_csv_roundtrip(tmp_path):
    pts = [_pt(1 / 3, 55.5, "r1"), ParetoPoint(4.0, -12.25, "r2", "best")]
    write_pareto_csv(tmp_path / "f.csv", pts)
    assert read_pareto_csv(tmp_path / "f.csv") == pts
    (tmp_path / "g.csv").write_text((tmp_path / "f.csv").read_text().replace("version=1", "version=2"))
    with pytest.raises(ValueError):
        read_pareto_csv(tmp_path / "g.csv")


def test_judge_config_checks():
    with pytest.raises(ValueError):
        JudgeConfig(tie_margin=-0.1)
    with pytest.raises(ValueError):
        JudgeConfig(noise_std=-1)
