"""Length-disentangled reward modelling and RLHF on a synthetic keyword task.

Modules:
    synthdata   prompts, demonstrations, length-biased preference corpus
    rm          baseline and two-head (quality / length) reward models
    policy      tabular-feature softmax policy, behaviour cloning, reward shaping
    rl          PPO and ReMax
    evaluate    pairwise judge, win score, Pareto fronts
    experiment  config-driven pipeline and sweeps (CLI: ``odinlab``)
"""
from .correlation import CorrelationReport, correlation_report, kendall, pearson, spearman
from .evaluate import (EvalReport, JudgeConfig, ParetoPoint, eval_policy, front_value, judge_pair,
                       pareto_front, win_score)
from .policy import PolicyParams, bc_pretrain, sample_response, shaped_reward
from .rl import RewardModel, RLConfig, gae, ppo_clip_loss, train_ppo, train_remax, train_rl
from .rm import SINGLE, TWO_HEAD, PairBatch, RMHyper, RMParams, train_rm
from .synthdata import (CalibrationError, ConfigError, CorpusConfig, DemoSampler, calibrate_length_bias,
                        gen_preference_corpus, gen_prompts, true_quality)

__version__ = "0.1.0"
