"""RL against each reward model, showing length hacking and its removal.

    python3 demos/length_hacking.py [out_dir]

PPO on the baseline RM inflates responses far past the SFT length while
true quality falls; PPO on ODIN's quality head keeps responses short and
wins most comparisons against SFT under the unbiased judge.
"""
import sys

import numpy as np

from odinlab import experiment as ex
from odinlab.rl import RunLog


def main(out_dir="odin_runs"):
    base = ex.load_config(None, [f"out_dir={out_dir}"])
    sft = ex.train_sft(base)
    ref = ex.evaluate_policy(base, sft, sft)
    print(f"SFT: length {ref.mean_length:.2f}, true quality {ref.mean_true_quality:.3f}")
    arms = {"baseline RM": {"rl.rm": "baseline", "rl.head": "full"},
            "ODIN r_Q": {"rl.rm": "odin", "rl.head": "quality"}}
    for name, over in arms.items():
        rec = ex.run_rl(ex.apply_overrides(base, over))
        log = RunLog.read_csv(ex.Path(out_dir) / "runs" / rec.run_id / "runlog.csv")
        lengths = log.column("mean_length")
        print(f"\n{name}: rollout length every 25 iterations {np.round(lengths[::25], 1).tolist()}")
        for p in rec.points:
            print(f"  {p['checkpoint']:<6} iter {p['iteration']:>4}  length {p['length']:6.2f}  "
                  f"quality {p['true_quality']:.3f}  win score {p['win_score']:6.1f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
