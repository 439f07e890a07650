"""Train the baseline and ODIN reward models on the calibrated corpus and
compare how strongly each tracks response length.

    python3 demos/rm_disentanglement.py [out_dir]

The corpus is calibrated so that about two thirds of preference pairs have
the longer response chosen.  The baseline RM absorbs that bias; ODIN's
quality head should not.
"""
import sys

from odinlab import experiment as ex


def main(out_dir="odin_runs"):
    cfg = ex.load_config(None, [f"out_dir={out_dir}"])
    _, _, stats = ex.build_corpus(cfg)
    print(f"corpus: {stats['n_pairs']} pairs, chosen longer {stats['chosen_longer_fraction']:.3f}, "
          f"annotator length bias {stats['length_bias']:.3f}")
    print(f"{'model':<10}{'acc':>8}{'rho':>9}{'r_s':>9}{'tau':>9}{'chosen-L':>10}{'rejected-L':>12}")
    for mode in ("baseline", "odin"):
        _, r = ex.train_reward_model(cfg, mode)
        print(f"{mode:<10}{r['val_acc']:>8.3f}{r['pearson']:>9.3f}{r['spearman']:>9.3f}{r['kendall']:>9.3f}"
              f"{r['acc_chosen_longer']:>10.3f}{r['acc_rejected_longer']:>12.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
