"""Desk-scale forgetting experiment for one or more seeds.

    python3 demos/desk_experiment.py --seeds 1 --extras

Prints same/cross-domain errors of the two base models and the old/new-domain
muMSE of each adaptation strategy, then medians across seeds.
"""
import argparse
import logging

from calibfw.desk import DeskConfig, median_over, run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--crops", type=int, default=2000)
    ap.add_argument("--extras", action="store_true", help="also run LUCIR and BiC at 20%% exemplars")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("calibfw.nn.train").setLevel(logging.WARNING)
    logging.getLogger("calibfw.incremental").setLevel(logging.WARNING)

    cfg = DeskConfig(crops=args.crops, extras=args.extras)
    results = [run_seed(s, cfg) for s in args.seeds]
    names = list(results[0].old_mu)
    print(f"\n{'run':<12}{'old muMSE':>11}{'new muMSE':>11}   (median over seeds {args.seeds})")
    for name in names:
        old = median_over(results, lambda r: r.old_mu[name])
        new = median_over(results, lambda r: r.new_mu[name])
        print(f"{name:<12}{old:11.4f}{new:11.4f}")
    for dom in ("indoor", "outdoor"):
        same = median_over(results, lambda r: r.same[dom])
        cross = median_over(results, lambda r: r.cross[dom])
        print(f"{dom} base model: same-domain {same:.4f}, cross-domain {cross:.4f}")
    print(f"total {sum(r.seconds for r in results) / 60:.1f} min")


if __name__ == "__main__":
    main()
