#!/usr/bin/env python3
"""Train the classifier head on the synthetic 9-leaf set and report test
accuracy per taxonomy level."""

import argparse
import json
import tempfile

from matprobe.experiments import end_to_end_learning


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", default=None, help="default: a temp dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-leaf", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()

    def run(work):
        res = end_to_end_learning(work, seed=args.seed, per_leaf=args.per_leaf,
                                  epochs=args.epochs)
        print(json.dumps({
            "test_flat_top1": res["test_flat_top1"],
            "per_level_top1": res["per_level_top1"],
            "level_names": res["level_names"],
            "final_loss": res["loss_curve"][-1],
        }, indent=1))

    if args.work_dir:
        run(args.work_dir)
    else:
        with tempfile.TemporaryDirectory() as td:
            run(td)


if __name__ == "__main__":
    main()
