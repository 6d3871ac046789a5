#!/usr/bin/env python3
"""Measure how rendered pose variations during training change accuracy on a
held-out rendered-pose test split."""

import argparse
import json
import tempfile

from matprobe.experiments import novel_view_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-leaf", type=int, default=24)
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()

    def run(work):
        res = novel_view_study(work, seed=args.seed, per_leaf=args.per_leaf,
                               epochs=args.epochs)
        print(json.dumps(res, indent=1))

    if args.work_dir:
        run(args.work_dir)
    else:
        with tempfile.TemporaryDirectory() as td:
            run(td)


if __name__ == "__main__":
    main()
