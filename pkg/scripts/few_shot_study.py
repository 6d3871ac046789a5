#!/usr/bin/env python3
"""Hold one synthetic material out of pretraining, reintroduce n samples,
and report the accuracy / path-distance curves."""

import argparse
import json
import tempfile

from matprobe.experiments import few_shot_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--counts", default="1,2,4,8,16")
    ap.add_argument("--held-out", default=None)
    ap.add_argument("--compare-scratch", action="store_true")
    args = ap.parse_args()

    counts = tuple(int(c) for c in args.counts.split(","))

    def run(work):
        res = few_shot_study(work, seed=args.seed, counts=counts,
                             held_out=args.held_out,
                             compare_scratch=args.compare_scratch)
        print(json.dumps(res, indent=1))

    if args.work_dir:
        run(args.work_dir)
    else:
        with tempfile.TemporaryDirectory() as td:
            run(td)


if __name__ == "__main__":
    main()
