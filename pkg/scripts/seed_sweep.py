#!/usr/bin/env python3
"""Fruit-count robustness over seeds: run the pipeline once per seed and
tabulate predicted vs true counts plus held-out PSNR / IoU.

    python scripts/seed_sweep.py --out runs/sweep --seeds 0 1 2
"""

import argparse
import csv
import os
import sys

import run_pipeline


def read_counts(path):
    pred = gt = None
    with open(path) as f:
        for row in csv.reader(f):
            if row and row[0] == "total":
                pred = int(row[2])
            elif row and row[0] == "ground_truth":
                gt = int(row[2])
    return pred, gt


def read_eval(path):
    """Mean metric value per (checkpoint tag, metric name)."""
    sums = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            tag = row["view_id"].split("/")[0]
            key = (tag, row["metric"])
            s, n = sums.get(key, (0.0, 0))
            sums[key] = (s + float(row["value"]), n + 1)
    return {k: s / n for k, (s, n) in sums.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="parent directory for per-seed runs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="SECTION.KEY=VALUE")
    args = ap.parse_args(argv)

    results = []
    for seed in args.seeds:
        run_dir = os.path.join(args.out, f"seed{seed}")
        argv_run = ["--out", run_dir, "--seed", str(seed)]
        for kv in args.overrides:
            argv_run += ["--set", kv]
        rc = run_pipeline.main(argv_run)
        if rc != 0:
            print(f"seed {seed}: pipeline failed rc={rc}", file=sys.stderr)
            return rc
        pred, gt = read_counts(os.path.join(run_dir, "count_report.csv"))
        means = read_eval(os.path.join(run_dir, "eval_report.csv"))
        results.append((seed, pred, gt, means))

    print(f"{'seed':>4} {'count':>6} {'truth':>6} {'s1 psnr':>8} {'s2 iou':>7} "
          f"{'joint psnr':>10} {'joint iou':>9}")
    exact = within1 = 0
    for seed, pred, gt, m in results:
        exact += int(pred == gt)
        within1 += int(abs(pred - gt) <= 1)
        print(f"{seed:>4} {pred:>6} {gt:>6} "
              f"{m.get(('stage1_rgb', 'psnr'), float('nan')):>8.2f} "
              f"{m.get(('stage2_mask', 'iou'), float('nan')):>7.3f} "
              f"{m.get(('joint', 'psnr'), float('nan')):>10.2f} "
              f"{m.get(('joint', 'iou'), float('nan')):>9.3f}")
    n = len(results)
    print(f"exact count {exact}/{n}, within one {within1}/{n}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
