#!/usr/bin/env python3
"""Run the full pipeline on one synthetic orchard: synthesize, train both
stages, run both baselines, extract, cluster, and score.

Thin driver over the package CLI so a run is reproducible from one command:

    python scripts/run_pipeline.py --out runs/demo --seed 0
    python scripts/run_pipeline.py --out runs/fast --set train_stage1.steps=500
"""

import argparse
import sys
import time

from nerfseg import cli

STAGES = [
    "synth",
    "train",
    "finetune",
    "joint",
    "sa3d",
    "extract",
    "cluster",
    "eval",
    "density-diff",
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="artifact directory")
    ap.add_argument("--config", help="json config file")
    ap.add_argument("--seed", type=int, help="override every stage seed")
    ap.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="config override (repeatable)",
    )
    ap.add_argument(
        "--skip",
        action="append",
        default=[],
        choices=STAGES,
        help="stage to skip (repeatable)",
    )
    args = ap.parse_args(argv)

    passthrough = ["--out", args.out]
    if args.config:
        passthrough += ["--config", args.config]
    if args.seed is not None:
        passthrough += ["--seed", str(args.seed)]
    for kv in args.overrides:
        passthrough += ["--set", kv]

    t_start = time.time()
    for stage in STAGES:
        if stage in args.skip:
            continue
        t0 = time.time()
        rc = cli.main([stage, *passthrough])
        print(f"[{stage}] {'ok' if rc == 0 else f'FAILED rc={rc}'} "
              f"({time.time() - t0:.1f}s)", file=sys.stderr)
        if rc != 0:
            return rc
    print(f"[pipeline] done in {time.time() - t_start:.1f}s -> {args.out}",
          file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
