#!/usr/bin/env python3
"""Runs the appendix-style ablation sweeps back to back on synthetic data.

    python scripts/ablation_sweeps.py --out runs/ablations --steps 60
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from onestep_vton.cli import main as cli_main


def run() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=60,
                    help="training steps per sweep arm (attention/noise)")
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--which", nargs="*",
                    default=["threshold", "attention", "noise", "conditions",
                             "postproc", "ddim"])
    args = ap.parse_args()
    for which in args.which:
        samples = args.samples if which != "threshold" else max(args.samples, 200)
        rc = cli_main([
            "--preset", "desk-64", "--seed", str(args.seed),
            "--out", str(Path(args.out) / which),
            "ablate", "--which", which, "--steps", str(args.steps),
            "--samples", str(samples),
        ])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run())
