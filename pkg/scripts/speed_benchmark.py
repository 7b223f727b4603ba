#!/usr/bin/env python3
"""Times single-pass generation against the multi-step sampler.

    python scripts/speed_benchmark.py --out runs/bench --resolution 128x96
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from onestep_vton.cli import main as cli_main


def run() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/bench")
    ap.add_argument("--resolution", default="128x96")
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--steps-list", default="1,10,100")
    ap.add_argument("--tryon-checkpoint", default=None)
    args = ap.parse_args()
    argv = [
        "--preset", "desk-64", "--out", args.out,
        "bench", "--steps-list", args.steps_list,
        "--batch", str(args.batch), "--repeats", str(args.repeats),
        "--bench-resolution", args.resolution,
    ]
    if args.tryon_checkpoint:
        argv += ["--tryon-checkpoint", args.tryon_checkpoint]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(run())
