#!/usr/bin/env python3
"""Desk-scale overfit run: trains both stages on a handful of synthetic
pairs, then runs full inference and writes a contact sheet.

    python scripts/overfit_desk.py --out runs/desk --warp-steps 300 --tryon-steps 2000
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from onestep_vton.cli import main as cli_main
from onestep_vton.config import load_preset


def run() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--warp-steps", type=int, default=300)
    ap.add_argument("--tryon-steps", type=int, default=2000)
    args = ap.parse_args()
    out = Path(args.out)
    base = ["--preset", "desk-64", "--seed", str(args.seed), "--out", str(out)]

    t0 = time.time()
    rc = cli_main(base + ["train-warp", "--steps", str(args.warp_steps),
                          "--samples", str(args.samples)])
    if rc:
        return rc
    rc = cli_main(base + ["train-tryon", "--steps", str(args.tryon_steps),
                          "--samples", str(args.samples)])
    if rc:
        return rc
    rc = cli_main(base + [
        "infer", "--tryon-checkpoint", str(out / "tryon.ckpt"),
        "--warp-checkpoint", str(out / "warp.ckpt"),
        "--samples", str(args.samples),
    ])
    if rc:
        return rc

    warp_summary = json.loads((out / "warp_summary.json").read_text())
    tryon_summary = json.loads((out / "tryon_summary.json").read_text())
    print(f"total wall time: {(time.time() - t0) / 60:.1f} min")
    print(f"warp L1 {warp_summary['l1_before']:.4f} -> {warp_summary['l1_after']:.4f}")
    print(f"tryon masked L1 {tryon_summary['masked_l1']:.4f}")
    print(f"outputs in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
