#!/usr/bin/env python3
"""End-to-end scheme ablation: data, three training runs, bench tables.

Takes roughly half an hour on one CPU core (the per-frame baseline trains
on ~6.7k-token sequences).  Outputs land under --out (default runs/ablation).
"""

import argparse
import sys
from pathlib import Path

from streamlm.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent


def run(args):
    rc = cli(args)
    if rc not in (0, 3):
        sys.exit(rc)
    return rc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--theta", default="0.6")
    args = ap.parse_args()
    out = Path(args.out)
    run(["gen-data", "--config", str(ROOT / "configs/data-narration.json"),
         "--run-dir", str(out / "data")])
    specs = []
    for scheme in ("streaming", "interleaved", "per_frame"):
        run(["train", "--config", str(ROOT / f"configs/train-{scheme}.json"),
             "--data", str(out / "data"), "--run-dir", str(out / f"train-{scheme}")])
        specs.append(f"{scheme}={out / f'train-{scheme}' / 'model.ckpt'}")
    rc = run(["bench", "--data", str(out / "data"),
              "--checkpoints", ",".join(specs), "--theta", args.theta,
              "--untrained-baseline", "--latency-sweep", "10:60:10",
              "--run-dir", str(out / "bench")])
    print(f"\nablation artifacts in {out}/bench (exit {rc})")
    sys.exit(rc)


if __name__ == "__main__":
    main()
