#!/usr/bin/env python3
"""Threshold sweep for the silence gate on a trained checkpoint."""

import argparse
import sys

from streamlm.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--sweep", default="0.5:0.8:0.1")
    ap.add_argument("--scheme", default="streaming")
    ap.add_argument("--out", default="runs/theta-sweep")
    args = ap.parse_args()
    sys.exit(cli(["eval", "--checkpoint", args.checkpoint, "--data", args.data,
                  "--scheme", args.scheme, "--theta-sweep", args.sweep,
                  "--run-dir", args.out]))


if __name__ == "__main__":
    main()
