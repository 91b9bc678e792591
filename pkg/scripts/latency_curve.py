#!/usr/bin/env python3
"""Decode-latency sweep: realtime FPS and skips per scheme, no model needed.

Drives the discrete-event engine with scripted scheme responders over one
synthetic narration stream and prints a CSV curve.
"""

import argparse

from streamlm import data as D
from streamlm import metrics as MT
from streamlm import vocab as V


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--decode-ms", default="5:60:5", metavar="START:STOP:STEP")
    ap.add_argument("--frame-tokens", type=int, default=10)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    start, stop, step = (float(x) for x in args.decode_ms.split(":"))
    voc = V.build_vocab()
    sample = D.make_narration_stream(D.gen_world(D.WorldConfig(), args.seed))
    print("decode_ms,scheme,realtime_fps,skips,peak_cache_tokens")
    ms = start
    while ms <= stop + 1e-9:
        for scheme in ("streaming", "per_frame", "interleaved"):
            thr = MT.scheme_throughput(sample, voc, scheme, p=args.frame_tokens,
                                       decode_ms=ms)
            print(f"{ms},{scheme},{thr['realtime_fps']},{thr['skips']},"
                  f"{thr['peak_cache_tokens']}")
        ms += step


if __name__ == "__main__":
    main()
