"""Command-line entry point: gen-data, train, eval, stream, bench.

Every run writes into its own directory (timestamped unless --run-dir is
given) and persists the resolved config next to its outputs.  Exit codes:
0 success, 1 usage/config error, 2 runtime error, 3 failed bench
assertion.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import assembly as A
from . import data as D
from . import engine as E
from . import metrics as MT
from . import model as M
from . import tensor as T
from . import training as TR
from . import vocab as V


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _run_dir(args, subcmd: str) -> Path:
    if args.run_dir:
        run = Path(args.run_dir)
    else:
        root = Path(args.out or os.environ.get("STREAMLM_OUT", "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run = root / f"run-{stamp}-{subcmd}"
    if run.exists() and any(run.iterdir()):
        raise UsageError(f"run directory {run} already exists and is not empty")
    run.mkdir(parents=True, exist_ok=True)
    return run


def _write_resolved(run: Path, resolved: dict) -> None:
    with open(run / "resolved-config.json", "w") as f:
        json.dump(resolved, f, indent=1, sort_keys=True)
        f.write("\n")


def _world_config(d: dict) -> D.WorldConfig:
    try:
        return D.WorldConfig(**d)
    except TypeError as exc:
        raise UsageError(f"bad world config: {exc}") from exc


def _model_config(d: dict, vocab_size: int) -> M.ModelConfig:
    try:
        return M.ModelConfig(vocab_size=vocab_size, **d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    world = _world_config(raw.get("world", {}))
    cfg = D.DataConfig(
        world=world,
        n_samples=raw.get("n_samples", 220),
        val_fraction=raw.get("val_fraction", 0.1),
        dialogue_fraction=raw.get("dialogue_fraction", 0.0),
        max_queries=raw.get("max_queries", 3),
        seed=args.seed if args.seed is not None else raw.get("seed", 17),
    )
    run = _run_dir(args, "gen-data")
    _write_resolved(run, {"command": "gen-data", "data": asdict(cfg)})
    manifest = D.generate_dataset(cfg, run)
    if manifest["n_val"] == 0:
        print("warning: val_fraction leaves the validation split empty", file=sys.stderr)
    print(f"wrote {manifest['n_train']} train / {manifest['n_val']} val samples to {run}")
    print(f"sources: {manifest['sources']}")
    return 0


def _config_diff(a: M.ModelConfig, b: M.ModelConfig) -> list[str]:
    out = []
    for k, va in asdict(a).items():
        vb = getattr(b, k)
        if va != vb:
            out.append(f"  {k}: checkpoint={va} config={vb}")
    return out


def cmd_train(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    voc = V.build_vocab()
    mcfg = _model_config(raw.get("model", {}), len(voc))
    tr_raw = dict(raw.get("train", {}))
    if args.scheme:
        tr_raw["scheme"] = args.scheme
    if args.epochs is not None:
        tr_raw["epochs"] = args.epochs
    if args.lr is not None:
        tr_raw["lr"] = args.lr
    if args.batch_size is not None:
        tr_raw["batch_size"] = args.batch_size
    if args.seed is not None:
        tr_raw["seed"] = args.seed
    try:
        tcfg = TR.TrainConfig(**tr_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from exc
    dataset = D.load_dataset(args.data, "train")
    if args.resume:
        params = M.load_checkpoint(args.resume)
        if params.cfg != mcfg:
            print("cannot resume: checkpoint config differs from requested config:",
                  file=sys.stderr)
            for line in _config_diff(params.cfg, mcfg):
                print(line, file=sys.stderr)
            return 1
    else:
        params = M.init_model(mcfg, seed=tcfg.seed)
    run = _run_dir(args, f"train-{tcfg.scheme}")
    _write_resolved(run, {"command": "train", "model": asdict(mcfg),
                          "train": asdict(tcfg), "data": str(args.data),
                          "resume": args.resume})
    log = TR.train(dataset, params, voc, tcfg)
    M.save_checkpoint(params, run / "model.ckpt")
    log.write_csv(run / "train_log.csv")
    means = log.epoch_means()
    print(f"trained {tcfg.scheme}: {len(log.rows)} steps, "
          f"epoch loss {means[0]:.4f} -> {means[-1]:.4f}")
    print(f"checkpoint: {run / 'model.ckpt'}")
    return 0


def _parse_sweep(spec: str) -> list[float]:
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError as exc:
        raise UsageError(f"bad sweep spec {spec!r}, expected start:stop:step") from exc
    if step <= 0 or stop < start:
        raise UsageError(f"bad sweep spec {spec!r}")
    out = []
    x = start
    while x <= stop + 1e-9:
        out.append(round(x, 10))
        x += step
    return out


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = M.load_checkpoint(args.checkpoint)
    voc = V.build_vocab()
    dataset = D.load_dataset(args.data, args.split)
    thetas = _parse_sweep(args.theta_sweep) if args.theta_sweep else [args.theta]
    run = _run_dir(args, "eval")
    _write_resolved(run, {"command": "eval", "checkpoint": str(args.checkpoint),
                          "data": str(args.data), "split": args.split,
                          "scheme": args.scheme, "thetas": thetas})
    reports = [MT.evaluate_dataset(params, voc, dataset, args.scheme, theta).to_dict()
               for theta in thetas]
    payload = reports[0] if len(reports) == 1 else {"sweep": reports}
    with open(run / "metrics.json", "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    for rep in reports:
        print(f"theta={rep['theta']}: ppl={rep['lm_ppl']:.4f} "
              f"timediff={rep['time_diff_seconds']:.4f}s fluency={rep['fluency']:.4f} "
              f"lg_match={rep['lg_match']:.4f}")
    print(f"metrics: {run / 'metrics.json'}")
    return 0


def cmd_stream(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = M.load_checkpoint(args.checkpoint)
    voc = V.build_vocab()
    dataset = D.load_dataset(args.data, args.split)
    if not 0 <= args.index < len(dataset.samples):
        raise UsageError(f"sample index {args.index} out of range")
    sample = dataset.samples[args.index]
    feats = dataset.features_for(args.index)
    try:
        icfg = E.InferenceConfig(theta=args.theta, fps=args.fps,
                                 decode_ms_per_token=args.decode_ms,
                                 encode_ms_per_frame=args.encode_ms,
                                 queue_capacity=args.queue_capacity,
                                 skip_policy=args.skip_policy, scheme=args.scheme)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    run = _run_dir(args, "stream")
    _write_resolved(run, {"command": "stream", "checkpoint": str(args.checkpoint),
                          "inference": asdict(icfg), "mode": args.mode,
                          "data": str(args.data), "index": args.index})
    session = E.ModelSession(params, voc, icfg)
    queries = E.queries_from_sample(sample, icfg.fps)
    runner = E.run_stream if args.mode == "simulated" else E.run_stream_concurrent
    transcript = runner(session, sample, icfg, features=feats, queries=queries)
    transcript.write_jsonl(run / "transcript.jsonl")
    transcript.write_summary(run / "summary.json")
    print(json.dumps(transcript.summary(), indent=1, sort_keys=True))
    print(f"transcript: {run / 'transcript.jsonl'}")
    return 0


def _bench_assertions(rows: list[dict]) -> list[tuple[str, bool]]:
    by = {r["scheme"]: r for r in rows}
    checks: list[tuple[str, bool]] = []
    if {"streaming", "per_frame", "interleaved"} <= set(by):
        s, p, i = by["streaming"], by["per_frame"], by["interleaved"]
        checks.append(("TimeDiff(streaming) <= TimeDiff(per_frame)",
                       s["time_diff"] <= p["time_diff"]))
        checks.append(("TimeDiff(per_frame) < TimeDiff(interleaved)",
                       p["time_diff"] < i["time_diff"]))
        checks.append(("Fluency(streaming) >= Fluency(per_frame)",
                       s["fluency"] >= p["fluency"]))
        checks.append(("train_tokens(streaming) == train_tokens(interleaved)",
                       s["train_tokens"] == i["train_tokens"]))
        checks.append(("train_tokens(per_frame)/train_tokens(streaming) >= 1.5",
                       p["train_tokens"] >= 1.5 * s["train_tokens"]))
        checks.append(("skips: streaming == 0 < per_frame",
                       s["skips"] == 0 and p["skips"] > 0))
        checks.append(("peak cache: streaming < per_frame < interleaved",
                       s["peak_cache_tokens"] < p["peak_cache_tokens"] < i["peak_cache_tokens"]))
    if "untrained" in by and "streaming" in by:
        checks.append(("PPL(untrained) > 5 x PPL(streaming)",
                       by["untrained"]["lm_ppl"] > 5 * by["streaming"]["lm_ppl"]))
    return checks


def cmd_bench(args) -> int:
    voc = V.build_vocab()
    checkpoints: dict[str, M.ModelParams] = {}
    for spec in args.checkpoints.split(","):
        if "=" not in spec:
            raise UsageError(f"bad checkpoint spec {spec!r}, expected scheme=path")
        scheme, path = spec.split("=", 1)
        if scheme not in A.SCHEMES:
            raise UsageError(f"unknown scheme {scheme!r}")
        if not Path(path).exists():
            raise UsageError(f"checkpoint not found: {path}")
        checkpoints[scheme] = M.load_checkpoint(path)
    train_ds = D.load_dataset(args.data, "train")
    val_ds = D.load_dataset(args.data, args.split)
    run = _run_dir(args, "bench")
    _write_resolved(run, {"command": "bench", "data": str(args.data),
                          "checkpoints": args.checkpoints, "theta": args.theta,
                          "bench_p": args.bench_p})
    untrained = None
    if args.untrained_baseline:
        any_cfg = next(iter(checkpoints.values())).cfg
        untrained = M.init_model(any_cfg, seed=args.seed or 0)
    rows = MT.run_ablation(train_ds, val_ds, checkpoints, voc, theta=args.theta,
                           untrained=untrained, bench_p=args.bench_p)
    MT.write_ablation_files(rows, run)
    for r in rows:
        print(" | ".join(str(v) for v in MT._row_values(r)))
    if args.latency_sweep:
        sweep = _parse_sweep(args.latency_sweep)
        with open(run / "latency_sweep.csv", "w") as f:
            f.write("decode_ms,scheme,fps,skips\n")
            for ms in sweep:
                for scheme in checkpoints:
                    thr = MT.scheme_throughput(val_ds.samples[0], voc, scheme,
                                               p=args.bench_p, decode_ms=ms)
                    f.write(f"{ms},{scheme},{thr['realtime_fps']},{thr['skips']}\n")
        print(f"latency sweep: {run / 'latency_sweep.csv'}")
    if args.check_equivalence:
        scheme, params = next(iter(checkpoints.items()))
        icfg = E.InferenceConfig(scheme=scheme, decode_ms_per_token=0.0,
                                 encode_ms_per_frame=0.0,
                                 queue_capacity=max(64, val_ds.samples[0].num_frames))
        sample = val_ds.samples[0]
        feats = val_ds.features_for(0)
        queries = E.queries_from_sample(sample, icfg.fps)
        sim = E.run_stream(E.ModelSession(params, voc, icfg), sample, icfg,
                           features=feats, queries=queries)
        con = E.run_stream_concurrent(E.ModelSession(params, voc, icfg), sample,
                                      icfg, features=feats, queries=queries)
        same = sim.decisions() == con.decisions()
        print(f"simulated/concurrent decision equivalence ({scheme}): "
              f"{'PASS' if same else 'FAIL'}")
        if not same:
            return 3
    checks = _bench_assertions(rows)
    failed = 0
    results = []
    for name, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        results.append({"check": name, "pass": bool(ok)})
        failed += 0 if ok else 1
    with open(run / "assertions.json", "w") as f:
        json.dump(results, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"ablation files: {run}")
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--precision", choices=["f32", "f64"], default="f32")
    common.add_argument("--out", default=None, help="output root (or $STREAMLM_OUT)")
    common.add_argument("--run-dir", default=None, help="exact run directory to use")
    p = Parser(prog="streamlm",
               description="Desk-scale streaming dialogue lab: data, training, "
                           "evaluation, real-time replay, benchmarks.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", parents=[common],
                       help="synthesize train/val stream datasets")
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one scheme on a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--scheme", choices=A.SCHEMES, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="compute streaming metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--scheme", choices=A.SCHEMES, default="streaming")
    e.add_argument("--theta", type=float, default=0.6)
    e.add_argument("--theta-sweep", default=None, metavar="START:STOP:STEP")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stream", parents=[common], help="replay one sample through the engine")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--scheme", choices=A.SCHEMES, default="streaming")
    s.add_argument("--theta", type=float, default=0.6)
    s.add_argument("--fps", type=float, default=2.0)
    s.add_argument("--decode-ms", type=float, default=30.0)
    s.add_argument("--encode-ms", type=float, default=5.0)
    s.add_argument("--queue-capacity", type=int, default=8)
    s.add_argument("--skip-policy", choices=["drop_oldest", "block"],
                   default="drop_oldest")
    s.add_argument("--mode", choices=["simulated", "concurrent"], default="simulated")
    s.set_defaults(fn=cmd_stream)

    b = sub.add_parser("bench", parents=[common], help="three-scheme ablation and throughput report")
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="val")
    b.add_argument("--checkpoints", required=True,
                   metavar="scheme=path[,scheme=path...]")
    b.add_argument("--theta", type=float, default=0.6)
    b.add_argument("--bench-p", type=int, default=10,
                   help="frame tokens per frame for the throughput bench")
    b.add_argument("--untrained-baseline", action="store_true")
    b.add_argument("--latency-sweep", default=None, metavar="START:STOP:STEP")
    b.add_argument("--check-equivalence", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        T.set_precision(args.precision)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (D.DataError, D.JsonlSchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (M.ContextOverflowError, M.CheckpointVersionError,
            M.CorruptCheckpointError, TR.TrainingDivergedError,
            MT.MetricUndefinedError, T.NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
