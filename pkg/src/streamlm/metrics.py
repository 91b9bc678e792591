"""Streaming evaluation: language quality, temporal alignment, throughput.

Likelihood metrics (perplexity, generation match) are teacher-forced over
a sample's training-layout assembly in one full forward.  Alignment
metrics (time difference, fluency) replay each scheme's online procedure
with a KV cache: between gold turns the context is always restored to the
gold-realized prefix, so turn errors stay decorrelated.

Scheme protocols during scans:
  streaming / interleaved — silence decision on the frame-last logit (and
      after user-query tokens); a response is role marker + text + EOS.
  per_frame — every frame is followed by the injected 10-token turn
      template; the decision reads the answer slot's EOS probability and
      a response is text + EOS inside that turn.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import assembly as A
from . import vocab as V
from .data import LoadedDataset, StreamSample
from .engine import (InferenceConfig, ScriptedSession, decide_eos, run_stream,
                     softmax_probs)
from .model import KVCache, ModelParams, forward_full, forward_step, pack_single
from .vocab import Vocabulary


class MetricUndefinedError(RuntimeError):
    """A metric was requested on a sample without any assistant turns."""


@dataclass
class MetricsReport:
    lm_ppl: float
    lg_match: float
    time_diff_seconds: float
    fluency: float
    n_samples: int
    n_turns: int
    theta: float
    scheme: str
    throughput: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {
            "lm_ppl": self.lm_ppl,
            "lg_match": self.lg_match,
            "time_diff_seconds": self.time_diff_seconds,
            "fluency": self.fluency,
            "n_samples": self.n_samples,
            "n_turns": self.n_turns,
            "theta": self.theta,
            "scheme": self.scheme,
        }
        if self.throughput is not None:
            out["throughput"] = self.throughput
        return out


def _assistant_turns(sample: StreamSample) -> list:
    return [t for t in sample.turns if t.kind == "assistant"]


def correct_prefix_ratio(pred_ids, gold_ids) -> float:
    """Length of the agreeing prefix divided by the gold length."""
    match = 0
    for p, g in zip(pred_ids, gold_ids):
        if p == g:
            match += 1
        else:
            break
    return match / len(gold_ids)


def fluency_score(silent_ok: list, resp_ok: list) -> float:
    """Correct-prefix ratio over silence slots followed by response slots."""
    slots = list(silent_ok) + list(resp_ok)
    if not slots:
        return 1.0
    prefix = 0
    for ok in slots:
        if ok:
            prefix += 1
        else:
            break
    return prefix / len(slots)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = logits - m
    return e - np.log(np.exp(e).sum(axis=-1, keepdims=True))


def lm_ppl(params: ModelParams, voc: Vocabulary, sample: StreamSample,
           feats: np.ndarray, scheme: str = "streaming") -> float:
    """exp(mean NLL) over response text + turn-EOS tokens, teacher-forced."""
    ppl, _ = teacher_forced_eval(params, voc, sample, feats, scheme)
    return ppl


def lg_match(params: ModelParams, voc: Vocabulary, sample: StreamSample,
             feats: np.ndarray, scheme: str = "streaming") -> float:
    """Mean correct-prefix ratio of greedy teacher-forced turn generations."""
    _, lgs = teacher_forced_eval(params, voc, sample, feats, scheme)
    return float(np.mean(lgs))


def teacher_forced_eval(params: ModelParams, voc: Vocabulary, sample: StreamSample,
                        feats: np.ndarray, scheme: str) -> tuple[float, list[float]]:
    seq = A.assemble(sample, voc, params.cfg.tokens_per_frame, scheme=scheme,
                     max_context=params.cfg.max_context)
    if not seq.turn_spans:
        raise MetricUndefinedError("sample has no assistant turns")
    batch = pack_single(seq.token_ids, feats.astype(params["tok_emb"].data.dtype),
                        seq.frame_cols)
    logits = forward_full(params, batch).data[0]
    logp = _log_softmax(logits)
    preds = logits.argmax(axis=-1)
    nlls: list[float] = []
    lgs: list[float] = []
    ids = seq.token_ids
    # a streaming/interleaved span opens with the generated role marker; a
    # per-frame span is the answer inside the template. PPL scores the
    # response text plus turn EOS in both cases.
    text_off = 0 if seq.scheme == "per_frame" else 1
    for _, s, e in seq.turn_spans:
        for j in range(s + text_off - 1, e - 1):
            nlls.append(-float(logp[j, ids[j + 1]]))
        # generation match covers every generated token, first one included
        gold = ids[s:e]
        lgs.append(correct_prefix_ratio(preds[s - 1:e - 1], gold))
    return float(np.exp(np.mean(nlls))), lgs


@dataclass
class ScanResult:
    time_diffs: list[float] = field(default_factory=list)   # seconds per turn
    fluencies: list[float] = field(default_factory=list)    # ratio per turn
    speak_frames: list[Optional[int]] = field(default_factory=list)


def scan_sample(params: ModelParams, voc: Vocabulary, sample: StreamSample,
                feats: np.ndarray, scheme: str, theta: float) -> ScanResult:
    """Per-turn alignment scan with decide_eos under the scheme protocol."""
    cfg = params.cfg
    p = cfg.tokens_per_frame
    pf = scheme == "per_frame"
    gate_id = voc.eos_id if pf else voc.stream_eos_id
    pf_prefix = A.per_frame_prefix_ids(voc) if pf else []
    dtype = params["tok_emb"].data.dtype
    feats = feats.astype(dtype)
    turns = _assistant_turns(sample)
    if not turns:
        raise MetricUndefinedError("sample has no assistant turns")
    users: dict[int, list[str]] = {}
    for t in sample.turns:
        if t.kind == "user":
            users.setdefault(t.frame, []).append(t.text)

    cache = KVCache(cfg, dtype=dtype)
    forward_step(params, cache, np.asarray(A.system_ids(voc)))
    out = ScanResult()
    prev_frame = -1
    for k, turn in enumerate(turns):
        tf = turn.frame
        window_end = turns[k + 1].frame if k + 1 < len(turns) else sample.num_frames
        gold = (voc.encode(turn.text) + [voc.eos_id]) if pf \
            else A.assistant_turn_ids(voc, turn.text)
        user_extra = sum(len(A.user_turn_ids(voc, text))
                         for f in range(prev_frame + 1, window_end)
                         for text in users.get(f, ()))
        reserve = ((window_end - prev_frame) * (p + (10 if pf else 0))
                   + user_extra + len(gold) + 8)
        fork = cache.fork(reserve=reserve)
        t_hat: Optional[int] = None
        silent_flags: list[bool] = []
        resp_slots: list[bool] = []
        for f in range(prev_frame + 1, window_end):
            chunk = [V.FRAME] * p
            for text in users.get(f, ()):
                chunk.extend(A.user_turn_ids(voc, text))
            if pf:
                chunk.extend(pf_prefix)
            logits = forward_step(params, fork, np.asarray(chunk, dtype=np.int64),
                                  frame_feats=feats[f][None, :],
                                  frame_cols=np.array([0]))
            if pf:
                rows = [len(chunk) - 1]
            else:
                rows = [p - 1] if len(chunk) == p else [p - 1, len(chunk) - 1]
            decisions = [decide_eos(softmax_probs(logits[r]), theta, gate_id)
                         for r in rows]
            spoke = any(d[0] == "speak" for d in decisions)
            if f == tf:
                # response slots are scored on the gold-realized context
                resp_fork = fork.fork(reserve=len(gold) + 2)
                resp_logits = forward_step(params, resp_fork,
                                           np.asarray(gold, dtype=np.int64))
                first_dec, first_tok = decisions[-1]
                resp_slots.append(first_dec == "speak" and first_tok == gold[0])
                for i in range(1, len(gold)):
                    resp_slots.append(int(resp_logits[i - 1].argmax()) == gold[i])
            elif f < tf:
                silent_flags.append(not spoke)
            if t_hat is None and spoke:
                t_hat = f
            if t_hat is not None and f >= tf:
                break
            if pf and not spoke:
                forward_step(params, fork, np.asarray([voc.eos_id]))
        if t_hat is None:
            t_hat = window_end
        out.speak_frames.append(t_hat)
        out.time_diffs.append(abs(t_hat - tf) / sample.fps)
        out.fluencies.append(fluency_score(silent_flags, resp_slots))
        _advance_gold(params, voc, cache, sample, feats, prev_frame, turn, scheme)
        prev_frame = tf
    return out


def _advance_gold(params, voc, cache, sample, feats, prev_frame, turn, scheme):
    """Append the gold-realized tokens through `turn` onto `cache` in place."""
    pf = scheme == "per_frame"
    p = params.cfg.tokens_per_frame
    users: dict[int, list[str]] = {}
    for t in sample.turns:
        if t.kind == "user":
            users.setdefault(t.frame, []).append(t.text)
    dtype = params["tok_emb"].data.dtype
    for f in range(prev_frame + 1, turn.frame + 1):
        chunk = [V.FRAME] * p
        for text in users.get(f, ()):
            chunk.extend(A.user_turn_ids(voc, text))
        if pf:
            chunk.extend(A.per_frame_prefix_ids(voc))
        forward_step(params, cache, np.asarray(chunk, dtype=np.int64),
                     frame_feats=feats.astype(dtype)[f][None, :],
                     frame_cols=np.array([0]))
        if f == turn.frame:
            gold = (voc.encode(turn.text) + [voc.eos_id]) if pf \
                else A.assistant_turn_ids(voc, turn.text)
            forward_step(params, cache, np.asarray(gold, dtype=np.int64))
        elif pf:
            forward_step(params, cache, np.asarray([voc.eos_id]))
    return cache


def time_diff(params, voc, sample, feats, theta: float,
              scheme: str = "streaming") -> float:
    """Mean |model speak frame - gold frame| in seconds over turns."""
    return float(np.mean(scan_sample(params, voc, sample, feats, scheme,
                                     theta).time_diffs))


def fluency(params, voc, sample, feats, theta: float,
            scheme: str = "streaming") -> float:
    """Mean correct-prefix ratio over silence slots plus response tokens."""
    return float(np.mean(scan_sample(params, voc, sample, feats, scheme,
                                     theta).fluencies))


def evaluate_dataset(params: ModelParams, voc: Vocabulary, dataset: LoadedDataset,
                     scheme: str, theta: float = 0.6) -> MetricsReport:
    """Aggregate metrics: PPL averaged per sample, the rest pooled per turn."""
    ppls, lgs, tds, flus = [], [], [], []
    for i, sample in enumerate(dataset.samples):
        feats = dataset.features_for(i)
        ppl, lg = teacher_forced_eval(params, voc, sample, feats, scheme)
        scan = scan_sample(params, voc, sample, feats, scheme, theta)
        ppls.append(ppl)
        lgs.extend(lg)
        tds.extend(scan.time_diffs)
        flus.extend(scan.fluencies)
    return MetricsReport(
        lm_ppl=float(np.mean(ppls)),
        lg_match=float(np.mean(lgs)),
        time_diff_seconds=float(np.mean(tds)),
        fluency=float(np.mean(flus)),
        n_samples=len(dataset.samples),
        n_turns=len(tds),
        theta=theta,
        scheme=scheme,
    )


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------


def mean_train_tokens(dataset: LoadedDataset, voc: Vocabulary, p: int,
                      scheme: str) -> float:
    counts = [len(A.assemble(s, voc, p, scheme=scheme)) for s in dataset.samples]
    return float(np.mean(counts))


def scheme_throughput(sample: StreamSample, voc: Vocabulary, scheme: str,
                      p: int = 10, decode_ms: float = 30.0, encode_ms: float = 5.0,
                      fps: float = 2.0, queue_capacity: int = 8) -> dict:
    """Scripted-responder engine stats: realtime (drop) and full (block) runs."""
    drop_cfg = InferenceConfig(scheme=scheme, decode_ms_per_token=decode_ms,
                               encode_ms_per_frame=encode_ms, fps=fps,
                               queue_capacity=queue_capacity,
                               skip_policy="drop_oldest")
    drop = run_stream(ScriptedSession(sample, voc, drop_cfg, p=p), sample, drop_cfg)
    block_cfg = InferenceConfig(scheme=scheme, decode_ms_per_token=decode_ms,
                                encode_ms_per_frame=encode_ms, fps=fps,
                                queue_capacity=max(queue_capacity, sample.num_frames),
                                skip_policy="block")
    block = run_stream(ScriptedSession(sample, voc, block_cfg, p=p), sample, block_cfg)
    return {
        "skips": drop.frames_skipped,
        "realtime_fps": round(drop.processed_fps, 4),
        "fps": round(block.processed_fps, 4),
        "peak_cache_tokens": block.peak_cache_tokens,
        "peak_queue_depth": block.peak_queue_depth,
    }


def run_ablation(train_ds: LoadedDataset, val_ds: LoadedDataset,
                 checkpoints: dict[str, ModelParams], voc: Vocabulary,
                 theta: float = 0.6, untrained: Optional[ModelParams] = None,
                 bench_sample: Optional[StreamSample] = None,
                 bench_p: int = 10) -> list[dict]:
    """Per-scheme metric rows plus engine throughput (Table-style analog)."""
    rows = []
    if untrained is not None:
        rep = evaluate_dataset(untrained, voc, val_ds, "streaming", theta)
        rows.append({"scheme": "untrained", "lm_ppl": rep.lm_ppl,
                     "time_diff": rep.time_diff_seconds, "fluency": rep.fluency,
                     "lg_match": rep.lg_match, "train_tokens": 0.0,
                     "skips": None, "fps": None, "peak_cache_tokens": None})
    bench = bench_sample or val_ds.samples[0]
    for scheme, params in checkpoints.items():
        rep = evaluate_dataset(params, voc, val_ds, scheme, theta)
        tok = mean_train_tokens(train_ds, voc, params.cfg.tokens_per_frame, scheme)
        thr = scheme_throughput(bench, voc, scheme, p=bench_p)
        rows.append({"scheme": scheme, "lm_ppl": rep.lm_ppl,
                     "time_diff": rep.time_diff_seconds, "fluency": rep.fluency,
                     "lg_match": rep.lg_match, "train_tokens": tok,
                     "skips": thr["skips"], "fps": thr["fps"],
                     "peak_cache_tokens": thr["peak_cache_tokens"]})
    return rows


ABLATION_COLUMNS = ["scheme", "LM-PPL", "TimeDiff", "Fluency", "LG-Match",
                    "#Training Token", "skips", "FPS", "peak_cache_tokens"]


def _row_values(r: dict) -> list:
    def fmt(x, nd=4):
        return "" if x is None else round(x, nd) if isinstance(x, float) else x
    return [r["scheme"], fmt(r["lm_ppl"]), fmt(r["time_diff"]), fmt(r["fluency"]),
            fmt(r["lg_match"]), fmt(r["train_tokens"], 1), fmt(r["skips"]),
            fmt(r["fps"]), fmt(r["peak_cache_tokens"])]


def write_ablation_files(rows: list[dict], out_dir) -> None:
    from pathlib import Path
    out_dir = Path(out_dir)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow(_row_values(r))
    with open(out_dir / "ablation.md", "w") as f:
        f.write("| " + " | ".join(ABLATION_COLUMNS) + " |\n")
        f.write("|" + "---|" * len(ABLATION_COLUMNS) + "\n")
        for r in rows:
            f.write("| " + " | ".join(str(v) for v in _row_values(r)) + " |\n")
    with open(out_dir / "ablation.json", "w") as f:
        json.dump(rows, f, indent=1, sort_keys=True)
        f.write("\n")
