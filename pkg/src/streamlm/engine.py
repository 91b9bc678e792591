"""Real-time streaming engine: silence gating, FIFO decoupling, timing.

A session owns a KV cache and consumes frames one at a time, deciding per
frame whether to stay silent or decode a response.  run_stream() drives a
session under a latency model with one encoder (producer) and one decoder
(consumer) connected by a bounded FIFO of encoded frames, on either a
deterministic discrete-event clock (default) or wall-clock threads.

The decoder is charged decode_ms_per_token for every token it ingests:
frame-token prefill, injected template or query tokens, and generated
tokens alike.  Encoding is charged separately and never waits for the
decoder unless the queue is full under the `block` policy.
"""

from __future__ import annotations

import heapq
import json
import math
import queue as queue_mod
import threading
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import assembly as A
from . import vocab as V
from .data import StreamSample, task_library
from .model import KVCache, ModelParams, forward_step
from .vocab import Vocabulary


@dataclass(frozen=True)
class InferenceConfig:
    theta: float = 0.6
    max_response_tokens: int = 24
    fps: float = 2.0
    encode_ms_per_frame: float = 5.0
    decode_ms_per_token: float = 30.0
    queue_capacity: int = 8
    skip_policy: str = "drop_oldest"    # or "block"
    scheme: str = "streaming"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")
        if self.queue_capacity < 1 or self.max_response_tokens < 1:
            raise ValueError("capacities must be positive")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.skip_policy not in ("drop_oldest", "block"):
            raise ValueError(f"unknown skip_policy {self.skip_policy!r}")
        if self.scheme not in A.SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    e = np.exp(logits - m)
    return e / e.sum()


def decide_eos(probs: np.ndarray, theta: float, eos_id: int):
    """Silent iff P(eos) >= theta; otherwise speak the best non-eos token."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-4:
        raise ValueError(f"probabilities sum to {total}, not a distribution")
    if probs[eos_id] >= theta:
        return "silent", None
    masked = probs.copy()
    masked[eos_id] = -1.0
    return "speak", int(masked.argmax())


@dataclass
class StepResult:
    decision: str            # "silent" | "speak"
    tokens: list[int]
    ingested: int            # tokens the decoder had to process this frame
    text: str = ""


class ModelSession:
    """Drives a trained model over one stream; owns its KV cache."""

    def __init__(self, params: ModelParams, voc: Vocabulary, cfg: InferenceConfig):
        self.params = params
        self.voc = voc
        self.cfg = cfg
        self.cache = KVCache(params.cfg, dtype=params["tok_emb"].data.dtype)
        self.p = params.cfg.tokens_per_frame
        self._pending: deque[str] = deque()
        self._pf_prefix = A.per_frame_prefix_ids(voc)
        self.realized_ids: list[int] = []
        self.prime(A.system_ids(voc))

    @property
    def cache_tokens(self) -> int:
        return self.cache.length

    def prime(self, token_ids: list[int]) -> None:
        if token_ids:
            forward_step(self.params, self.cache, np.asarray(token_ids))
            self.realized_ids.extend(int(t) for t in token_ids)

    def inject_query(self, text: str) -> None:
        """Queued until the next frame boundary (or after the current response)."""
        self._pending.append(text)

    def _gate_id(self) -> int:
        if self.cfg.scheme == "per_frame":
            return self.voc.eos_id
        return self.voc.stream_eos_id

    def feed_frame(self, feature: np.ndarray) -> StepResult:
        """Frame slots, then queued user turns, then the silence decision.

        The realized token order matches the training layout, so replaying
        a sample's queries reproduces the assembler's sequence.
        """
        cfg = self.cfg
        chunk = [V.FRAME] * self.p
        while self._pending:
            chunk.extend(A.user_turn_ids(self.voc, self._pending.popleft()))
        if cfg.scheme == "per_frame":
            chunk.extend(self._pf_prefix)
        chunk = np.asarray(chunk, dtype=np.int64)
        logits = forward_step(self.params, self.cache, chunk,
                              frame_feats=feature[None, :], frame_cols=np.array([0]))
        self.realized_ids.extend(int(t) for t in chunk)
        ingested = len(chunk)
        decision, first = decide_eos(softmax_probs(logits[-1]), cfg.theta, self._gate_id())
        if decision == "silent":
            if cfg.scheme == "per_frame":
                # the silent answer is the one-token EOS, appended like any answer
                forward_step(self.params, self.cache, np.asarray([self.voc.eos_id]))
                self.realized_ids.append(self.voc.eos_id)
                ingested += 1
            return StepResult("silent", [], ingested)
        tokens = [first]
        last = forward_step(self.params, self.cache, np.asarray([first]))[-1]
        seos = self.voc.stream_eos_id
        while tokens[-1] != self.voc.eos_id and len(tokens) < cfg.max_response_tokens:
            probs = softmax_probs(last)
            masked = probs.copy()
            if not self.voc.tie_stream_eos:
                masked[seos] = -1.0   # silence label is never generated as text
            nxt = int(masked.argmax())
            tokens.append(nxt)
            last = forward_step(self.params, self.cache, np.asarray([nxt]))[-1]
        self.realized_ids.extend(tokens)
        ingested += len(tokens)
        text = self.voc.decode(tokens)
        return StepResult("speak", tokens, ingested, text)


class ScriptedSession:
    """Deterministic stand-in replaying a scheme's canonical turn structure.

    Used by throughput benches: streaming speaks only at gold turns,
    per_frame wraps every frame in the 10-token template, interleaved
    narrates the current activity at every frame.  Only token accounting
    matters, so the cache is a counter.
    """

    def __init__(self, sample: StreamSample, voc: Vocabulary, cfg: InferenceConfig,
                 p: int = 1):
        self.voc = voc
        self.cfg = cfg
        self.p = p
        self.sample = sample
        self.gold = {t.frame: t.text for t in sample.turns if t.kind == "assistant"}
        self.users = {}
        for t in sample.turns:
            if t.kind == "user":
                self.users.setdefault(t.frame, []).append(t.text)
        self._phrases = {a.uid: a.phrase for a in task_library()}
        self.cache_tokens = len(A.system_ids(voc))
        self._frame_cursor = 0

    def inject_query(self, text: str) -> None:
        pass   # scripted sessions replay the sample's own queries

    def _narration_text(self, frame: int) -> str:
        state = int(self.sample.states[frame])
        if state in self._phrases:
            return f"right now {self._phrases[state]}"
        return "right now nothing is happening"

    def feed_frame(self, frame_index: int) -> StepResult:
        cfg = self.cfg
        ingested = 0
        for text in self.users.get(frame_index, ()):
            ingested += len(A.user_turn_ids(self.voc, text))
        ingested += self.p
        gold = self.gold.get(frame_index)
        if cfg.scheme == "per_frame":
            ingested += len(A.per_frame_prefix_ids(self.voc))
            if gold is None:
                ingested += 1    # the EOS answer
                self.cache_tokens += ingested
                return StepResult("silent", [], ingested)
            tokens = self.voc.encode(gold) + [self.voc.eos_id]
        elif cfg.scheme == "interleaved":
            text = gold if gold is not None else self._narration_text(frame_index)
            tokens = A.assistant_turn_ids(self.voc, text)
        else:
            if gold is None:
                self.cache_tokens += ingested
                return StepResult("silent", [], ingested)
            tokens = A.assistant_turn_ids(self.voc, gold)
        ingested += len(tokens)
        self.cache_tokens += ingested
        return StepResult("speak", tokens, ingested, self.voc.decode(tokens))


# ---------------------------------------------------------------------------
# stream driving
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame_index: int
    arrival_ms: float
    decision: str               # "silent" | "spoke" | "skipped"
    response_text: str = ""
    response_start_ms: float = 0.0
    response_end_ms: float = 0.0


@dataclass
class StreamTranscript:
    records: list[FrameRecord] = field(default_factory=list)
    frames_skipped: int = 0
    peak_queue_depth: int = 0
    peak_cache_tokens: int = 0
    peak_encode_backlog: int = 0
    processed_frames: int = 0
    total_ms: float = 0.0
    processed_fps: float = 0.0

    def decisions(self) -> list[str]:
        return [r.decision for r in self.records]

    def summary(self) -> dict:
        return {
            "frames": len(self.records),
            "processed_frames": self.processed_frames,
            "frames_skipped": self.frames_skipped,
            "peak_queue_depth": self.peak_queue_depth,
            "peak_cache_tokens": self.peak_cache_tokens,
            "peak_encode_backlog": self.peak_encode_backlog,
            "total_ms": round(self.total_ms, 6),
            "processed_fps": round(self.processed_fps, 6),
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), separators=(",", ":")))
                f.write("\n")

    def write_summary(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=1, sort_keys=True)
            f.write("\n")


def queries_from_sample(sample: StreamSample, fps: float) -> list[tuple[float, str]]:
    """The sample's own user turns as (at_ms, text) injections."""
    frame_ms = 1000.0 / fps
    return [(t.frame * frame_ms, t.text) for t in sample.turns if t.kind == "user"]


def _frame_feeder(session, features):
    if isinstance(session, ScriptedSession):
        return lambda i: session.feed_frame(i)
    return lambda i: session.feed_frame(features[i])


def run_stream(session, sample: StreamSample, cfg: InferenceConfig,
               features: Optional[np.ndarray] = None,
               queries: Optional[list[tuple[float, str]]] = None) -> StreamTranscript:
    """Discrete-event simulation of encoder/FIFO/decoder over one stream.

    Fully deterministic: events are ordered by (time, priority, sequence).
    Queries are (at_ms, text) pairs appended at the first frame boundary
    at or after their time.
    """
    n = sample.num_frames
    frame_ms = 1000.0 / cfg.fps
    feed = _frame_feeder(session, features)
    pending_queries = sorted(
        (min(n - 1, max(0, math.ceil(at_ms / frame_ms))), text)
        for at_ms, text in (queries or ()))
    q_ptr = 0

    DEC_DONE, ENQ = 0, 1
    events: list[tuple[float, int, int, int]] = []
    seq = 0

    def push(t, prio, payload):
        nonlocal seq
        heapq.heappush(events, (t, prio, seq, payload))
        seq += 1

    fifo: deque[tuple[int, float]] = deque()
    tr = StreamTranscript()
    records: dict[int, FrameRecord] = {
        i: FrameRecord(i, arrival_ms=i * frame_ms, decision="skipped") for i in range(n)
    }
    dec_busy_until = 0.0
    dec_idle = True
    enq_done = 0
    next_retry: Optional[tuple[float, int]] = None

    def start_decode(now: float):
        nonlocal dec_busy_until, dec_idle, q_ptr
        frame_idx, _ = fifo.popleft()
        while q_ptr < len(pending_queries) and pending_queries[q_ptr][0] <= frame_idx:
            session.inject_query(pending_queries[q_ptr][1])
            q_ptr += 1
        result = feed(frame_idx)
        cost = result.ingested * cfg.decode_ms_per_token
        dec_busy_until = now + cost
        dec_idle = False
        rec = records[frame_idx]
        rec.decision = "spoke" if result.decision == "speak" else "silent"
        rec.response_text = result.text
        rec.response_start_ms = now
        rec.response_end_ms = dec_busy_until
        tr.processed_frames += 1
        tr.peak_cache_tokens = max(tr.peak_cache_tokens, session.cache_tokens)
        push(dec_busy_until, DEC_DONE, -1)

    # encode completions form a chain so a blocked encoder delays later frames
    enc_free = 0.0
    enq_times = []
    for i in range(n):
        start = max(i * frame_ms, enc_free)
        enc_free = start + cfg.encode_ms_per_frame
        enq_times.append(enc_free)
    push(enq_times[0], ENQ, 0)

    last_time = 0.0
    while events:
        now, prio, _, payload = heapq.heappop(events)
        last_time = max(last_time, now)
        if prio == DEC_DONE:
            dec_idle = True
            if fifo:
                start_decode(now)
            continue
        frame_idx = payload
        if len(fifo) >= cfg.queue_capacity:
            if cfg.skip_policy == "drop_oldest":
                dropped, _ = fifo.popleft()
                tr.frames_skipped += 1
                records[dropped].decision = "skipped"
            else:
                # encoder stalls holding this frame; retry when the decoder frees up
                tr.peak_encode_backlog = max(
                    tr.peak_encode_backlog,
                    sum(1 for j in range(frame_idx, n) if j * frame_ms <= now) or 1)
                push(max(dec_busy_until, now + 1e-9), ENQ, frame_idx)
                continue
        fifo.append((frame_idx, now))
        tr.peak_queue_depth = max(tr.peak_queue_depth, len(fifo))
        if frame_idx + 1 < n:
            nxt = frame_idx + 1
            push(max(enq_times[nxt], now + cfg.encode_ms_per_frame), ENQ, nxt)
        if dec_idle:
            start_decode(now)

    tr.records = [records[i] for i in range(n)]
    tr.total_ms = last_time
    span_s = max(n / cfg.fps, last_time / 1000.0)
    tr.processed_fps = tr.processed_frames / span_s if span_s > 0 else 0.0
    return tr


def run_stream_concurrent(session, sample: StreamSample, cfg: InferenceConfig,
                          features: Optional[np.ndarray] = None,
                          queries: Optional[list[tuple[float, str]]] = None,
                          time_scale: float = 0.0) -> StreamTranscript:
    """Wall-clock mode: encoder and decoder threads around a bounded queue.

    time_scale scales the latency model into real sleeps (0 disables
    sleeping entirely); decisions must match the simulated mode for
    latency-free configs.
    """
    n = sample.num_frames
    frame_ms = 1000.0 / cfg.fps
    feed = _frame_feeder(session, features)
    pending_queries = sorted(
        (min(n - 1, max(0, math.ceil(at_ms / frame_ms))), text)
        for at_ms, text in (queries or ()))
    q_ptr = 0
    q: queue_mod.Queue = queue_mod.Queue(maxsize=cfg.queue_capacity)
    tr = StreamTranscript()
    records = {i: FrameRecord(i, arrival_ms=i * frame_ms, decision="skipped")
               for i in range(n)}
    lock = threading.Lock()
    t0 = time.perf_counter()

    def producer():
        for i in range(n):
            if time_scale:
                target = t0 + (i * frame_ms + cfg.encode_ms_per_frame) * time_scale / 1000.0
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            while True:
                try:
                    q.put(i, timeout=0.05)
                    break
                except queue_mod.Full:
                    if cfg.skip_policy == "drop_oldest":
                        try:
                            dropped = q.get_nowait()
                            with lock:
                                tr.frames_skipped += 1
                                records[dropped].decision = "skipped"
                        except queue_mod.Empty:
                            pass
                    # block policy just retries
        q.put(-1)

    def consumer():
        nonlocal q_ptr
        while True:
            i = q.get()
            if i < 0:
                return
            while q_ptr < len(pending_queries) and pending_queries[q_ptr][0] <= i:
                session.inject_query(pending_queries[q_ptr][1])
                q_ptr += 1
            start = (time.perf_counter() - t0) * 1000.0
            result = feed(i)
            if time_scale:
                time.sleep(result.ingested * cfg.decode_ms_per_token * time_scale / 1000.0)
            with lock:
                rec = records[i]
                rec.decision = "spoke" if result.decision == "speak" else "silent"
                rec.response_text = result.text
                rec.response_start_ms = start
                rec.response_end_ms = (time.perf_counter() - t0) * 1000.0
                tr.processed_frames += 1
                tr.peak_queue_depth = max(tr.peak_queue_depth, q.qsize() + 1)
                tr.peak_cache_tokens = max(tr.peak_cache_tokens, session.cache_tokens)

    threads = [threading.Thread(target=producer), threading.Thread(target=consumer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    tr.records = [records[i] for i in range(n)]
    tr.total_ms = (time.perf_counter() - t0) * 1000.0
    span_s = max(n / cfg.fps, tr.total_ms / 1000.0)
    tr.processed_fps = tr.processed_frames / span_s if span_s > 0 else 0.0
    return tr
