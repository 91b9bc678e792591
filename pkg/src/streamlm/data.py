"""Synthetic annotated streams and their conversion to dialogue samples.

A world is a timeline of activity segments drawn from a fixed global task
library (each task is an ordered list of steps, so "what comes next" has a
learnable answer).  Worlds become either narration streams (standing
instruction, one assistant turn per segment onset) or dialogue streams
(tense templates answered at every critical timestamp, then filtered by
query insertion).  Frame features are regenerated from per-frame states
plus a seed and are never stored on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from . import vocab as V

BACKGROUND = -1

LIBRARY_SEED = 20240601
EMB_SALT = 0x5EED
NOISE_SALT = 0x0A15E
N_TASKS = 6
STEPS_PER_TASK = 5


class DataError(ValueError):
    pass


class JsonlSchemaError(ValueError):
    pass


def derive_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def _rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


# ---------------------------------------------------------------------------
# global task library
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Activity:
    uid: int
    task: int
    step: int
    phrase: str


@lru_cache(maxsize=1)
def task_library() -> tuple[Activity, ...]:
    """30 activities (6 tasks x 5 ordered steps) with distinct 9-word phrases."""
    rng = _rng(LIBRARY_SEED)
    seen: set[tuple] = set()
    acts: list[Activity] = []
    for task in range(N_TASKS):
        for step in range(STEPS_PER_TASK):
            while True:
                combo = (rng.choice(V.VERBS), rng.choice(V.ADJS), rng.choice(V.NOUNS),
                         rng.choice(V.PREPS), rng.choice(V.ADJS), rng.choice(V.PLACES))
                if combo not in seen:
                    break
            seen.add(combo)
            verb, adj, noun, prep, adj2, place = combo
            phrase = f"you {verb} the {adj} {noun} {prep} the {adj2} {place}"
            acts.append(Activity(uid=len(acts), task=task, step=step, phrase=phrase))
    return tuple(acts)


def task_name(task: int) -> str:
    return f"the {V.TASK_WORDS[task]} task"


@lru_cache(maxsize=None)
def state_embedding(state: int, dim: int) -> np.ndarray:
    """Fixed per-activity feature centroid (state -1 is background)."""
    emb = _rng(EMB_SALT, state + 1, dim).standard_normal(dim)
    emb.setflags(write=False)
    return emb


def materialize_features(states: np.ndarray, dim: int, sigma: float,
                         noise_key: int) -> np.ndarray:
    """Per-frame features: activity centroid + N(0, sigma^2) noise."""
    states = np.asarray(states)
    table = np.stack([state_embedding(s, dim) for s in range(-1, len(task_library()))])
    feats = table[states + 1].astype(np.float64)
    if sigma > 0:
        feats = feats + sigma * _rng(NOISE_SALT, noise_key).standard_normal(feats.shape)
    return feats


# ---------------------------------------------------------------------------
# worlds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    num_frames: int = 600      # 5 minutes at 2 FPS
    fps: float = 2.0
    seg_min: int = 3           # 1.5..4 s activities: dense narration streams
    seg_max: int = 8
    gap_prob: float = 0.25
    gap_min: int = 1
    gap_max: int = 2
    max_tasks: int = 30        # tasks tiled one after another until frames run out
    noise_sigma: float = 0.05
    feature_dim: int = 16

    def __post_init__(self):
        if self.seg_min > self.seg_max:
            raise DataError(f"seg_min {self.seg_min} > seg_max {self.seg_max}")
        if self.num_frames < self.seg_min + 1:
            raise DataError(
                f"num_frames {self.num_frames} too small for one {self.seg_min}-frame segment")


@dataclass
class Segment:
    activity: int
    phrase: str
    start: int
    end: int            # exclusive


@dataclass
class AnnotatedVideo:
    fps: float
    num_frames: int
    segments: list[Segment]
    states: np.ndarray            # (num_frames,) activity uid or BACKGROUND
    frame_features: np.ndarray    # (num_frames, feature_dim)
    task: int
    task_name: str
    noise_key: int


def gen_world(cfg: WorldConfig, seed: int) -> AnnotatedVideo:
    """Deterministic world: tasks tiled in step order with optional gaps."""
    rng = _rng(seed)
    lib = task_library()
    first_task = None
    t = 0
    if rng.random() < cfg.gap_prob:
        t += int(rng.integers(cfg.gap_min, cfg.gap_max + 1))
    segments: list[Segment] = []
    for _ in range(cfg.max_tasks):
        task = int(rng.integers(N_TASKS))
        if first_task is None:
            first_task = task
        for act in (a for a in lib if a.task == task):
            if t + cfg.seg_min > cfg.num_frames - 1:
                break
            dur = int(rng.integers(cfg.seg_min, cfg.seg_max + 1))
            end = min(t + dur, cfg.num_frames - 1)
            segments.append(Segment(activity=act.uid, phrase=act.phrase,
                                    start=t, end=end))
            t = end
            if rng.random() < cfg.gap_prob:
                t += int(rng.integers(cfg.gap_min, cfg.gap_max + 1))
        if t + cfg.seg_min > cfg.num_frames - 1:
            break
    if not segments:
        raise DataError("world generation produced no segments; num_frames too small")
    task = first_task
    states = np.full(cfg.num_frames, BACKGROUND, dtype=np.int16)
    for seg in segments:
        states[seg.start:seg.end] = seg.activity
    feats = materialize_features(states, cfg.feature_dim, cfg.noise_sigma, seed)
    return AnnotatedVideo(fps=cfg.fps, num_frames=cfg.num_frames, segments=segments,
                          states=states, frame_features=feats, task=task,
                          task_name=task_name(task), noise_key=seed)


def critical_timestamps(video: AnnotatedVideo) -> list[int]:
    """Sorted union of all segment starts and ends."""
    ts = {s.start for s in video.segments} | {s.end for s in video.segments}
    return sorted(ts)


# ---------------------------------------------------------------------------
# stream samples
# ---------------------------------------------------------------------------


@dataclass
class Turn:
    kind: str       # "user" | "assistant"
    frame: int
    text: str


@dataclass
class StreamSample:
    fps: float
    num_frames: int
    source: str     # "narration" | "dialogue"
    states: np.ndarray
    turns: list[Turn]

    def iter_events(self):
        """Frames and turns in temporal order (turns follow their frame)."""
        by_frame: dict[int, list[Turn]] = {}
        for turn in self.turns:
            by_frame.setdefault(turn.frame, []).append(turn)
        for i in range(self.num_frames):
            yield ("frame", i, None)
            for turn in by_frame.get(i, ()):
                yield (turn.kind, i, turn.text)

    def features(self, dim: int, sigma: float, noise_key: int) -> np.ndarray:
        return materialize_features(self.states, dim, sigma, noise_key)


def _sort_turns(turns: list[Turn]) -> list[Turn]:
    return sorted(turns, key=lambda t: (t.frame, 0 if t.kind == "user" else 1))


def make_narration_stream(video: AnnotatedVideo) -> StreamSample:
    """Standing narration instruction plus one assistant turn per segment onset."""
    turns = [Turn("user", 0, V.NARRATION_QUERY)]
    for seg in video.segments:
        turns.append(Turn("assistant", seg.start, seg.phrase))
    return StreamSample(fps=video.fps, num_frames=video.num_frames,
                        source="narration", states=video.states.copy(),
                        turns=_sort_turns(turns))


# ---------------------------------------------------------------------------
# dialogue templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryTemplate:
    tense: str                  # "past" | "current" | "future"
    query: str
    prefix: str                 # leads the phrase of the selected segment
    none_text: str              # emitted when no segment qualifies

    def respond(self, video: AnnotatedVideo, ts: int) -> str:
        if self.tense == "past":
            done = [s for s in video.segments if s.end <= ts]
            seg = done[-1] if done else None
        elif self.tense == "current":
            seg = next((s for s in video.segments if s.start <= ts < s.end), None)
        elif self.tense == "future":
            seg = next((s for s in video.segments if s.start > ts), None)
        else:
            raise DataError(f"unknown tense {self.tense!r}")
        if seg is None:
            return self.none_text
        return f"{self.prefix} {seg.phrase}"


PAST_NONE = "nothing was finished yet"
CURRENT_NONE = "right now nothing is happening"
FUTURE_NONE = "the task is done soon"

TEMPLATES: list[QueryTemplate] = [
    QueryTemplate("past", "what did you just finish", "earlier", PAST_NONE),
    QueryTemplate("past", "which step just ended", "earlier", PAST_NONE),
    QueryTemplate("past", "tell me the last finished step", "earlier", PAST_NONE),
    QueryTemplate("past", "what was done before now", "earlier", PAST_NONE),
    QueryTemplate("past", "report the step you completed", "earlier", PAST_NONE),
    QueryTemplate("current", "what are you doing now", "right now", CURRENT_NONE),
    QueryTemplate("current", "which step is happening now", "right now", CURRENT_NONE),
    QueryTemplate("current", "tell me the current step", "right now", CURRENT_NONE),
    QueryTemplate("current", "describe the step right now", "right now", CURRENT_NONE),
    QueryTemplate("current", "what is going on now", "right now", CURRENT_NONE),
    QueryTemplate("future", "what comes next", "next", FUTURE_NONE),
    QueryTemplate("future", "which step will follow", "next", FUTURE_NONE),
    QueryTemplate("future", "tell me the next step", "next", FUTURE_NONE),
    QueryTemplate("future", "what will you do next", "next", FUTURE_NONE),
    QueryTemplate("future", "predict the following step", "next", FUTURE_NONE),
]


@dataclass
class SynthesizedQuery:
    template: QueryTemplate
    query: str
    responses: list[tuple[int, str]]   # (frame, text) at every critical timestamp


def synthesize_dialogue(video: AnnotatedVideo, templates: list[QueryTemplate],
                        seed: int, n_queries: int = 3) -> list[SynthesizedQuery]:
    """One response per critical timestamp for each sampled query."""
    if not templates:
        raise DataError("templates must be non-empty")
    rng = _rng(seed, 1)
    crits = critical_timestamps(video)
    out = []
    for idx in rng.integers(0, len(templates), size=n_queries):
        tpl = templates[int(idx)]
        responses = []
        for ts in crits:
            text = tpl.respond(video, ts)
            if not text:
                raise DataError(f"template {tpl.query!r} rendered empty text at frame {ts}")
            responses.append((ts, text))
        out.append(SynthesizedQuery(template=tpl, query=tpl.query, responses=responses))
    return out


def insert_queries(video: AnnotatedVideo, synthesized: list[SynthesizedQuery],
                   max_queries: int, seed: int,
                   t_rs: Optional[list[int]] = None) -> StreamSample:
    """Place queries on the timeline and filter responses by scope.

    Responses before a query's insertion frame are dropped, a response is
    added at the insertion frame itself, and an earlier query's responses
    at or past the next query's insertion frame are dropped.
    """
    if not 1 <= max_queries <= 3:
        raise DataError(f"max_queries must be in [1, 3], got {max_queries}")
    rng = _rng(seed, 2)
    if t_rs is None:
        k = int(rng.integers(1, max_queries + 1))
        k = min(k, len(synthesized))
        t_rs = sorted(int(x) for x in
                      rng.choice(video.num_frames, size=k, replace=False))
    else:
        t_rs = sorted(int(x) for x in t_rs)
        for t in t_rs:
            if not 0 <= t < video.num_frames:
                raise DataError(f"insertion frame {t} out of range [0, {video.num_frames})")
        if len(set(t_rs)) != len(t_rs):
            raise DataError("insertion frames must be distinct")
        k = len(t_rs)
    chosen = rng.choice(len(synthesized), size=k, replace=False)
    turns: list[Turn] = []
    for i, (t_r, qi) in enumerate(zip(t_rs, chosen)):
        q = synthesized[int(qi)]
        scope_end = t_rs[i + 1] if i + 1 < k else video.num_frames
        turns.append(Turn("user", t_r, q.query))
        turns.append(Turn("assistant", t_r, q.template.respond(video, t_r)))
        for ts, text in q.responses:
            if t_r < ts < scope_end:
                turns.append(Turn("assistant", ts, text))
    return StreamSample(fps=video.fps, num_frames=video.num_frames,
                        source="dialogue", states=video.states.copy(),
                        turns=_sort_turns(turns))


# ---------------------------------------------------------------------------
# jsonl io
# ---------------------------------------------------------------------------

SCHEMA_VERSION = 1
_REQUIRED = ("version", "fps", "num_frames", "source", "states", "events")


def sample_to_dict(sample: StreamSample) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "fps": float(sample.fps),
        "num_frames": int(sample.num_frames),
        "source": sample.source,
        "states": [int(s) for s in sample.states],
        "events": [{"kind": t.kind, "frame": int(t.frame), "text": t.text}
                   for t in sample.turns],
    }


def sample_from_dict(row: dict) -> StreamSample:
    try:
        turns = [Turn(e["kind"], int(e["frame"]), e["text"]) for e in row["events"]]
        return StreamSample(fps=float(row["fps"]), num_frames=int(row["num_frames"]),
                            source=row["source"],
                            states=np.asarray(row["states"], dtype=np.int16),
                            turns=turns)
    except (KeyError, TypeError, ValueError) as exc:
        raise JsonlSchemaError(f"malformed sample record: {exc}") from exc


def write_jsonl(samples: list[StreamSample], path) -> None:
    with open(path, "w") as f:
        for sample in samples:
            f.write(json.dumps(sample_to_dict(sample), separators=(",", ":")))
            f.write("\n")


def read_jsonl(path) -> list[StreamSample]:
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlSchemaError(f"{path}: line {lineno}: malformed JSON: {exc}") from exc
            for key in _REQUIRED:
                if key not in row:
                    raise JsonlSchemaError(f"{path}: line {lineno}: missing field {key!r}")
            if row["version"] != SCHEMA_VERSION:
                raise JsonlSchemaError(
                    f"{path}: line {lineno}: schema version {row['version']}, "
                    f"expected {SCHEMA_VERSION}")
            samples.append(sample_from_dict(row))
    return samples


# ---------------------------------------------------------------------------
# dataset pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    n_samples: int = 220
    val_fraction: float = 0.1
    dialogue_fraction: float = 0.0
    max_queries: int = 3
    seed: int = 17


@dataclass
class LoadedDataset:
    samples: list[StreamSample]
    noise_keys: list[int]
    feature_dim: int
    noise_sigma: float
    fps: float

    def features_for(self, index: int) -> np.ndarray:
        return self.samples[index].features(self.feature_dim, self.noise_sigma,
                                            self.noise_keys[index])


def build_samples(cfg: DataConfig) -> tuple[list[StreamSample], list[int]]:
    """All samples plus their feature noise keys, in generation order."""
    samples, keys = [], []
    for i in range(cfg.n_samples):
        sample_seed = derive_seed(cfg.seed, i)
        video = gen_world(cfg.world, sample_seed)
        kind_rng = _rng(sample_seed, 3)
        if kind_rng.random() < cfg.dialogue_fraction:
            synth = synthesize_dialogue(video, TEMPLATES, sample_seed)
            sample = insert_queries(video, synth, cfg.max_queries, sample_seed)
        else:
            sample = make_narration_stream(video)
        samples.append(sample)
        keys.append(sample_seed)
    return samples, keys


def generate_dataset(cfg: DataConfig, out_dir) -> dict:
    """Write train/val JSONL plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, keys = build_samples(cfg)
    n_val = int(round(cfg.n_samples * cfg.val_fraction))
    n_train = cfg.n_samples - n_val
    write_jsonl(samples[:n_train], out_dir / "train.jsonl")
    write_jsonl(samples[n_train:], out_dir / "val.jsonl")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "n_train": n_train,
        "n_val": n_val,
        "world": asdict(cfg.world),
        "dialogue_fraction": cfg.dialogue_fraction,
        "max_queries": cfg.max_queries,
        "train_keys": keys[:n_train],
        "val_keys": keys[n_train:],
        "sources": {
            "narration": sum(s.source == "narration" for s in samples),
            "dialogue": sum(s.source == "dialogue" for s in samples),
        },
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(out_dir, split: str = "train") -> LoadedDataset:
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json") as f:
        manifest = json.load(f)
    samples = read_jsonl(out_dir / f"{split}.jsonl")
    keys = manifest[f"{split}_keys"]
    if len(keys) != len(samples):
        raise JsonlSchemaError(f"{split} manifest keys disagree with jsonl line count")
    world = manifest["world"]
    return LoadedDataset(samples=samples, noise_keys=keys,
                         feature_dim=world["feature_dim"],
                         noise_sigma=world["noise_sigma"], fps=world["fps"])
