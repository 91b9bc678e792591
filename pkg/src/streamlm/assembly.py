"""Temporal sequence assembly and dual-loss masks for the three schemes.

All schemes share one layout skeleton: system prompt, then frames in
temporal order (p slots each) with user/assistant turns right after their
frame.  They differ in supervision:

  streaming    — LM loss on response tokens, silence loss on the last slot
                 of every frame that does not immediately precede a response.
  interleaved  — LM loss on response tokens only; no frame supervision.
  per_frame    — every frame becomes a dialogue turn behind a fixed
                 9-token template prefix (role markers + 7 query words);
                 silent frames answer a bare turn-EOS (10 template tokens
                 total), response frames answer their text, all with plain
                 LM loss on the answers.

The silence token is a supervision label only: it never appears as an
input token in any assembly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import vocab as V
from .data import StreamSample
from .model import ContextOverflowError
from .vocab import Vocabulary

SCHEMES = ("streaming", "interleaved", "per_frame")

PER_FRAME_TEMPLATE_COST = 10   # USER + 7 query words + ASSISTANT + answer EOS


@lru_cache(maxsize=4)
def _system_ids(voc: Vocabulary) -> tuple[int, ...]:
    return tuple(voc.encode(V.SYSTEM_PROMPT))


def system_ids(voc: Vocabulary) -> list[int]:
    return list(_system_ids(voc))


def user_turn_ids(voc: Vocabulary, text: str) -> list[int]:
    return [V.USER] + voc.encode(text)


def assistant_turn_ids(voc: Vocabulary, text: str) -> list[int]:
    return [V.ASSISTANT] + voc.encode(text) + [voc.eos_id]


@lru_cache(maxsize=4)
def _pf_prefix(voc: Vocabulary) -> tuple[int, ...]:
    ids = tuple([V.USER] + voc.encode(V.PER_FRAME_QUERY) + [V.ASSISTANT])
    assert len(ids) + 1 == PER_FRAME_TEMPLATE_COST
    return ids


def per_frame_prefix_ids(voc: Vocabulary) -> list[int]:
    """Injected turn-template prefix; the answer (EOS or text+EOS) follows."""
    return list(_pf_prefix(voc))


@dataclass
class AssembledSequence:
    """Expanded training sequence for one sample under one scheme."""

    scheme: str
    token_ids: np.ndarray     # (L,) int32; FRAME at frame slots
    frame_cols: np.ndarray    # (num_frames,) position of each frame's first slot
    frame_last: np.ndarray    # (L,) bool; last slot of each frame
    is_target: np.ndarray     # (L,) bool; token is a supervised output token
    num_frames: int
    turn_spans: list[tuple[int, int, int]]   # (frame, start, stop) per assistant turn

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


@dataclass
class LossMask:
    """Predicting-position indicators for the dual loss.

    lm[j] is set when position j predicts a supervised output token
    (token j+1); silence[j] is set on frame-last positions whose next
    token is not one, so the two never overlap.
    """

    lm: np.ndarray        # (L,) bool
    silence: np.ndarray   # (L,) bool

    @property
    def n_active(self) -> int:
        return int(self.lm.sum() + self.silence.sum())


def assemble(sample: StreamSample, voc: Vocabulary, p: int,
             scheme: str = "streaming", max_context: int | None = None,
             label: str = "") -> AssembledSequence:
    """Expand a stream sample into model tokens under a scheme's layout."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    by_frame: dict[int, list] = {}
    for turn in sample.turns:
        by_frame.setdefault(turn.frame, []).append(turn)
    ids: list[int] = list(_system_ids(voc))
    target: list[bool] = [False] * len(ids)
    frame_cols = np.zeros(sample.num_frames, dtype=np.int64)
    frame_last_pos = []

    def emit(tok_ids, is_target=False):
        ids.extend(tok_ids)
        target.extend([is_target] * len(tok_ids))

    pf = scheme == "per_frame"
    pf_prefix = _pf_prefix(voc) if pf else ()
    turn_spans: list[tuple[int, int, int]] = []
    for f in range(sample.num_frames):
        frame_cols[f] = len(ids)
        emit([V.FRAME] * p)
        frame_last_pos.append(len(ids) - 1)
        turns = by_frame.get(f, ())
        has_response = False
        for turn in turns:
            if turn.kind == "user":
                emit(user_turn_ids(voc, turn.text))
            elif pf:
                has_response = True
                emit(pf_prefix)
                start = len(ids)
                emit(voc.encode(turn.text) + [voc.eos_id], is_target=True)
                turn_spans.append((f, start, len(ids)))
            else:
                has_response = True
                start = len(ids)
                emit(assistant_turn_ids(voc, turn.text), is_target=True)
                turn_spans.append((f, start, len(ids)))
        if pf and not has_response:
            emit(pf_prefix)
            emit([voc.eos_id], is_target=True)
    if max_context is not None and len(ids) > max_context:
        name = f" for sample {label!r}" if label else ""
        raise ContextOverflowError(
            f"{scheme} assembly{name} needs {len(ids)} tokens, "
            f"max_context is {max_context}")
    frame_last = np.zeros(len(ids), dtype=bool)
    frame_last[frame_last_pos] = True
    return AssembledSequence(
        scheme=scheme,
        token_ids=np.asarray(ids, dtype=np.int32),
        frame_cols=frame_cols,
        frame_last=frame_last,
        is_target=np.asarray(target, dtype=bool),
        num_frames=sample.num_frames,
        turn_spans=turn_spans,
    )


def assemble_interleaved(sample, voc, p, **kw) -> AssembledSequence:
    return assemble(sample, voc, p, scheme="interleaved", **kw)


def assemble_per_frame(sample, voc, p, **kw) -> AssembledSequence:
    return assemble(sample, voc, p, scheme="per_frame", **kw)


def compute_masks(seq: AssembledSequence) -> LossMask:
    """LM mask where the next token is supervised; silence mask elsewhere
    on frame-last slots (streaming scheme only)."""
    L = len(seq)
    lm = np.zeros(L, dtype=bool)
    lm[:-1] = seq.is_target[1:]
    if seq.scheme == "streaming":
        silence = seq.frame_last & ~lm
    else:
        silence = np.zeros(L, dtype=bool)
    return LossMask(lm=lm, silence=silence)


def next_token_targets(seq: AssembledSequence) -> np.ndarray:
    """targets[j] = token j+1 (PAD past the end); only masked slots matter."""
    tgt = np.full(len(seq), V.PAD, dtype=np.int64)
    tgt[:-1] = seq.token_ids[1:]
    return tgt


def silent_frame_count(sample: StreamSample) -> int:
    spoken = {t.frame for t in sample.turns if t.kind == "assistant"}
    return sample.num_frames - len(spoken)


PF_PREFIX_LEN = PER_FRAME_TEMPLATE_COST - 1   # template without its EOS answer


def per_frame_count_closed_form(streaming_len: int, silent_frames: int,
                                response_turns: int) -> int:
    """Token count of the per-frame assembly, computable before assembling.

    Every silent frame adds the full 10-token turn; every response turn
    swaps its 1-token role marker for the 9-token template prefix.
    """
    return (streaming_len + PER_FRAME_TEMPLATE_COST * silent_frames
            + (PF_PREFIX_LEN - 1) * response_turns)
