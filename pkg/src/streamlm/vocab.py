"""Closed word-level vocabulary over the toy activity grammar.

Every phrase the data generator or a template can emit is composed from
these fixed word lists, so the token inventory is static and the model
head never meets an out-of-vocabulary word.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAD = 0
EOS = 1          # turn end, generated at the end of every response
STREAM_EOS = 2   # silence label on frame slots; never an input token
USER = 3
ASSISTANT = 4
FRAME = 5        # placeholder id occupying frame slots before projection

SPECIALS = ["<pad>", "</s>", "<seos>", "<user>", "<assistant>", "<frame>"]

VERBS = ["pick", "cut", "stir", "wash", "move", "open",
         "close", "fill", "shake", "wipe", "lift", "scrub"]
ADJS = ["red", "blue", "green", "small", "large", "shiny",
        "dirty", "clean", "heavy", "round"]
NOUNS = ["cup", "knife", "bowl", "pan", "box", "jar",
         "plate", "towel", "brush", "bottle", "spoon", "cloth"]
PREPS = ["on", "near", "under", "beside"]
PLACES = ["table", "shelf", "sink", "counter", "stove",
          "floor", "rack", "bench", "tray", "cart"]
TASK_WORDS = ["cooking", "cleaning", "packing", "sorting", "mixing", "fixing"]

FUNCTION_WORDS = [
    "you", "the", "a",
    # system prompt
    "watch", "live", "stream", "and", "reply", "when", "needed",
    # narration instruction
    "please", "narrate", "in", "real", "time",
    # per-frame turn template query
    "anything", "to", "report", "for", "this", "frame", "now",
    # dialogue query templates and their responses
    "what", "did", "just", "finish", "which", "step", "ended",
    "tell", "me", "last", "finished", "was", "done", "before",
    "completed", "are", "doing", "is", "happening", "current",
    "describe", "right", "going", "comes", "next", "will", "follow",
    "do", "predict", "following", "nothing", "yet", "earlier", "soon",
    "task",
]

SYSTEM_PROMPT = "watch the live stream and reply when needed"
NARRATION_QUERY = "please narrate the stream in real time"
PER_FRAME_QUERY = "anything to report for this frame now"


@dataclass(eq=False)
class Vocabulary:
    """Word-level vocab; `tie_stream_eos` folds the silence token into EOS."""

    tie_stream_eos: bool = False
    words: list[str] = field(default_factory=list)
    _ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.words:
            seen = set(SPECIALS)
            self.words = list(SPECIALS)
            for w in (FUNCTION_WORDS + VERBS + ADJS + NOUNS + PREPS
                      + PLACES + TASK_WORDS):
                if w not in seen:
                    seen.add(w)
                    self.words.append(w)
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def eos_id(self) -> int:
        return EOS

    @property
    def stream_eos_id(self) -> int:
        return EOS if self.tie_stream_eos else STREAM_EOS

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self._ids:
                raise KeyError(f"word not in closed vocabulary: {w!r}")
            ids.append(self._ids[w])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


def build_vocab(tie_stream_eos: bool = False) -> Vocabulary:
    return Vocabulary(tie_stream_eos=tie_stream_eos)
