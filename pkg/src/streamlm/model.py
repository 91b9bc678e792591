"""Causal decoder-only transformer with a frame projector and KV cache.

Two forward paths exist on purpose and are held equivalent by tests:
`forward_full` runs whole (batched) sequences and is tape-differentiable;
`forward_step` advances a single stream incrementally against a KVCache
in plain numpy.  Long sequences run attention as a blocked causal
composition of the same primitive ops, skipping the dead upper triangle.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ContextOverflowError(RuntimeError):
    """Sequence would exceed max_context; overflow is a hard error."""


class CheckpointVersionError(RuntimeError):
    pass


class CorruptCheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 2
    max_context: int = 2048
    tokens_per_frame: int = 1      # 1 = CLS-only frames; 10 = CLS + 3x3 pooled
    frame_feature_dim: int = 16
    proj_hidden: int = 128
    mlp_hidden: int = 0            # 0 -> 4 * d_model
    attn_block: int = 1024         # query-block size for long-sequence attention

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.tokens_per_frame < 1:
            raise ValueError("tokens_per_frame must be >= 1")
        if self.max_context < 2 or self.vocab_size < 7:
            raise ValueError("invalid config dims")
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 4 * self.d_model)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Declared shape of every parameter, in construction order."""
    shapes: dict[str, tuple] = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.max_context, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        shapes[f"l{i}.att_gain"] = (cfg.d_model,)
        shapes[f"l{i}.wq"] = (cfg.d_model, cfg.d_model)
        shapes[f"l{i}.wk"] = (cfg.d_model, cfg.d_model)
        shapes[f"l{i}.wv"] = (cfg.d_model, cfg.d_model)
        shapes[f"l{i}.wo"] = (cfg.d_model, cfg.d_model)
        shapes[f"l{i}.mlp_gain"] = (cfg.d_model,)
        shapes[f"l{i}.w_gate"] = (cfg.d_model, cfg.mlp_hidden)
        shapes[f"l{i}.w_up"] = (cfg.d_model, cfg.mlp_hidden)
        shapes[f"l{i}.w_down"] = (cfg.mlp_hidden, cfg.d_model)
    shapes["final_gain"] = (cfg.d_model,)
    shapes["proj.w1"] = (cfg.frame_feature_dim, cfg.proj_hidden)
    shapes["proj.b1"] = (cfg.proj_hidden,)
    shapes["proj.w2"] = (cfg.proj_hidden, cfg.tokens_per_frame * cfg.d_model)
    shapes["proj.b2"] = (cfg.tokens_per_frame * cfg.d_model,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


class ModelParams:
    """Named parameter tensors; read-shareable once training is done."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


ZERO_INIT = ("wo", "w_down")  # residual-path output projections start at zero
ONE_INIT = ("att_gain", "mlp_gain", "final_gain")
ZERO_BIAS = ("proj.b1", "proj.b2")


def init_model(cfg: ModelConfig, seed: int, dtype=None) -> ModelParams:
    """Deterministic init: N(0, 0.02) weights, unit gains, zeroed residual outs."""
    dtype = np.dtype(dtype or T.default_dtype())
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if short in ONE_INIT:
            data = np.ones(shape)
        elif short in ZERO_INIT or name in ZERO_BIAS:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# packed batches (full-sequence path)
# ---------------------------------------------------------------------------


@dataclass
class PackedBatch:
    """Right-padded batch of expanded sequences for forward_full.

    token_ids carries FRAME at frame slots; frame embeddings are written
    over those positions from the projector output.
    """

    token_ids: np.ndarray        # (B, L) int32
    frame_feats: np.ndarray      # (Nf, c)
    frame_rows: np.ndarray       # (Nf,) batch row per frame
    frame_cols: np.ndarray       # (Nf,) column of each frame's first slot
    lengths: np.ndarray          # (B,)


def project_frames(params: ModelParams, feats: Tensor) -> Tensor:
    """2-layer MLP mapping (Nf, c) features to (Nf, p * d_model) tokens."""
    h = T.silu(T.add(T.matmul(feats, params["proj.w1"]), params["proj.b1"]))
    return T.add(T.matmul(h, params["proj.w2"]), params["proj.b2"])


def embed_frame(params: ModelParams, feature: np.ndarray) -> np.ndarray:
    """Frame tokens for one feature vector: (tokens_per_frame, d_model)."""
    cfg = params.cfg
    feature = np.asarray(feature, dtype=params["proj.w1"].data.dtype)
    if feature.shape != (cfg.frame_feature_dim,):
        raise ValueError(
            f"frame feature must have shape ({cfg.frame_feature_dim},), got {feature.shape}")
    out = project_frames(params, Tensor(feature[None, :]))
    return out.data.reshape(cfg.tokens_per_frame, cfg.d_model)


def _attention(params: ModelParams, i: int, x: Tensor) -> Tensor:
    cfg = params.cfg
    B, L, d = x.data.shape
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    h = T.rms_norm(x, params[f"l{i}.att_gain"])
    # scale folded into q so no full L x L score array gets rescaled
    q = T.mul(T.matmul(h, params[f"l{i}.wq"]), scale)
    q = T.transpose(T.reshape(q, (B, L, H, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(h, params[f"l{i}.wk"]), (B, L, H, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(T.matmul(h, params[f"l{i}.wv"]), (B, L, H, dh)), (0, 2, 1, 3))
    if L <= cfg.attn_block:
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        probs = T.row_softmax(scores, causal_offset=0, inplace=True)
        att = T.matmul(probs, v)
    else:
        parts = []
        for s in range(0, L, cfg.attn_block):
            e = min(s + cfg.attn_block, L)
            qb = T.slice_seq(q, s, e)
            kb = T.slice_seq(k, 0, e)
            vb = T.slice_seq(v, 0, e)
            scores = T.matmul(qb, T.transpose(kb, (0, 1, 3, 2)))
            probs = T.row_softmax(scores, causal_offset=s, inplace=True)
            parts.append(T.matmul(probs, vb))
        att = T.concat_seq(parts)
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, L, d))
    return T.add(x, T.matmul(att, params[f"l{i}.wo"]))


def _mlp(params: ModelParams, i: int, x: Tensor) -> Tensor:
    h = T.rms_norm(x, params[f"l{i}.mlp_gain"])
    gate = T.silu(T.matmul(h, params[f"l{i}.w_gate"]))
    up = T.matmul(h, params[f"l{i}.w_up"])
    return T.add(x, T.matmul(T.mul(gate, up), params[f"l{i}.w_down"]))


def forward_full(params: ModelParams, batch: PackedBatch) -> Tensor:
    """Logits (B, L, vocab) for a packed batch; causal; tape-differentiable."""
    cfg = params.cfg
    B, L = batch.token_ids.shape
    if L > cfg.max_context:
        raise ContextOverflowError(
            f"sequence length {L} exceeds max_context {cfg.max_context}")
    x = T.embedding(params["tok_emb"], batch.token_ids)
    if batch.frame_feats.shape[0]:
        p = cfg.tokens_per_frame
        vals = project_frames(params, Tensor(batch.frame_feats))
        vals = T.reshape(vals, (batch.frame_feats.shape[0] * p, cfg.d_model))
        rows = np.repeat(batch.frame_rows, p)
        cols = (batch.frame_cols[:, None] + np.arange(p)[None, :]).ravel()
        x = T.place(x, (rows, cols), vals)
    pos = T.embedding(params["pos_emb"], np.arange(L))
    x = T.add(x, pos)
    for i in range(cfg.n_layers):
        x = _attention(params, i, x)
        x = _mlp(params, i, x)
    x = T.rms_norm(x, params["final_gain"])
    return T.matmul(x, T.transpose(params["tok_emb"], (1, 0)))


def pack_single(token_ids: np.ndarray, frame_feats: np.ndarray,
                frame_cols: np.ndarray) -> PackedBatch:
    """Wrap one expanded sequence as a batch of size 1."""
    token_ids = np.asarray(token_ids, dtype=np.int32)
    return PackedBatch(
        token_ids=token_ids[None, :],
        frame_feats=np.asarray(frame_feats),
        frame_rows=np.zeros(len(frame_cols), dtype=np.int64),
        frame_cols=np.asarray(frame_cols, dtype=np.int64),
        lengths=np.array([token_ids.shape[0]]),
    )


# ---------------------------------------------------------------------------
# incremental path (KV cache)
# ---------------------------------------------------------------------------


class KVCache:
    """Per-layer growing key/value sequences for one decoding session.

    Buffers are preallocated (to max_context by default) and filled left
    to right; positions below `length` are never rewritten.
    """

    def __init__(self, cfg: ModelConfig, dtype=None, capacity: Optional[int] = None):
        dtype = np.dtype(dtype or T.default_dtype())
        self.cfg = cfg
        self.capacity = min(capacity or cfg.max_context, cfg.max_context)
        shape = (cfg.n_layers, cfg.n_heads, self.capacity, cfg.head_dim)
        self.k = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.length = 0

    def fork(self, reserve: Optional[int] = None) -> "KVCache":
        """Independent copy; with `reserve`, sized for that much headroom
        only (cheap forks for bounded scans)."""
        clone = KVCache.__new__(KVCache)
        clone.cfg = self.cfg
        if reserve is None:
            clone.capacity = self.capacity
            clone.k = self.k.copy()
            clone.v = self.v.copy()
        else:
            clone.capacity = min(self.length + reserve, self.cfg.max_context)
            shape = (self.cfg.n_layers, self.cfg.n_heads, clone.capacity,
                     self.cfg.head_dim)
            clone.k = np.zeros(shape, dtype=self.k.dtype)
            clone.v = np.zeros(shape, dtype=self.v.dtype)
            clone.k[:, :, : self.length] = self.k[:, :, : self.length]
            clone.v[:, :, : self.length] = self.v[:, :, : self.length]
        clone.length = self.length
        return clone

    def checksum(self) -> int:
        used_k = self.k[:, :, : self.length].tobytes()
        used_v = self.v[:, :, : self.length].tobytes()
        return hash((used_k, used_v, self.length))


def _rms_raw(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain


def _softmax_raw(scores: np.ndarray, offset: int) -> np.ndarray:
    rows, cols = scores.shape[-2], scores.shape[-1]
    col = np.arange(cols)
    limit = offset + np.arange(rows)
    masked = np.where(col[None, :] > limit[:, None], -np.inf, scores)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=-1, keepdims=True)


def _project_frames_raw(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    z = feats @ params["proj.w1"].data + params["proj.b1"].data
    z = z * (1.0 / (1.0 + np.exp(-z)))
    return z @ params["proj.w2"].data + params["proj.b2"].data


def forward_step(params: ModelParams, cache: KVCache, token_ids,
                 frame_feats=None, frame_cols=None) -> np.ndarray:
    """Append a chunk of items to the cache; return logits for new positions.

    token_ids: (n,) ids, FRAME at frame slots; frame_feats (nf, c) and
    frame_cols (nf,) give the features and first-slot offsets within the
    chunk.  Matches forward_full on the concatenated sequence.
    """
    cfg = params.cfg
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n = token_ids.shape[0]
    if n == 0:
        return np.zeros((0, cfg.vocab_size), dtype=cache.k.dtype)
    past = cache.length
    if past + n > cache.capacity:
        raise ContextOverflowError(
            f"cache length {past} + {n} new tokens exceeds "
            f"{'max_context' if cache.capacity == cfg.max_context else 'cache capacity'} "
            f"{cache.capacity}")
    H, dh = cfg.n_heads, cfg.head_dim
    x = params["tok_emb"].data[token_ids]
    if frame_feats is not None and len(frame_feats):
        p = cfg.tokens_per_frame
        fc = np.asarray(frame_cols)
        if fc.size and (fc.min() < 0 or fc.max() + p > n):
            raise ValueError(
                f"frame slots must lie inside the chunk: cols {fc.tolist()}, "
                f"p={p}, chunk length {n}")
        vals = _project_frames_raw(params, np.asarray(frame_feats, dtype=x.dtype))
        vals = vals.reshape(-1, cfg.d_model)
        cols = (fc[:, None] + np.arange(p)[None, :]).ravel()
        x = x.copy()
        x[cols] = vals
    x = x + params["pos_emb"].data[past:past + n]
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        h = _rms_raw(x, params[f"l{i}.att_gain"].data)
        q = (h @ params[f"l{i}.wq"].data).reshape(n, H, dh).transpose(1, 0, 2)
        k = (h @ params[f"l{i}.wk"].data).reshape(n, H, dh).transpose(1, 0, 2)
        v = (h @ params[f"l{i}.wv"].data).reshape(n, H, dh).transpose(1, 0, 2)
        cache.k[i][:, past:past + n] = k
        cache.v[i][:, past:past + n] = v
        keys = cache.k[i][:, : past + n]
        values = cache.v[i][:, : past + n]
        scores = np.matmul(q, keys.swapaxes(-1, -2)) * scale
        probs = _softmax_raw(scores, offset=past)
        att = np.matmul(probs, values).transpose(1, 0, 2).reshape(n, cfg.d_model)
        x = x + att @ params[f"l{i}.wo"].data
        h = _rms_raw(x, params[f"l{i}.mlp_gain"].data)
        gate = h @ params[f"l{i}.w_gate"].data
        gate = gate * (1.0 / (1.0 + np.exp(-gate)))
        up = h @ params[f"l{i}.w_up"].data
        x = x + (gate * up) @ params[f"l{i}.w_down"].data
    x = _rms_raw(x, params["final_gain"].data)
    logits = x @ params["tok_emb"].data.T
    cache.length = past + n
    return logits


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SLMCKPT\x00"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(params: ModelParams, path) -> None:
    """Little-endian binary: magic, version, config JSON, tensor table, payload."""
    cfg_blob = json.dumps(asdict(params.cfg), sort_keys=True).encode()
    entries = []
    payload = bytearray()
    for name, t in params.items():
        data = np.ascontiguousarray(t.data)
        entries.append((name, data.dtype, data.shape, len(payload), data.nbytes))
        payload.extend(data.tobytes())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(entries)))
        for name, dtype, shape, offset, nbytes in entries:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[dtype], len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(struct.pack("<QQ", offset, nbytes))
        f.write(bytes(payload))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        if blob[:8] != MAGIC:
            raise CorruptCheckpointError("bad magic; not a checkpoint file")
        off = 8
        (version,) = struct.unpack_from("<I", blob, off); off += 4
        if version != CKPT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version}, expected {CKPT_VERSION}")
        (cfg_len,) = struct.unpack_from("<I", blob, off); off += 4
        cfg = ModelConfig(**json.loads(blob[off:off + cfg_len])); off += cfg_len
        (n_entries,) = struct.unpack_from("<I", blob, off); off += 4
        table = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", blob, off); off += 2
            name = blob[off:off + name_len].decode(); off += name_len
            code, ndim = struct.unpack_from("<BB", blob, off); off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off); off += 4 * ndim
            offset, nbytes = struct.unpack_from("<QQ", blob, off); off += 16
            table.append((name, _CODE_DTYPES[code], shape, offset, nbytes))
        payload = blob[off:]
        expected = param_shapes(cfg)
        tensors: dict[str, Tensor] = {}
        for name, dtype, shape, offset, nbytes in table:
            if name not in expected or tuple(expected[name]) != tuple(shape):
                raise CorruptCheckpointError(
                    f"tensor {name!r} shape {shape} disagrees with embedded config")
            if offset + nbytes > len(payload):
                raise CorruptCheckpointError(f"payload truncated at tensor {name!r}")
            arr = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(shape)
            if not np.isfinite(arr).all():
                raise CorruptCheckpointError(f"tensor {name!r} holds non-finite values")
            tensors[name] = Tensor(arr.copy(), requires_grad=True)
        if set(tensors) != set(expected):
            raise CorruptCheckpointError("tensor table incomplete for embedded config")
    except (struct.error, IndexError, UnicodeDecodeError, KeyError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint: {exc}") from exc
    return ModelParams(cfg, tensors)
