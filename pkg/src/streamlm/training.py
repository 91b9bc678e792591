"""Dual-loss computation and the optimization loop.

The loss follows the dual-objective form: at every supervised position a
cross-entropy term on the next output token, at every silent frame-last
position a cross-entropy term pushing probability onto the silence token,
weighted by `stream_loss_weight` and normalized by the number of active
positions in each sample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from . import assembly as A
from .data import LoadedDataset
from .model import ModelParams, PackedBatch, forward_full
from .tensor import Tensor
from .vocab import Vocabulary


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "streaming"          # streaming | interleaved | per_frame
    stream_loss_weight: float = 1.0
    lr: float = 3e-4
    epochs: int = 2
    batch_size: int = 8
    seed: int = 0
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    check_finite: bool = True

    def __post_init__(self):
        if self.stream_loss_weight < 0:
            raise ValueError("stream_loss_weight must be >= 0")
        if self.scheme not in A.SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")


def live_loss(logits: Tensor, targets: np.ndarray, mask: A.LossMask,
              w: float, seos_id: int) -> tuple[Tensor, float, float]:
    """Normalized dual loss for one sequence.

    Returns (loss, lm_part, silence_part) with loss = lm + w * silence;
    the lm part does not depend on w.
    """
    flat = T.reshape(logits, (-1, logits.data.shape[-1])) if logits.data.ndim == 3 else logits
    L = flat.data.shape[0]
    if len(mask.lm) != L or len(mask.silence) != L or len(targets) != L:
        raise ValueError(
            f"mask/target length {len(mask.lm)}/{len(targets)} does not match logits rows {L}")
    n = max(mask.n_active, 1)
    lm_w = mask.lm.astype(flat.data.dtype) / n
    si_w = mask.silence.astype(flat.data.dtype) / n
    lm_sum = T.cross_entropy(flat, targets, lm_w)
    si_sum = T.cross_entropy(flat, np.full(L, seos_id, dtype=np.int64), si_w)
    loss = T.add(lm_sum, T.mul(si_sum, float(w)))
    return loss, float(lm_sum.data), float(si_sum.data)


@dataclass
class Batch:
    packed: PackedBatch
    targets: np.ndarray      # (B*L,)
    lm_w: np.ndarray         # (B*L,) normalized weights
    si_w: np.ndarray
    n_tokens: int            # real (unpadded) token count


def make_batch(seqs: list[A.AssembledSequence], feats: list[np.ndarray],
               dtype) -> Batch:
    """Right-pad assembled sequences into one packed batch.

    Per-sample losses are normalized by that sample's active-position
    count, then averaged over the batch; padding carries zero weight.
    """
    B = len(seqs)
    L = max(len(s) for s in seqs)
    token_ids = np.zeros((B, L), dtype=np.int32)
    targets = np.zeros((B, L), dtype=np.int64)
    lm_w = np.zeros((B, L))
    si_w = np.zeros((B, L))
    rows, cols, all_feats = [], [], []
    n_tokens = 0
    for b, (seq, ff) in enumerate(zip(seqs, feats)):
        n = len(seq)
        n_tokens += n
        token_ids[b, :n] = seq.token_ids
        targets[b, :n] = A.next_token_targets(seq)
        mask = A.compute_masks(seq)
        norm = max(mask.n_active, 1) * B
        lm_w[b, :n] = mask.lm / norm
        si_w[b, :n] = mask.silence / norm
        rows.extend([b] * seq.num_frames)
        cols.extend(seq.frame_cols.tolist())
        all_feats.append(ff)
    packed = PackedBatch(
        token_ids=token_ids,
        frame_feats=np.concatenate(all_feats).astype(dtype),
        frame_rows=np.asarray(rows, dtype=np.int64),
        frame_cols=np.asarray(cols, dtype=np.int64),
        lengths=np.asarray([len(s) for s in seqs]),
    )
    return Batch(packed=packed, targets=targets.ravel(), lm_w=lm_w.ravel(),
                 si_w=si_w.ravel(), n_tokens=n_tokens)


class Adam:
    """Adam with global-norm gradient clipping and a constant learning rate."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> float:
        cfg = self.cfg
        sq = 0.0
        for _, tns in self.params.items():
            if tns.grad is not None:
                sq += float((tns.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq))
        scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, tns in self.params.items():
            if tns.grad is None:
                continue
            g = tns.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            tns.data -= (cfg.lr * update).astype(tns.data.dtype)
        return norm


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(kw)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["step", "lm_loss", "eos_loss", "total", "lr", "tokens"],
                extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)

    def epoch_means(self) -> list[float]:
        if not self.rows:
            return []
        per_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            per_epoch.setdefault(r["epoch"], []).append(r["total"])
        return [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]


def train(dataset: LoadedDataset, params: ModelParams, voc: Vocabulary,
          cfg: TrainConfig, log: Optional[TrainLog] = None,
          batch_size: Optional[int] = None) -> TrainLog:
    """Optimize params in place over the dataset; deterministic given seed."""
    if not dataset.samples:
        raise ValueError("training dataset is empty")
    log = log if log is not None else TrainLog()
    mcfg = params.cfg
    dtype = params["tok_emb"].data.dtype
    bs = batch_size or cfg.batch_size
    seqs = [A.assemble(s, voc, mcfg.tokens_per_frame, scheme=cfg.scheme,
                       max_context=mcfg.max_context, label=str(i))
            for i, s in enumerate(dataset.samples)]
    feats = [dataset.features_for(i) for i in range(len(dataset.samples))]
    order = np.argsort([len(s) for s in seqs], kind="stable")
    batches = [order[i:i + bs] for i in range(0, len(order), bs)]
    opt = Adam(params, cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 41])))
    seos = voc.stream_eos_id
    step = 0
    for epoch in range(cfg.epochs):
        for bi in rng.permutation(len(batches)):
            idxs = batches[bi]
            batch = make_batch([seqs[i] for i in idxs], [feats[i] for i in idxs], dtype)
            params.zero_grad()
            with T.Tape(check_finite=cfg.check_finite) as tape:
                logits = forward_full(params, batch.packed)
                flat = T.reshape(logits, (-1, mcfg.vocab_size))
                lm_sum = T.cross_entropy(flat, batch.targets, batch.lm_w.astype(dtype))
                si_sum = T.cross_entropy(
                    flat, np.full(batch.targets.shape, seos, dtype=np.int64),
                    batch.si_w.astype(dtype))
                loss = T.add(lm_sum, T.mul(si_sum, cfg.stream_loss_weight))
            total = float(loss.data)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step} (epoch {epoch})")
            T.backward(loss, tape)
            opt.step()
            step += 1
            log.add(step=step, lm_loss=float(lm_sum.data), eos_loss=float(si_sum.data),
                    total=total, lr=cfg.lr, tokens=batch.n_tokens, epoch=epoch)
    return log
