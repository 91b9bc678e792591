"""Dense tensors with reverse-mode autodiff over a recorded op tape.

The op set is fixed to what the toy transformer needs: matmul, broadcast
add/mul, SiLU, causal row-softmax, RMS normalization, embedding lookup,
positional placement (scatter of frame tokens), sequence slice/concat,
weighted cross-entropy, plus shape plumbing (reshape/transpose/sum).

Ops work on plain Tensors with or without an active Tape.  Without a tape
they are just numpy calls wrapped in Tensor objects (the inference path);
with a tape every op appends a Node and backward() replays the tape in
exact reverse order.  Nodes hold parent uids, not parent Tensors, so big
intermediate arrays are freed by refcounting as soon as no backward
closure needs them.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.float32


class NonFiniteError(RuntimeError):
    """An op produced NaN or Inf; the message names the offending node."""


class PrecisionError(RuntimeError):
    """An operation required a precision mode that is not active."""


def set_precision(name: str) -> None:
    global _default_dtype
    if name not in DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def precision(name: str):
    """Temporarily switch the default float dtype ('f32' or 'f64')."""
    global _default_dtype
    prev = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = prev


_uid_counter = itertools.count(1)


class Tensor:
    """A dense array plus an optional gradient slot.

    `requires_grad` marks leaf parameters: backward() accumulates into
    their .grad.  Tensors produced by ops route gradients through the tape
    instead and never own a .grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "uid", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(dtype or _default_dtype)
            elif dtype is not None and arr.dtype != np.dtype(dtype):
                arr = arr.astype(dtype)
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "out_uid", "parents", "backward")

    def __init__(self, op, out_uid, parents, backward):
        self.op = op
        self.out_uid = out_uid
        # parents: tuple of (uid, leaf_tensor_or_None, needs_grad)
        self.parents = parents
        self.backward = backward


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; backward walks it in exact reverse.

    A tape (and the activations its closures retain) is confined to one
    worker; parameter tensors may be shared read-only across tapes.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._watched: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _finite_probe(arr: np.ndarray, op: str) -> None:
    # a full-array sum propagates any NaN/Inf and is a single cheap pass
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _grad_tracked(t: Tensor, tape: Tape) -> bool:
    if t.requires_grad:
        return True
    return t._from_op and t.uid in tape._watched


def _record(op: str, out: Tensor, parents: Sequence[Tensor],
            backward: Callable, needs: Sequence[bool],
            probed: bool = False) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    if tape.check_finite and not probed:
        _finite_probe(out.data, op)
    out._from_op = True
    if any(needs):
        tape._watched.add(out.uid)
    spec = tuple(
        (p.uid, p if (p.requires_grad and not p._from_op) else None, need)
        for p, need in zip(parents, needs)
    )
    tape.nodes.append(Node(op, out.uid, spec, backward))
    return out


def _needs(t: Tensor) -> bool:
    tape = active_tape()
    if tape is None:
        return False
    return _grad_tracked(t, tape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad for every reachable leaf parameter of a scalar loss."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not tape.nodes:
        raise RuntimeError("backward called before any forward op was recorded")
    flowing: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = flowing.pop(node.out_uid, None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for (puid, leaf, need), pg in zip(node.parents, pgrads):
            if pg is None or not need:
                continue
            if leaf is not None:
                # leaf grads are checked once here; intermediate grads flow
                # into leaves eventually, so non-finite values cannot escape
                if tape.check_finite:
                    _finite_probe(pg, node.op + ".backward")
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
                leaf.grad += pg
            else:
                prev = flowing.get(puid)
                flowing[puid] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """np.matmul routed through plain 2-D/3-D BLAS paths.

    numpy's stacked-matmul iterator is far slower than GEMM for a 3-D
    operand against a 2-D weight and for leading batch dims of size 1,
    so collapse those cases explicitly.
    """
    if a.ndim == 2 and b.ndim == 2:
        return a @ b
    if b.ndim == 2:
        lead = a.shape[:-1]
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*lead, b.shape[-1])
    if a.ndim == b.ndim and a.ndim > 3 and a.shape[:-2] == b.shape[:-2]:
        batch = int(np.prod(a.shape[:-2]))
        if batch == 1:
            out = a.reshape(a.shape[-2:]) @ b.reshape(b.shape[-2:])
        else:
            out = np.matmul(a.reshape(batch, *a.shape[-2:]),
                            b.reshape(batch, *b.shape[-2:]))
        return out.reshape(*a.shape[:-2], a.shape[-2], b.shape[-1])
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; batch ranks must match or b is 2-D."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = Tensor(_mm(ad, bd))
    na, nb = _needs(a), _needs(b)

    def bwd(g, ad=ad, bd=bd, na=na, nb=nb):
        ga = gb = None
        if na:
            ga = _mm(g, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape)
        if nb:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _mm(np.swapaxes(ad, -1, -2), g)
                gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bwd, (na, nb))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    na, nb = _needs(a), _needs(b)
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g, ash=ash, bsh=bsh, na=na, nb=nb):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(g, bsh) if nb else None)

    return _record("add", out, (a, b), bwd, (na, nb))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python scalar treated as a constant."""
    if isinstance(b, (int, float)):
        out = Tensor(a.data * b)
        na = _needs(a)

        def bwd_scalar(g, b=b, na=na):
            return (g * b if na else None,)

        return _record("mul", out, (a,), bwd_scalar, (na,))
    out = Tensor(a.data * b.data)
    na, nb = _needs(a), _needs(b)
    ad, bd = a.data, b.data

    def bwd(g, ad=ad, bd=bd, na=na, nb=nb):
        return (_unbroadcast(g * bd, ad.shape) if na else None,
                _unbroadcast(g * ad, bd.shape) if nb else None)

    return _record("mul", out, (a, b), bwd, (na, nb))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the MLP activation."""
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = Tensor(xd * sig)
    nx = _needs(x)

    def bwd(g, xd=xd, sig=sig, nx=nx):
        if not nx:
            return (None,)
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _record("silu", out, (x,), bwd, (nx,))


_TRI_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _tri_idx(rows: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    key = (rows, width)
    got = _TRI_CACHE.get(key)
    if got is None:
        grid = np.arange(1, width)[None, :] > np.arange(rows)[:, None]
        r, c = np.nonzero(grid)
        got = (r, c + 1)
        _TRI_CACHE[key] = got
    return got


def row_softmax(x: Tensor, causal_offset: Optional[int] = None,
                inplace: bool = False) -> Tensor:
    """Softmax over the last axis.

    With causal_offset=k, row r may only attend to columns j <= k + r
    (k is the number of keys preceding the first query row); other entries
    get probability exactly 0.  causal_offset=None is a plain softmax.
    inplace=True consumes the input buffer (the caller must not read x
    afterwards); used on attention scores, which nothing else retains.
    """
    xd = x.data if inplace else x.data.copy()
    if causal_offset is not None:
        rows, cols = xd.shape[-2], xd.shape[-1]
        k = int(causal_offset)
        if cols > k + 1:
            r_idx, c_idx = _tri_idx(rows, cols - k)
            xd[..., r_idx, k + c_idx] = -np.inf
    m = xd.max(axis=-1, keepdims=True)
    np.subtract(xd, m, out=xd)
    np.exp(xd, out=xd)
    denom = xd.sum(axis=-1, keepdims=True)
    np.divide(xd, denom, out=xd)
    out = Tensor(xd)
    nx = _needs(x)
    tape = active_tape()
    if tape is not None and tape.check_finite:
        # entries lie in [0, 1]; any NaN/Inf in the input shows up in denom
        _finite_probe(denom, "row_softmax")

    def bwd(g, p=xd, nx=nx):
        if not nx:
            return (None,)
        dot = np.einsum("...ij,...ij->...i", g, p)[..., None]
        np.subtract(g, dot, out=g)
        np.multiply(g, p, out=g)
        return (g,)

    return _record("row_softmax", out, (x,), bwd, (nx,), probed=True)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x scaled to unit RMS over the last axis, then multiplied by gain."""
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = xd * inv
    out = Tensor(normed * gd)
    nx, ng = _needs(x), _needs(gain)

    def bwd(g, xd=xd, gd=gd, inv=inv, normed=normed, d=d, nx=nx, ng=ng):
        gx = ggain = None
        if ng:
            ggain = (g * normed).reshape(-1, d).sum(axis=0)
        if nx:
            gy = g * gd
            dot = np.sum(gy * xd, axis=-1, keepdims=True)
            gx = inv * gy - (inv ** 3 / d) * dot * xd
        return gx, ggain

    return _record("rms_norm", out, (x, gain), bwd, (nx, ng))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}")
    out = Tensor(table.data[idx])
    nt = _needs(table)

    def bwd(g, idx=idx, shape=table.data.shape, dtype=table.data.dtype, nt=nt):
        if not nt:
            return (None,)
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return _record("embedding", out, (table,), bwd, (nt,))


def place(base: Tensor, index, values: Tensor) -> Tensor:
    """Copy of base with rows at `index` (tuple of index arrays) replaced."""
    od = base.data.copy()
    od[index] = values.data
    out = Tensor(od)
    nb, nv = _needs(base), _needs(values)

    def bwd(g, index=index, nb=nb, nv=nv, vshape=values.data.shape):
        gb = gv = None
        if nv:
            gv = g[index].reshape(vshape)
        if nb:
            gb = g.copy()
            gb[index] = 0.0
        return gb, gv

    return _record("place", out, (base, values), bwd, (nb, nv))


def slice_seq(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    """Slice along a sequence axis; backward pads with zeros."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl])
    nx = _needs(x)

    def bwd(g, sl=sl, shape=x.data.shape, dtype=x.data.dtype, nx=nx):
        if not nx:
            return (None,)
        gx = np.zeros(shape, dtype=dtype)
        gx[sl] = g
        return (gx,)

    return _record("slice_seq", out, (x,), bwd, (nx,))


def concat_seq(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along a sequence axis; backward splits the gradient."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    needs = tuple(_needs(p) for p in parts)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g, sizes=sizes, axis=axis, needs=needs):
        splits = np.cumsum(sizes[:-1])
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _record("concat_seq", out, tuple(parts), bwd, needs)


def cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted sum of -log softmax(logits)[i, targets[i]] over rows.

    logits: (N, V); targets: (N,) int; weights: (N,) float (0 disables a row).
    Returns a scalar; weighting and any normalization live in `weights`.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got {ld.shape}")
    tgt = np.asarray(targets)
    w = np.asarray(weights, dtype=ld.dtype)
    if tgt.shape[0] != ld.shape[0] or w.shape[0] != ld.shape[0]:
        raise ValueError("cross_entropy: logits/targets/weights length mismatch")
    active = w != 0.0
    safe_tgt = np.where(active, tgt, 0)
    if safe_tgt.size and (safe_tgt.min() < 0 or safe_tgt.max() >= ld.shape[1]):
        raise ValueError("cross_entropy target id out of vocabulary range")
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    denom = e.sum(axis=-1, keepdims=True)
    logp = (ld - m) - np.log(denom)
    nll = -logp[np.arange(ld.shape[0]), safe_tgt]
    out = Tensor(np.asarray((nll * w).sum(), dtype=ld.dtype))
    nl = _needs(logits)

    def bwd(g, e=e, denom=denom, safe_tgt=safe_tgt, w=w, nl=nl):
        if not nl:
            return (None,)
        p = e / denom
        p[np.arange(p.shape[0]), safe_tgt] -= 1.0
        return (p * (w * float(g))[:, None],)

    return _record("cross_entropy", out, (logits,), bwd, (nl,))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    nx = _needs(x)

    def bwd(g, orig=x.data.shape, nx=nx):
        return (g.reshape(orig) if nx else None,)

    return _record("reshape", out, (x,), bwd, (nx,))


def transpose(x: Tensor, axes) -> Tensor:
    # contiguous result keeps BLAS bitwise-stable under sequence truncation
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    nx = _needs(x)
    inv = tuple(np.argsort(axes))

    def bwd(g, inv=inv, nx=nx):
        return (np.transpose(g, inv) if nx else None,)

    return _record("transpose", out, (x,), bwd, (nx,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    nx = _needs(x)

    def bwd(g, shape=x.data.shape, dtype=x.data.dtype, nx=nx):
        if not nx:
            return (None,)
        return (np.full(shape, float(g), dtype=dtype),)

    return _record("tsum", out, (x,), bwd, (nx,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    loss_fn must rebuild the forward pass from `params` on every call and
    return a scalar Tensor.  Requires 64-bit parameters: central differences
    at eps=1e-5 are meaningless in f32.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise PrecisionError(f"grad_check requires f64 parameters, {name} is {p.data.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn().item()
            flat[i] = orig - eps
            lm = loss_fn().item()
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            err = abs(ana[i] - num) / max(1e-8, abs(ana[i]) + abs(num))
            if err > worst:
                worst = err
    return worst
