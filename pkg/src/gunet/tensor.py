"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is sized for message-passing networks on sparse graphs:
matrix products, row gather/scatter, segment reductions, concatenation,
and a few pointwise maps.  Every operation records vector-Jacobian
closures on its result; :func:`backward` walks the recorded graph once
in reverse topological order and accumulates gradients additively, so a
tensor used on several paths receives the sum of all path gradients.

Also home to the Adam optimizer, the warmup/decay learning-rate
schedule, and the binary format used to persist named parameter sets.

Conventions
-----------
* all data is float64 and C-contiguous (row-major);
* index arrays are plain int64 numpy arrays, never Tensors;
* shape mismatches raise :class:`~gunet.errors.ShapeError` naming the
  primitive and both shapes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from gunet import kernels
from gunet.errors import CheckpointError, NumericError, ShapeError

__all__ = [
    "Tensor", "AffineParams", "matmul", "add", "multiply", "scale",
    "add_bias", "relu", "concat", "gather_rows", "scatter_rows",
    "broadcast_rows", "segment_sum", "segment_max", "sum_rows", "sum_all",
    "mean_all", "squared_error", "backward", "AdamState", "adam_step",
    "LrSchedule", "lr_at", "write_named_tensors", "read_named_tensors",
]

CHECKPOINT_MAGIC = b"GUNC"
CHECKPOINT_VERSION = 1


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    ``grad`` is ``None`` until :func:`backward` reaches the tensor.  Leaf
    tensors are created directly; interior nodes are created by ops and
    carry ``(parent, vjp)`` pairs used during the backward sweep.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()

    @classmethod
    def _op(cls, data: np.ndarray, parents) -> "Tensor":
        """Internal fast constructor for op results (data already float64)."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        kept = tuple((p, fn) for p, fn in parents if p.requires_grad)
        out.requires_grad = bool(kept)
        out._parents = kept
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class AffineParams:
    """Weight matrix plus bias for one affine map ``x @ W + b``."""

    W: Tensor
    b: Tensor


def _shape_check(op: str, cond: bool, *shapes) -> None:
    if not cond:
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"{op}: incompatible shapes {pretty}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Supports [n,k]@[k,m] -> [n,m] and [k]@[k,m] -> [m]."""
    ad, bd = a.data, b.data
    _shape_check("matmul", bd.ndim == 2 and ad.ndim in (1, 2)
                 and ad.shape[-1] == bd.shape[0], ad.shape, bd.shape)
    out = ad @ bd

    if ad.ndim == 2:
        def da(g):
            return g @ bd.T

        def db(g):
            return ad.T @ g
    else:
        def da(g):
            return bd @ g

        def db(g):
            return np.outer(ad, g)

    return Tensor._op(out, [(a, da), (b, db)])


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _shape_check("add", a.data.shape == b.data.shape, a.data.shape, b.data.shape)
    return Tensor._op(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _shape_check("multiply", a.data.shape == b.data.shape,
                 a.data.shape, b.data.shape)
    ad, bd = a.data, b.data
    return Tensor._op(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by the python scalar ``c``."""
    c = float(c)
    return Tensor._op(a.data * c, [(a, lambda g: g * c)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: [n,m] + [m] (or [m] + [m])."""
    xd, bd = x.data, b.data
    _shape_check("add_bias", bd.ndim == 1 and xd.shape[-1] == bd.shape[0],
                 xd.shape, bd.shape)
    if xd.ndim == 1:
        return Tensor._op(xd + bd, [(x, lambda g: g), (b, lambda g: g)])
    return Tensor._op(xd + bd, [(x, lambda g: g),
                                (b, lambda g: g.sum(axis=0))])


def relu(x: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is 0."""
    out = np.maximum(x.data, 0.0)
    return Tensor._op(out, [(x, lambda g: g * (out > 0.0))])


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis (all 1-D, or all 2-D with equal rows)."""
    if not parts:
        raise ShapeError("concat: no operands")
    ndim = parts[0].data.ndim
    for p in parts:
        _shape_check("concat", p.data.ndim == ndim
                     and (ndim == 1 or p.data.shape[0] == parts[0].data.shape[0]),
                     parts[0].data.shape, p.data.shape)
    out = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + [p.data.shape[-1] for p in parts])

    def make_vjp(lo, hi):
        return lambda g: g[..., lo:hi]

    return Tensor._op(out, [(p, make_vjp(offsets[i], offsets[i + 1]))
                            for i, p in enumerate(parts)])


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a [n,d] tensor: out[i] = x[idx[i]].

    ``idx[i] == -1`` yields a zero row (used for zero padding); such rows
    route no gradient.
    """
    _shape_check("gather_rows", x.data.ndim == 2, x.data.shape)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    has_pad = bool((idx < 0).any())
    if has_pad:
        out = x.data[np.maximum(idx, 0)]
        out[idx < 0] = 0.0
    else:
        out = x.data[idx]

    def dx(g):
        grad = np.zeros_like(x.data)
        kernels.index_add(grad, idx, np.ascontiguousarray(g))
        return grad

    return Tensor._op(out, [(x, dx)])


def scatter_rows(rows: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place [m,d] rows into a zero [n,d] tensor: out[idx[i]] += rows[i]."""
    _shape_check("scatter_rows", rows.data.ndim == 2, rows.data.shape)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n, rows.data.shape[1]), dtype=np.float64)
    kernels.index_add(out, idx, rows.data)
    return Tensor._op(out, [(rows, lambda g: g[idx])])


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D tensor into n identical rows; backward sums over rows."""
    _shape_check("broadcast_rows", v.data.ndim == 1, v.data.shape)
    out = np.ascontiguousarray(np.broadcast_to(v.data, (n, v.data.shape[0])))
    return Tensor._op(out, [(v, lambda g: g.sum(axis=0))])


def segment_sum(values: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Sum rows sharing a segment id into out[segment]; id -1 drops the row.

    1-D values are treated as single-column and return a 1-D result.
    """
    segments = np.asarray(segments, dtype=np.int64)
    vd = values.data
    _shape_check("segment_sum", vd.ndim in (1, 2)
                 and vd.shape[0] == segments.shape[0], vd.shape, segments.shape)
    squeeze = vd.ndim == 1
    v2 = vd[:, None] if squeeze else vd
    out = kernels.segment_sum(np.ascontiguousarray(v2), segments, n)

    def dv(g):
        g2 = g[:, None] if squeeze else g
        grad = g2[np.maximum(segments, 0)]  # fancy indexing copies
        grad[segments < 0] = 0.0
        return grad[:, 0] if squeeze else grad

    return Tensor._op(out[:, 0] if squeeze else out, [(values, dv)])


def segment_max(values: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Columnwise max of rows sharing a segment id; empty segments give 0.

    On ties the gradient flows to the first contributing row (smallest
    row index), which keeps pooling deterministic.
    """
    segments = np.asarray(segments, dtype=np.int64)
    vd = values.data
    _shape_check("segment_max", vd.ndim in (1, 2)
                 and vd.shape[0] == segments.shape[0], vd.shape, segments.shape)
    squeeze = vd.ndim == 1
    v2 = vd[:, None] if squeeze else vd
    out, argrow = kernels.segment_max(np.ascontiguousarray(v2), segments, n)
    m = v2.shape[0]

    def dv(g):
        g2 = g[:, None] if squeeze else g
        grad = kernels.max_grad_scatter(np.ascontiguousarray(g2), argrow, m)
        return grad[:, 0] if squeeze else grad

    return Tensor._op(out[:, 0] if squeeze else out, [(values, dv)])


def sum_rows(x: Tensor) -> Tensor:
    """Sum a [n,d] tensor over rows, yielding [d]."""
    _shape_check("sum_rows", x.data.ndim == 2, x.data.shape)
    n = x.data.shape[0]
    return Tensor._op(x.data.sum(axis=0),
                      [(x, lambda g: np.ascontiguousarray(
                          np.broadcast_to(g, (n,) + g.shape)))])


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements (scalar result)."""
    shp = x.data.shape
    return Tensor._op(np.asarray(x.data.sum()),
                      [(x, lambda g: np.full(shp, float(g)))])


def mean_all(x: Tensor) -> Tensor:
    """Mean of all elements (scalar result)."""
    shp = x.data.shape
    size = x.data.size
    _shape_check("mean_all", size > 0, shp)
    return Tensor._op(np.asarray(x.data.mean()),
                      [(x, lambda g: np.full(shp, float(g) / size))])


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference between two same-shape tensors (scalar)."""
    _shape_check("squared_error", pred.data.shape == target.data.shape,
                 pred.data.shape, target.data.shape)
    diff = pred.data - target.data
    size = diff.size
    out = np.asarray((diff * diff).mean() if size else 0.0)

    def dp(g):
        return (2.0 * float(g) / size) * diff

    def dt(g):
        return (-2.0 * float(g) / size) * diff

    return Tensor._op(out, [(pred, dp), (target, dt)])


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded graph.

    Gradients accumulate additively into ``.grad`` of every reachable
    tensor with ``requires_grad``; repeated calls keep accumulating, which
    is what gradient averaging over a batch relies on.
    """
    if loss.data.ndim != 0:
        raise ShapeError(
            f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order: children complete before their parents
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    # Per-sweep gradients live in a local map so that repeated backward
    # calls over a shared subgraph never re-propagate already-accumulated
    # gradients; each sweep's result is then added into .grad.
    sweep = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = sweep.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            pid = id(parent)
            if pid in sweep:
                sweep[pid] = sweep[pid] + pg
            else:
                sweep[pid] = pg
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers for a named parameter set."""

    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """One Adam update with bias correction, applied in-place.

    ``params`` maps names to Tensors whose ``.grad`` holds the (already
    averaged) gradient.  Grads are left untouched; callers zero them.
    """
    if set(state.m) != set(params):
        raise NumericError("adam_step: moment buffers do not match parameter set")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise NumericError(f"adam_step: missing gradient for '{name}'")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class LrSchedule:
    """Linear warmup to ``base_lr`` followed by stepwise exponential decay."""

    warmup_steps: int = 2000
    base_lr: float = 0.002
    decay_rate: float = 0.98
    decay_interval: int = 100
    min_lr: float = 0.0002

    def __post_init__(self):
        if self.warmup_steps < 0 or self.decay_interval < 1:
            raise NumericError("LrSchedule: nonsensical step counts")
        if not (0.0 < self.min_lr <= self.base_lr):
            raise NumericError("LrSchedule: require 0 < min_lr <= base_lr")
        if not (0.0 < self.decay_rate <= 1.0):
            raise NumericError("LrSchedule: decay_rate must be in (0, 1]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a given global step (0-based)."""
    if step < 0:
        raise NumericError(f"lr_at: negative step {step}")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    periods = (step - schedule.warmup_steps) // schedule.decay_interval
    lr = schedule.base_lr * schedule.decay_rate ** periods
    return max(lr, schedule.min_lr)


# ---------------------------------------------------------------------------
# named-tensor serialization (shared by model checkpoints)


def write_named_tensors(path, tensors: dict) -> None:
    """Write name -> float64 array pairs to ``path``.

    Layout: magic ``GUNC``, u32 version, u32 count, then per tensor
    (sorted by name): u16 name length, UTF-8 name, u8 rank, u32 dims,
    float64 little-endian row-major payload.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            # ascontiguousarray would promote rank-0 to rank-1
            arr = np.asarray(tensors[name], dtype="<f8", order="C")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_named_tensors(path) -> dict:
    """Read a file written by :func:`write_named_tensors`.

    Raises :class:`CheckpointError` on bad magic, wrong version, or a
    truncated stream; never returns a partial result.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(
                f"checkpoint truncated reading {what}: "
                f"need {n} bytes at offset {off}, have {len(blob) - off}")
        piece = blob[off:off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        nbytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
        payload = take(nbytes, f"payload of '{name}'")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last tensor")
    return out
