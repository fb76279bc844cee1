"""Minimal reverse-mode autodiff over dense float64 arrays.

Every tensor op records a node on an implicit tape (creation order);
``backward`` replays the tape in reverse, accumulating gradients by
summation. Storage is row-major numpy, 64-bit only. No broadcasting
beyond the bias-add in ``linear``.
"""

from __future__ import annotations

import itertools
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

LAYER_NORM_VAR_FLOOR = 1e-5


class ShapeMismatchError(ValueError):
    """Raised when tensor operands have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    _counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[], None] | None = None
        self._seq = next(Tensor._counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t's gradient. own=True promises g is a fresh temporary
    that the caller will not reuse, so it can be adopted without copying."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own and isinstance(g, np.ndarray) else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"add: {a.data.shape} vs {b.data.shape}")

    def bw(out):
        def run():
            _accum(a, out.grad)
            _accum(b, out.grad)
        return run

    return _node(a.data + b.data, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(out):
        def run():
            _accum(x, out.grad * s, own=True)
        return run

    return _node(x.data * s, (x,), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mul: {a.data.shape} vs {b.data.shape}")

    def bw(out):
        def run():
            _accum(a, out.grad * b.data, own=True)
            _accum(b, out.grad * a.data, own=True)
        return run

    return _node(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.data.shape} x {b.data.shape}")

    def bw(out):
        def run():
            _accum(a, out.grad @ b.data.T, own=True)
            _accum(b, a.data.T @ out.grad, own=True)
        return run

    return _node(a.data @ b.data, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a 2-D tensor, got {x.data.shape}")

    def bw(out):
        def run():
            _accum(x, out.grad.T)
        return run

    return _node(np.ascontiguousarray(x.data.T), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(out):
        def run():
            _accum(x, out.grad * mask, own=True)
        return run

    return _node(np.maximum(x.data, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(out):
        def run():
            _accum(x, out.grad * y, own=True)
        return run

    return _node(y, (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim not in (1, 2) or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatchError(
            f"linear: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
        )
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"linear: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
        )
    x2 = x.data if x.data.ndim == 2 else x.data[None, :]
    y = x2 @ w.data + b.data
    if x.data.ndim == 1:
        y = y[0]

    def bw(out):
        def run():
            g = out.grad if out.grad.ndim == 2 else out.grad[None, :]
            _accum(x, (g @ w.data.T) if x.data.ndim == 2 else (g @ w.data.T)[0], own=True)
            _accum(w, x2.T @ g, own=True)
            _accum(b, g.sum(axis=0), own=True)
        return run

    return _node(y, (x, w, b), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"concat_channels needs 2-D tensors, got {a.data.shape}, {b.data.shape}"
        )
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"concat_channels: leading extents differ, {a.data.shape} vs {b.data.shape}"
        )
    c1 = a.data.shape[1]

    def bw(out):
        def run():
            _accum(a, out.grad[:, :c1])
            _accum(b, out.grad[:, c1:])
        return run

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs a 2-D tensor, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)), own=True)
        return run

    return _node(y, (x,), bw)


def layer_norm(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"layer_norm needs a 2-D tensor, got {x.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_VAR_FLOOR)
    y = (x.data - mu) * inv

    def bw(out):
        def run():
            g = out.grad
            gm = g.mean(axis=1, keepdims=True)
            gym = (g * y).mean(axis=1, keepdims=True)
            _accum(x, inv * (g - gm - y * gym), own=True)
        return run

    return _node(y, (x,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Summed cross-entropy of integer class targets against logit rows."""
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy needs 2-D logits, got {logits.data.shape}")
    t = np.asarray(targets, dtype=np.intp)
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ShapeMismatchError(
            f"cross_entropy: {t.shape[0] if t.ndim == 1 else t.shape} targets "
            f"for {logits.data.shape[0]} logit rows"
        )
    n_cls = logits.data.shape[1]
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise ValueError(f"cross_entropy: target index out of range [0, {n_cls})")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = np.log(e.sum(axis=1)) + m[:, 0]
    rows = np.arange(t.shape[0])
    loss = float((lse - logits.data[rows, t]).sum())
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def run():
            g = probs.copy()
            g[rows, t] -= 1.0
            _accum(logits, g * out.grad, own=True)
        return run

    return _node(np.float64(loss), (logits,), bw)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"l1_loss: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    sgn = np.sign(diff)

    def bw(out):
        def run():
            _accum(a, sgn * out.grad, own=True)
            _accum(b, -sgn * out.grad, own=True)
        return run

    return _node(np.float64(np.abs(diff).sum()), (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(out):
        def run():
            _accum(x, np.full_like(x.data, float(out.grad)), own=True)
        return run

    return _node(np.float64(x.data.sum()), (x,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def bw(out):
        def run():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            _accum(x, g, own=True)
        return run

    return _node(x.data[idx], (x,), bw)


def interp_rows(x: Tensor, idx, weights) -> Tensor:
    """Per query q: sum_j weights[q, j] * x[idx[q, j]]. idx/weights are constants."""
    idx = np.asarray(idx, dtype=np.intp)
    w = np.asarray(weights, dtype=np.float64)
    if x.data.ndim != 2 or idx.shape != w.shape or idx.ndim != 2:
        raise ShapeMismatchError(
            f"interp_rows: x{x.data.shape} idx{idx.shape} w{w.shape}"
        )
    y = (x.data[idx] * w[:, :, None]).sum(axis=1)

    def bw(out):
        def run():
            g = np.zeros_like(x.data)
            contrib = w[:, :, None] * out.grad[:, None, :]
            np.add.at(g, idx.ravel(), contrib.reshape(-1, x.data.shape[1]))
            _accum(x, g, own=True)
        return run

    return _node(y, (x,), bw)


def segment_max(x: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Componentwise max over contiguous row segments. Every segment non-empty."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    if x.data.ndim != 2 or seg.shape != (x.data.shape[0],):
        raise ShapeMismatchError(f"segment_max: x{x.data.shape} seg{seg.shape}")
    if np.any(np.diff(seg) < 0):
        raise ValueError("segment_max: segment ids must be non-decreasing")
    starts = np.searchsorted(seg, np.arange(n_segments))
    if not np.array_equal(np.unique(seg), np.arange(n_segments)):
        raise ValueError("segment_max: every segment must be non-empty")
    y = np.maximum.reduceat(x.data, starts, axis=0)

    def bw(out):
        def run():
            # route gradient to the first row attaining the max per (segment, channel)
            rows = np.arange(x.data.shape[0])[:, None]
            is_max = x.data == y[seg]
            cand = np.where(is_max, rows, x.data.shape[0])
            argrow = np.minimum.reduceat(cand, starts, axis=0)
            g = np.zeros_like(x.data)
            cols = np.broadcast_to(np.arange(x.data.shape[1]), argrow.shape)
            np.add.at(g, (argrow.ravel(), cols.ravel()), out.grad.ravel())
            _accum(x, g, own=True)
        return run

    return _node(y, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad across the graph reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar, got {loss.data.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        t._backward()


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over elements of |analytic - numeric| / max(1, |numeric|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(a - n) / np.maximum(1.0, np.abs(n))).max())


def check_gradient(
    build: Callable[[Sequence[np.ndarray]], Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-6,
) -> float:
    """Compare the graph's gradients of build(inputs) against finite differences.

    ``build`` must construct a fresh scalar-loss graph from raw arrays each
    call. Returns the worst relative error across all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(x, i=i):
            probe = [Tensor(a) for a in arrays]
            probe[i] = Tensor(x)
            return float(build(probe).data)
        num = numeric_grad(f, arrays[i].copy(), h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, grad_rel_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# serialization: magic "LODT", version u32, rank u32, extents u64, f64 payload

_MAGIC = b"LODT"
_VERSION = 1


def save_tensor(fp: BinaryIO, t: Tensor) -> None:
    arr = np.ascontiguousarray(t.data, dtype=np.float64).reshape(t.data.shape)
    fp.write(_MAGIC)
    fp.write(struct.pack("<II", _VERSION, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(arr.astype("<f8").tobytes())


def load_tensor(fp: BinaryIO) -> Tensor:
    magic = fp.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fp.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fp.read(8 * count), dtype="<f8").reshape(shape)
    return Tensor(data.copy())
