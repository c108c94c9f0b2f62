"""A small dense-tensor library with reverse-mode differentiation.

Tensors wrap numpy arrays. Every op records its inputs and a closure that
pushes the output gradient back to them; :func:`backward` walks the recorded
graph in reverse topological order. Parameters are float32; reductions
accumulate in float64. Gradient checking runs the same code in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

LN_EPS = 1e-5
KL_EPS = 1e-8

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float32), requires_grad=True, name=name)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    def back(g):
        _accumulate(a, g * c)

    return _node(a.data * a.data.dtype.type(c), (a,), back, "scale")


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x + row broadcast over the leading axis; row has shape (x.shape[-1],)."""
    if x.data.ndim != 2 or row.shape != (x.shape[1],):
        raise ValueError(f"add_row: cannot add {row.shape} to rows of {x.shape}")

    def back(g):
        _accumulate(x, g)
        if row.requires_grad:
            _accumulate(row, g.sum(axis=0, dtype=np.float64))

    return _node(x.data + row.data, (x, row), back, "add_row")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        _accumulate(x, g * mask)

    return _node(x.data * mask, (x,), back, "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        _accumulate(x, g * (1 - y * y))

    return _node(y, (x,), back, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1)

    def back(g):
        _accumulate(x, g * y * (1 - y))

    return _node(y, (x,), back, "sigmoid")


# --------------------------------------------------------------------- shaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back, "matmul")


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    xs = [_as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != lead:
            raise ValueError(f"concat: leading shapes differ {x.shape} vs {xs[0].shape}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def back(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                _accumulate(x, g[..., lo:hi])

    return _node(np.concatenate([x.data for x in xs], axis=-1), tuple(xs), back, "concat")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), back, "reshape")


def gather(x: Tensor, index) -> Tensor:
    """Rows of x selected by index (an int array or a :class:`Segments`)."""
    seg = index if isinstance(index, Segments) else Segments(index, x.shape[0])
    if seg.num_segments != x.shape[0]:
        raise IndexError(f"gather: index built for {seg.num_segments} rows, tensor has {x.shape[0]}")

    def back(g):
        if x.requires_grad:
            _accumulate(x, _segment_sum_array(g, seg))

    return _node(x.data[seg.ids], (x,), back, "gather")


# ----------------------------------------------------------------- reductions


class Segments:
    """Segment ids plus a cached sparse aggregation matrix."""

    def __init__(self, ids, num_segments: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.num_segments = int(num_segments)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.num_segments):
            raise IndexError(f"segment id out of range for {self.num_segments} segments")
        self._matrices: dict = {}
        self._starts = None

    def matrix(self, dtype=np.float32) -> sp.csr_matrix:
        """(num_segments, len(ids)) 0/1 aggregation matrix."""
        key = np.dtype(dtype)
        if key not in self._matrices:
            n = len(self.ids)
            self._matrices[key] = sp.csr_matrix(
                (np.ones(n, dtype=key), (self.ids, np.arange(n))), shape=(self.num_segments, n)
            )
        return self._matrices[key]

    @property
    def starts(self) -> np.ndarray:
        """Start offsets, valid when ids are sorted and every segment is non-empty."""
        if self._starts is None:
            if np.any(np.diff(self.ids) < 0):
                raise ValueError("segments are not contiguous")
            starts = np.searchsorted(self.ids, np.arange(self.num_segments))
            counts = np.bincount(self.ids, minlength=self.num_segments)
            if np.any(counts == 0):
                raise ValueError("empty segment")
            self._starts = starts
        return self._starts


def _as_segments(ids, num_segments) -> Segments:
    if isinstance(ids, Segments):
        if num_segments is not None and num_segments != ids.num_segments:
            raise ValueError("num_segments disagrees with the Segments object")
        return ids
    return Segments(ids, num_segments)


def _segment_sum_array(values: np.ndarray, seg: Segments) -> np.ndarray:
    if values.shape[0] != len(seg.ids):
        raise ValueError(f"segment_sum: {values.shape[0]} rows but {len(seg.ids)} ids")
    out = seg.matrix(values.dtype) @ values
    return np.asarray(out, dtype=values.dtype)


def segment_sum(values: Tensor, ids, num_segments: int | None = None) -> Tensor:
    """Row j of the result is the sum of the rows of values whose id is j."""
    seg = _as_segments(ids, num_segments)

    def back(g):
        _accumulate(values, g[seg.ids])

    return _node(_segment_sum_array(values.data, seg), (values,), back, "segment_sum")


def segment_prod(values: Tensor, ids, num_segments: int | None = None) -> Tensor:
    """Product of rows per segment; segments must be contiguous and non-empty."""
    seg = _as_segments(ids, num_segments)
    starts = seg.starts
    x = values.data
    is_zero = x == 0
    nonzero_prod = np.multiply.reduceat(np.where(is_zero, 1, x).astype(np.float64), starts, axis=0)
    zero_count = np.add.reduceat(is_zero.astype(np.int64), starts, axis=0)
    out = np.where(zero_count > 0, 0.0, nonzero_prod).astype(x.dtype)

    def back(g):
        e_prod = nonzero_prod[seg.ids]
        e_zeros = zero_count[seg.ids]
        with np.errstate(divide="ignore", invalid="ignore"):
            others = np.where(
                e_zeros == 0,
                e_prod / np.where(is_zero, 1, x),
                np.where((e_zeros == 1) & is_zero, e_prod, 0.0),
            )
        _accumulate(values, g[seg.ids] * others)

    return _node(out, (values,), back, "segment_prod")


def sum_all(x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, np.full(x.shape, g, dtype=x.dtype))

    return _node(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        _accumulate(x, np.full(x.shape, g / n, dtype=x.dtype))

    return _node(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), (x,), back, "mean")


# ------------------------------------------------------------ normalizations


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)

    def back(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), back, "softmax")


def normalize_rows(x: Tensor) -> Tensor:
    """x divided by its last-axis sum (entries must be positive)."""
    s = x.data.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    y = x.data / s

    def back(g):
        _accumulate(x, (g - (g * y).sum(axis=-1, keepdims=True)) / s)

    return _node(y, (x,), back, "normalize_rows")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    dt = x.dtype
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = centered * rstd
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def back(g):
        if gain is not None and gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0, dtype=np.float64))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0, dtype=np.float64))
        if x.requires_grad:
            gx = g * gain.data if gain is not None else g
            m1 = gx.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
            _accumulate(x, (gx - m1 - xhat * m2) * rstd)

    if d < 1:
        raise ValueError("layer_norm over an empty axis")
    return _node(y, parents, back, "layer_norm")


def kl_div(p, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """Sum of p * (log p - log q) with both clamped to [eps, 1]; p is constant."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    qd = q.data.astype(np.float64)
    qc = np.clip(qd, eps, 1.0)
    val = np.sum(p * (np.log(np.clip(p, eps, 1.0)) - np.log(qc)))

    def back(g):
        inside = (qd >= eps) & (qd <= 1.0)
        _accumulate(q, (-g * p / qc * inside).astype(q.dtype))

    return _node(np.asarray(val, dtype=q.dtype), (q,), back, "kl_div")


# ------------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | Mapping[str, Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``params`` is given, returns their gradients (zeros for parameters the
    loss does not touch) as a list, or a dict when ``params`` is a mapping.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = topological_order(loss)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                node.grad = None  # intermediate grads are not kept
    if params is None:
        return None
    if isinstance(params, Mapping):
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    num_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(build_loss: Callable[[], Tensor], params: Mapping[str, Tensor],
                    tolerance: float = 1e-3, h: float = 1e-5, floor: float = 1e-3,
                    max_params: int = 10_000) -> GradCheckReport:
    """Compare backward() against central finite differences in float64.

    ``build_loss`` must rebuild the graph from the current parameter values.
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    total = sum(p.data.size for p in params.values())
    if total > max_params:
        raise ValueError(f"{total} parameters exceed the check limit {max_params}")
    saved = {k: p.data for k, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
        zero_grad(params.values())
        analytic = backward(build_loss(), params)
        worst = (0.0, "", ())
        for name, p in params.items():
            for idx in np.ndindex(p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = build_loss().item()
                p.data[idx] = orig - h
                down = build_loss().item()
                p.data[idx] = orig
                numeric = (up - down) / (2 * h)
                a = float(analytic[name][idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if err > worst[0]:
                    worst = (err, name, idx)
        zero_grad(params.values())
    finally:
        for k, p in params.items():
            p.data = saved[k]
    return GradCheckReport(worst[0], worst[1], worst[2], total, tolerance)
