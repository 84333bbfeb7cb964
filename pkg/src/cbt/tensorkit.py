"""Dense tensor values with reverse-mode differentiation.

Everything downstream (encoders, transformer layers, contrastive losses,
probes) expresses forward math through the operations in this module and
receives gradients from :func:`backward`. The engine is deliberately small:

* arrays are numpy, row-major, float64 by default (float32 is an opt-in
  training mode via :func:`set_default_dtype`);
* tensors are immutable values; operations return new tensors that record
  their inputs on an implicit tape;
* there is no broadcasting beyond row-wise bias addition -- every other
  shape coercion is an explicit operation;
* gradient accumulation across fan-out is summation, never averaging.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def set_default_dtype(dtype) -> None:
    """Set the dtype for newly created tensors ("float64" or "float32")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}: use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Immutable dense array plus the tape bookkeeping for backward().

    ``_vjp`` maps the output gradient to one gradient per parent (``None``
    for parents that are non-differentiable in that slot). Leaves have no
    parents; a leaf with ``requires_grad=True`` receives an entry in the
    result of :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, vjp: Optional[Callable]) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = vjp is not None
        t.name = None
        t._parents = parents if vjp is not None else ()
        t._vjp = vjp
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Small amount of operator sugar for readable call sites; all of it
    # delegates to the strict-shape module functions below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _make(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor._from_op(data, parents, vjp)
    return Tensor._from_op(data, (), None)


def _as_2d(t: Tensor, op: str) -> np.ndarray:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-d tensor, got shape {t.shape}")
    return t.data


# ---------------------------------------------------------------------------
# elementwise and affine operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant scalar or same-shape array; no gradient flows into c."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim != 0 and c.shape != a.shape:
        raise ShapeError(f"add_const shapes differ: {a.shape} vs {c.shape}")
    return _make(a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or same-shape array (e.g. a pad mask)."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim != 0 and c.shape != a.shape:
        raise ShapeError(f"mul_const shapes differ: {a.shape} vs {c.shape}")
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias addition: (m, n) + (n,). The only permitted broadcast."""
    x = _as_2d(a, "add_bias")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias expects bias of shape ({x.shape[1]},), got {b.shape}")
    return _make(x + b.data[None, :], (a, b), lambda g: (g, g.sum(axis=0)))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit; smooth, so finite differences are clean."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), vjp)


# ---------------------------------------------------------------------------
# matrix / row-structured operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    x = _as_2d(a, "matmul")
    y = _as_2d(b, "matmul")
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    return _make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def transpose(a: Tensor) -> Tensor:
    x = _as_2d(a, "transpose")
    return _make(np.ascontiguousarray(x.T), (a,), lambda g: (g.T,))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax per row with row-max subtraction; each output row sums to 1."""
    x = _as_2d(a, "row_softmax")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def row_logsumexp(a: Tensor, keep=None) -> Tensor:
    """Per-row log-sum-exp -> (m, 1).

    ``keep`` is an optional constant boolean (m, n) selector; excluded
    entries contribute nothing to the sum and receive zero gradient. Every
    row must keep at least one entry.
    """
    x = _as_2d(a, "row_logsumexp")
    if keep is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != x.shape:
            raise ShapeError(f"row_logsumexp keep shape {keep.shape} != {x.shape}")
        if not keep.any(axis=1).all():
            raise ShapeError("row_logsumexp: a row keeps no entries")
        masked = np.where(keep, x, -np.inf)
        m = masked.max(axis=1, keepdims=True)
        e = np.exp(np.where(keep, x - m, -np.inf))
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)

    def vjp(g):
        return (g * (e / s),)

    return _make(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row zero mean / unit variance followed by the affine (gain, bias)."""
    x = _as_2d(a, "layer_norm")
    n = x.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {n}"
        )
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data[None, :] + bias.data[None, :]

    def vjp(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        gy = g * gain.data[None, :]
        dx = inv * (
            gy
            - gy.mean(axis=1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return _make(out, (a, gain, bias), vjp)


def row_l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm (optional mode for contrastive logits)."""
    x = _as_2d(a, "row_l2_normalize")
    r = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    out = x / r

    def vjp(g):
        proj = (g * x).sum(axis=1, keepdims=True)
        return (g / r - x * (proj / r**3),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# gather / scatter / layout operations
# ---------------------------------------------------------------------------

def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by index; backward scatter-adds (duplicates accumulate)."""
    x = _as_2d(a, "take_rows")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows expects a 1-d index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows index out of range for {x.shape[0]} rows")
    out = x[idx].copy()

    def vjp(g):
        dx = np.zeros_like(x)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(out, (a,), vjp)


def select_columns(a: Tensor, cols) -> Tensor:
    """Pick one entry per row, a[i, cols[i]] -> (m, 1)."""
    x = _as_2d(a, "select_columns")
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (x.shape[0],):
        raise ShapeError(f"select_columns needs one column per row, got {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise ShapeError(f"select_columns index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    out = x[rows, cols][:, None].copy()

    def vjp(g):
        dx = np.zeros_like(x)
        dx[rows, cols] = g[:, 0]
        return (dx,)

    return _make(out, (a,), vjp)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    x = _as_2d(a, "slice_cols")
    if not (0 <= j0 < j1 <= x.shape[1]):
        raise ShapeError(f"slice_cols [{j0}:{j1}] invalid for width {x.shape[1]}")
    out = x[:, j0:j1].copy()

    def vjp(g):
        dx = np.zeros_like(x)
        dx[:, j0:j1] = g
        return (dx,)

    return _make(out, (a,), vjp)


def as_row(v: Tensor) -> Tensor:
    """View a vector (n,) as a single-row matrix (1, n)."""
    if v.data.ndim != 1:
        raise ShapeError(f"as_row expects a 1-d tensor, got shape {v.shape}")
    n = v.shape[0]
    return _make(v.data.reshape(1, n).copy(), (v,), lambda g: (g.reshape(n),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of zero tensors")
    widths = {p.data.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError(f"concat_rows needs 2-d tensors of equal width, got "
                         f"{[p.shape for p in parts]}")
    out = np.vstack([p.data for p in parts])
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of zero tensors")
    heights = {p.data.shape[0] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise ShapeError(f"concat_cols needs 2-d tensors of equal height, got "
                         f"{[p.shape for p in parts]}")
    out = np.hstack([p.data for p in parts])
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return _make(out, (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())
    return _make(out, (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows: (m, n) -> (1, n)."""
    x = _as_2d(a, "mean_rows")
    m = x.shape[0]
    out = x.mean(axis=0, keepdims=True)
    return _make(out, (a,), lambda g: (np.repeat(g / m, m, axis=0),))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Gradients:
    """Result of one backward pass: leaf tensor -> gradient array."""

    def __init__(self, table: dict):
        self._table = table

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        entry = self._table.get(id(t))
        return entry[1] if entry is not None else None

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        if g is None:
            raise KeyError(f"no gradient recorded for {t!r}")
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table

    def __len__(self) -> int:
        return len(self._table)

    def items(self):
        return ((t, g) for (t, g) in self._table.values())


def _topo_order(root: Tensor) -> list:
    """Leaves-first topological order over the requires-grad subgraph."""
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode pass from a scalar loss to every requires-grad leaf.

    Pure: no tensor state is mutated, so calling backward on the same graph
    twice yields identical gradients. Fan-out accumulates by summation.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Gradients({})
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[id(node)] = (node, g)
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            prev = pending.get(id(p))
            pending[id(p)] = pg if prev is None else prev + pg
    return Gradients(leaves)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteReport:
    """Outcome of a finiteness scan; falsy when a NaN/Inf was found."""

    ok: bool
    index: Optional[tuple] = None
    value: Optional[float] = None

    def __bool__(self) -> bool:
        return self.ok


def assert_finite(t: Tensor) -> FiniteReport:
    """Report the index of the first non-finite entry, if any."""
    finite = np.isfinite(t.data)
    if finite.all():
        return FiniteReport(ok=True)
    flat = int(np.argmin(finite.reshape(-1)))
    idx = np.unravel_index(flat, t.data.shape) if t.data.ndim else ()
    return FiniteReport(ok=False, index=tuple(int(i) for i in idx),
                        value=float(t.data.reshape(-1)[flat]))
