"""Reverse-mode automatic differentiation over dense numpy tensors.

A `Tape` records every differentiable operation executed while it is
active; `Tape.backward` replays the records in reverse and returns a
gradient table keyed by the leaf tensors that require gradients.  One
backward pass is allowed per tape unless `reset` is called.  Tensors
created outside a tape are plain immutable values.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64

# Test hook: when True the gradient-reversal backward rule drops its sign
# flip.  Used by the CLI gradcheck fault-injection contract only.
GRL_SIGN_BUG = False


def set_default_dtype(name: str) -> None:
    """Select the dtype used for newly created leaf tensors ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class Tensor:
    """Dense real-valued array participating in the active tape.

    Leaf tensors are validated to contain only finite values; operation
    outputs inherit their dtype from the inputs.
    """

    __slots__ = ("values", "requires_grad", "node_id", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=_default_dtype)
        if not np.all(np.isfinite(arr)):
            raise ContractError("leaf tensors must contain only finite values")
        self.values = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = requires_grad
        out.node_id = None
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor (finite values enforced)."""
    return Tensor(values, requires_grad=requires_grad)


class _Record:
    __slots__ = ("out_id", "inputs", "backward")

    def __init__(self, out_id: int, inputs: tuple, backward: Callable):
        self.out_id = out_id
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered operation record for one forward pass.

    Intended lifetime is one training step: create, run the forward
    computation, call `backward` once, drop.  A second `backward` without
    `reset` raises; after `reset` the replay is bit-for-bit reproducible.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.pop()

    def _node_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = len(self._tensors)
            self._ids[key] = nid
            self._tensors.append(t)
            t.node_id = nid
        return nid

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        in_ids = []
        for t in inputs:
            nid = self._node_id(t)
            if t.requires_grad and nid not in self._produced:
                self._leaves[nid] = t
            in_ids.append(nid)
        out_id = self._node_id(out)
        self._produced.add(out_id)
        self._records.append(_Record(out_id, tuple(in_ids), backward))

    def reset(self) -> None:
        """Allow another backward pass over the same recorded operations."""
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of a scalar loss into every requires-grad leaf."""
        if loss.values.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.values.shape}")
        loss_id = self._ids.get(id(loss))
        if loss_id is None or loss_id not in self._produced:
            raise ContractError("loss tensor was not produced on this tape")
        if self._consumed:
            raise ContractError("tape already consumed by a backward pass; call reset() first")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss_id: np.ones((), dtype=loss.values.dtype)}
        for rec in reversed(self._records):
            g_out = grads.pop(rec.out_id, None)
            if g_out is None:
                continue
            for nid, g_in in zip(rec.inputs, rec.backward(g_out)):
                if g_in is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = g_in if acc is None else acc + g_in

        table: dict[Tensor, np.ndarray] = {}
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(leaf.values)
            leaf.grad = g
            table[leaf] = g
        return table


def _apply(values: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires_grad=req and tape is not None)
    if out.requires_grad:
        tape._record(out, inputs, backward)
    return out


def _shape_error(op: str, *shapes) -> DimensionError:
    return DimensionError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (m,k)@(k,n) and the matrix-vector case (m,k)@(k,)."""
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise _shape_error("matmul", av.shape, bv.shape)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        if bv.ndim == 2:
            ga = g @ bv.T if need_a else None
            gb = av.T @ g if need_b else None
        else:
            ga = np.outer(g, bv) if need_a else None
            gb = av.T @ g if need_b else None
        return ga, gb

    return _apply(av @ bv, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise _shape_error("transpose", x.values.shape)
    return _apply(x.values.T.copy(), (x,), lambda g: (g.T,))


def _binary(op: str, a: Tensor, b: Tensor, values, bwd) -> Tensor:
    if a.values.shape != b.values.shape:
        raise _shape_error(op, a.values.shape, b.values.shape)
    return _apply(values, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    return _binary("add", a, b, a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    av, bv = a.values, b.values
    return _binary("mul", a, b, av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    return _apply(x.values * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-k bias to every column of a (k, N) matrix (plain add for vectors)."""
    xv, bv = x.values, b.values
    if bv.ndim != 1 or xv.shape[0] != bv.shape[0] or xv.ndim not in (1, 2):
        raise _shape_error("add_bias", xv.shape, bv.shape)
    if xv.ndim == 1:
        return _apply(xv + bv, (x, b), lambda g: (g, g))
    return _apply(xv + bv[:, None], (x, b), lambda g: (g, g.sum(axis=1)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row j of a (r, c) matrix by s[j]."""
    xv, sv = x.values, s.values
    if xv.ndim != 2 or sv.ndim != 1 or xv.shape[0] != sv.shape[0]:
        raise _shape_error("scale_rows", xv.shape, sv.shape)
    return _apply(xv * sv[:, None], (x, s), lambda g: (g * sv[:, None], (g * xv).sum(axis=1)))


# ---------------------------------------------------------------------------
# nonlinearities


def tanh_elem(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _apply(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid_elem(x: Tensor) -> Tensor:
    xv = x.values
    y = np.empty_like(xv)
    pos = xv >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _apply(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_clamped(x: Tensor, eps: float = 1e-12) -> Tensor:
    """log(max(x, eps)); gradient is zero on the clamped region."""
    xv = x.values
    clamped = np.maximum(xv, eps)
    live = (xv > eps).astype(xv.dtype)
    return _apply(np.log(clamped), (x,), lambda g: (g * live / clamped,))


def softmax_vec(x: Tensor) -> Tensor:
    """Numerically stable softmax of a vector (max-subtraction)."""
    xv = x.values
    if xv.ndim != 1 or xv.shape[0] == 0:
        raise _shape_error("softmax_vec", xv.shape)
    e = np.exp(xv - xv.max())
    y = e / e.sum()

    def bwd(g):
        return (y * (g - float(g @ y)),)

    return _apply(y, (x,), bwd)


def logsumexp_vec(x: Tensor) -> Tensor:
    """log(sum(exp(x))) of a vector, computed in log-space; scalar output."""
    xv = x.values
    if xv.ndim != 1 or xv.shape[0] == 0:
        raise _shape_error("logsumexp_vec", xv.shape)
    m = xv.max()
    e = np.exp(xv - m)
    s = e.sum()
    return _apply(np.asarray(m + np.log(s), dtype=xv.dtype), (x,), lambda g: (g * e / s,))


def logsumexp_over_rows(x: Tensor) -> Tensor:
    """Column-wise log-sum-exp of a (r, c) matrix, reducing the row axis."""
    xv = x.values
    if xv.ndim != 2:
        raise _shape_error("logsumexp_over_rows", xv.shape)
    m = xv.max(axis=0)
    e = np.exp(xv - m[None, :])
    s = e.sum(axis=0)
    return _apply(m + np.log(s), (x,), lambda g: (e * (g / s)[None, :],))


def max_over_rows(x: Tensor) -> Tensor:
    """Column-wise maxima of a (r, c) matrix; gradient routed to the lowest
    argmax row per column on ties."""
    xv = x.values
    if xv.ndim != 2 or xv.shape[0] < 1 or xv.shape[1] < 1:
        raise _shape_error("max_over_rows", xv.shape)
    arg = xv.argmax(axis=0)  # numpy argmax picks the lowest index on ties
    cols = np.arange(xv.shape[1])

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[arg, cols] = g
        return (gx,)

    return _apply(xv[arg, cols], (x,), bwd)


# ---------------------------------------------------------------------------
# reductions, reshaping, selection


def sum_all(x: Tensor) -> Tensor:
    xv = x.values
    return _apply(np.asarray(xv.sum(), dtype=xv.dtype), (x,), lambda g: (np.broadcast_to(g, xv.shape).astype(xv.dtype, copy=False),))


def mean_all(x: Tensor) -> Tensor:
    xv = x.values
    n = xv.size
    return _apply(np.asarray(xv.mean(), dtype=xv.dtype), (x,), lambda g: (np.broadcast_to(g / n, xv.shape).astype(xv.dtype, copy=False),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis` (vectors: axis 0; matrices: axis 0 or 1)."""
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    ndim = tensors[0].values.ndim
    if any(t.values.ndim != ndim for t in tensors) or axis >= ndim:
        raise _shape_error("concat", *[t.values.shape for t in tensors])
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if ndim == 1 or axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _apply(np.concatenate([t.values for t in tensors], axis=axis), tensors, bwd)


def stack_columns(vectors: Sequence[Tensor]) -> Tensor:
    """Stack length-d vectors as the columns of a (d, N) matrix."""
    vectors = tuple(vectors)
    if not vectors or any(v.values.ndim != 1 for v in vectors):
        raise DimensionError("stack_columns: need one or more vectors")
    return _apply(
        np.stack([v.values for v in vectors], axis=1),
        vectors,
        lambda g: tuple(g[:, i] for i in range(len(vectors))),
    )


def column(x: Tensor, j: int) -> Tensor:
    """Column j of a matrix as a vector."""
    xv = x.values
    if xv.ndim != 2 or not (0 <= j < xv.shape[1]):
        raise _shape_error(f"column[{j}]", xv.shape)

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[:, j] = g
        return (gx,)

    return _apply(xv[:, j].copy(), (x,), bwd)


def block(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Contiguous sub-matrix x[r0:r1, c0:c1]."""
    xv = x.values
    if xv.ndim != 2 or not (0 <= r0 <= r1 <= xv.shape[0] and 0 <= c0 <= c1 <= xv.shape[1]):
        raise _shape_error(f"block[{r0}:{r1},{c0}:{c1}]", xv.shape)

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[r0:r1, c0:c1] = g
        return (gx,)

    return _apply(xv[r0:r1, c0:c1].copy(), (x,), bwd)


def segment(x: Tensor, a: int, b: int) -> Tensor:
    """Contiguous slice x[a:b] of a vector."""
    xv = x.values
    if xv.ndim != 1 or not (0 <= a <= b <= xv.shape[0]):
        raise _shape_error(f"segment[{a}:{b}]", xv.shape)

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[a:b] = g
        return (gx,)

    return _apply(xv[a:b].copy(), (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    """Row-major flattening to a vector."""
    xv = x.values
    return _apply(xv.reshape(-1).copy(), (x,), lambda g: (g.reshape(xv.shape),))


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Scalar entry x[i, j]."""
    xv = x.values
    if xv.ndim != 2 or not (0 <= i < xv.shape[0] and 0 <= j < xv.shape[1]):
        raise _shape_error(f"pick[{i},{j}]", xv.shape)

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[i, j] = g
        return (gx,)

    return _apply(xv[i, j].copy(), (x,), bwd)


def pick_vec(x: Tensor, i: int) -> Tensor:
    """Scalar entry x[i] of a vector."""
    xv = x.values
    if xv.ndim != 1 or not (0 <= i < xv.shape[0]):
        raise _shape_error(f"pick_vec[{i}]", xv.shape)

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[i] = g
        return (gx,)

    return _apply(xv[i].copy(), (x,), bwd)


def rows_to_columns(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a (V, d) table as columns of a (d, N) matrix (embedding lookup)."""
    tv = table.values
    idx = np.asarray(indices, dtype=np.intp)
    if tv.ndim != 2 or idx.ndim != 1 or idx.size == 0:
        raise _shape_error("rows_to_columns", tv.shape)
    if idx.min() < 0 or idx.max() >= tv.shape[0]:
        raise DimensionError(
            f"rows_to_columns: index out of range for table with {tv.shape[0]} rows"
        )
    need = table.requires_grad

    def bwd(g):
        if not need:
            return (None,)
        gt = np.zeros_like(tv)
        np.add.at(gt, idx, g.T)
        return (gt,)

    return _apply(tv[idx].T.copy(), (table,), bwd)


# ---------------------------------------------------------------------------
# gradient reversal


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity in the forward pass; backward multiplies the gradient by -lam."""
    lam = float(lam)
    if lam < 0:
        raise ContractError(f"grad_reverse: lambda must be >= 0, got {lam}")
    sign = 1.0 if GRL_SIGN_BUG else -1.0
    return _apply(x.values.copy(), (x,), lambda g: (sign * lam * g,))
