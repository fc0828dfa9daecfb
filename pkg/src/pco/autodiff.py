"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tensors that live on it
(define-by-run) and replays the records backwards to produce exact gradients.
Tensors that are not attached to a tape are constants; operations whose inputs
are all constants are evaluated eagerly and leave nothing on any tape, which
keeps finite-difference probing cheap.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

# Squared-norm guard inside sqrt: keeps the norm differentiable at the origin.
EPS = 1e-24
# Smallest magnitude accepted as a divisor.
DIV_EPS = 1e-12


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations; node ids are list positions."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: Dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        return self._record("leaf" if name is None else f"leaf:{name}", arr, (), None)

    def _record(self, op, value, inputs, backward) -> "Tensor":
        self.nodes.append(_Node(op, inputs, backward))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, root: "Tensor") -> Dict[int, np.ndarray]:
        """Populate ``self.gradients`` with d(root)/d(leaf) for every reachable leaf."""
        if not self.nodes:
            raise AutodiffError("backward: tape is empty")
        if root.tape is not self:
            raise AutodiffError("backward: root was not recorded on this tape")
        if root.value.size != 1:
            raise AutodiffError(f"backward: root must be scalar, got shape {root.shape}")
        grads: Dict[int, np.ndarray] = {root.node: np.ones_like(root.value)}
        leaves: Dict[int, np.ndarray] = {}
        for nid in range(root.node, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                leaves[nid] = g
                continue
            for parent, pg in zip(node.inputs, node.backward(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        self.gradients = leaves
        return leaves

    def grad(self, t: "Tensor") -> np.ndarray:
        g = self.gradients.get(t.node)
        return np.zeros_like(t.value) if g is None else g


class Tensor:
    __slots__ = ("value", "tape", "node")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, tape: Optional[Tape] = None, node: Optional[int] = None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def __repr__(self):
        kind = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


def const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable, check: bool = True) -> Tensor:
    # a finite sum implies finite entries; only an overflowing sum needs the full scan.
    # Pure data movement (check=False) cannot turn finite inputs into non-finite outputs.
    if check and not math.isfinite(np.add.reduce(value, None)) and not np.isfinite(value).all():
        raise NonFiniteError(op)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise AutodiffError(f"{op}: inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    ids = tuple(t.node if t.tape is not None else None for t in inputs)
    return tape._record(op, value, ids, backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op, fn, a, b):
    try:
        return fn(a.value, b.value)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _emit("add", _binary("add", np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _emit("subtract", _binary("subtract", np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _emit("multiply", _binary("multiply", np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if (np.abs(bv) < DIV_EPS).any():
        raise AutodiffError("divide: denominator below epsilon")
    out = _binary("divide", np.divide, a, b)
    return _emit("divide", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    if (a.value < 0).any():
        raise AutodiffError("sqrt: negative input")
    out = np.sqrt(a.value)
    if (out < DIV_EPS).any():
        raise AutodiffError("sqrt: input too close to zero for a finite gradient")
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.value > 0
    return _emit("relu", np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _lift(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", x * cdf, (a,), back)


# ---------------------------------------------------------------- reductions


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _lift(a)
    shape = a.shape
    axes = _axes(axis, a.ndim)
    out = np.add.reduce(a.value, axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _axes(axis, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axes, keepdims), 1.0 / n)


def masked_mean(a, mask, axis: int) -> Tensor:
    """Mean of ``a`` along ``axis`` counting only entries where ``mask`` is true.

    ``mask`` has the shape of ``a`` without its trailing feature axes; it is
    broadcast over them.
    """
    a = _lift(a)
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim < a.ndim:
        m = m[..., None]
    counts = m.sum(axis=axis, keepdims=False)
    if (counts == 0).any():
        raise AutodiffError("masked_mean: a slice has no valid entries")
    return div(sum(mul(a, m), axis=axis), counts)


def l2_norm(a, keepdims: bool = False) -> Tensor:
    """sqrt(sum(x**2) + EPS) over the last axis."""
    a = _lift(a)
    x = a.value
    out = np.sqrt(np.add.reduce(x * x, axis=-1, keepdims=True) + EPS)

    def back(g):
        if not keepdims:
            g = g[..., None]
        return (g * x / out,)

    return _emit("l2_norm", out if keepdims else out[..., 0], (a,), back)


def squared_error(pred, target, mask=None) -> Tensor:
    """Sum of (pred - target)**2 over entries whose leading positions are set in ``mask``."""
    pred = _lift(pred)
    diff = _binary("squared_error", np.subtract, pred, const(target))
    if diff.shape != pred.shape:
        raise ShapeError("squared_error", pred.shape, np.shape(target))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != pred.shape[:m.ndim]:
            raise ShapeError("squared_error", pred.shape, m.shape)
        diff = np.where(m.reshape(m.shape + (1,) * (diff.ndim - m.ndim)), diff, 0.0)
    return _emit("squared_error", np.add.reduce(diff * diff, axis=None), (pred,),
                 lambda g: (2.0 * g * diff,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError("matmul", av.shape, bv.shape)
    if bv.ndim == 2 and av.ndim > 2:
        # stacked rows times a single matrix: one 2-D GEMM each way
        lead = av.shape[:-1]
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(*lead, bv.shape[1])

        def back2(g):
            g2 = g.reshape(-1, bv.shape[1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return _emit("matmul", out, (a, b), back2)
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError("matmul", av.shape, bv.shape) from None

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit("matmul", out, (a, b), back)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for a 2-D weight ``w`` and 1-D bias ``b``, as one node."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim < 1 or wv.ndim != 2 or bv.shape != (wv.shape[1],) or xv.shape[-1] != wv.shape[0]:
        raise ShapeError("linear", xv.shape, wv.shape)
    x2 = xv.reshape(-1, wv.shape[0])
    out = (x2 @ wv + bv).reshape(*xv.shape[:-1], wv.shape[1])

    def back(g):
        g2 = g.reshape(-1, wv.shape[1])
        return (g2 @ wv.T).reshape(xv.shape), x2.T @ g2, g2.sum(axis=0)

    return _emit("linear", out, (x, w, b), back)


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is false get probability 0."""
    a = _lift(a)
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise AutodiffError("softmax: a row has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.maximum.reduce(x, axis=-1, keepdims=True))
    p = e / np.add.reduce(e, axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (a,), back)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    x = a.value
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    xc = x - np.add.reduce(x, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(np.add.reduce(xc * xc, axis=-1, keepdims=True) / d + eps)
    xhat = xc * inv
    gv = gamma.value

    def back(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", xhat * gv + beta.value, (a, gamma, beta), back)


# ---------------------------------------------------------------- structure


def embedding_lookup(table, ids) -> Tensor:
    """Rows of a 2-D ``table`` selected by integer ``ids`` of any shape."""
    table = _lift(table)
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutodiffError("embedding_lookup: id out of range")
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _emit("embedding_lookup", table.value[ids], (table,), back, check=False)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", out, ts, back, check=False)


def take(a, idx) -> Tensor:
    """Indexing/slicing (``a[idx]``) with a scatter-add gradient."""
    a = _lift(a)
    try:
        out = a.value[idx]
    except IndexError:
        raise ShapeError("slice", a.shape, np.shape(idx)) from None
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("slice", np.array(out, dtype=np.float64), (a,), back, check=False)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),), check=False)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), check=False)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", old, shape) from None
    return _emit("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, old),), check=False)


# ---------------------------------------------------------------- checking


def finite_difference_check(f: Callable[[Dict[str, Tensor]], Tensor],
                            params: Dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    root = f(leaves)
    if not np.isfinite(root.value).all():
        raise NonFiniteError("finite_difference_check")
    if root.tape is tape:
        tape.backward(root)
    worst = 0.0
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    consts = {k: Tensor(v) for k, v in work.items()}

    def evaluate():
        val = f(consts).item()
        if not np.isfinite(val):
            raise NonFiniteError("finite_difference_check")
        return val

    for k, arr in work.items():
        analytic = tape.grad(leaves[k]).reshape(-1)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
