"""Dense float64 matrix kernel with a reverse-mode tape.

Every value is a 2-D ``numpy.ndarray`` (a "matrix"); scalars are 1x1.
Operations take :class:`Node` objects (or raw arrays, which are lifted to
constants) and record themselves on the :class:`Tape` that owns their
inputs.  ``Tape.backward`` walks the records in reverse creation order,
which is a reverse topological order because a node can only depend on
nodes created before it.

Top-K selection is not differentiable; it returns plain index arrays that
downstream gathers treat as constants.
"""

from __future__ import annotations

import gc
import math
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

DTYPE = np.float64
COSINE_EPS = 1e-8
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _freeze(value) -> np.ndarray:
    arr = np.array(value, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"matrices are 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class Node:
    """A matrix value recorded on a tape."""

    __slots__ = ("tape", "id", "value", "name")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray, name: str | None = None):
        self.tape = tape
        self.id = id
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id}{label} {self.shape[0]}x{self.shape[1]}>"


class _Record:
    __slots__ = ("node", "parents", "forward", "vjp")

    def __init__(self, node, parents, forward, vjp):
        self.node = node
        self.parents = parents
        self.forward = forward
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations plus a parameter registry."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.records: list[_Record] = []
        self.params: dict[str, Node] = {}

    def _new(self, value, name=None) -> Node:
        node = Node(self, len(self.nodes), value, name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._new(_freeze(value))

    def parameter(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter '{name}' already registered")
        node = self._new(_freeze(value), name)
        self.params[name] = node
        return node

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.constant(x)

    def record(self, forward, vjp, parents: Sequence[Node]) -> Node:
        parents = tuple(parents)
        value = forward(*[p.value for p in parents])
        value.setflags(write=False)
        nodes = self.nodes
        node = Node(self, len(nodes), value)
        nodes.append(node)
        self.records.append(_Record(node, parents, forward, vjp))
        return node

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded op from the leaf values, in order."""
        values = {}
        for node in self.nodes:
            values[node.id] = node.value
        out = []
        for rec in self.records:
            v = rec.forward(*[values[p.id] for p in rec.parents])
            values[rec.node.id] = v
            out.append(v)
        return out

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradient of the scalar ``loss`` with respect to each registered parameter."""
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape[0]}x{loss.shape[1]}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        for rec in reversed(self.records):
            g = grads.pop(rec.node.id, None)
            if g is None:
                continue
            parent_grads = rec.vjp(g, rec.node.value, *[p.value for p in rec.parents])
            for parent, pg in zip(rec.parents, parent_grads):
                if pg is None:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return {
            name: grads.get(node.id, np.zeros(node.shape)) for name, node in self.params.items()
        }


def _tape_of(inputs) -> Tape:
    for x in inputs:
        if type(x) is Node:
            return x.tape
    return Tape()


def _op(forward, vjp, *inputs) -> Node:
    tape = _tape_of(inputs)
    if all(type(x) is Node and x.tape is tape for x in inputs):
        return tape.record(forward, vjp, inputs)
    return tape.record(forward, vjp, [tape.lift(x) for x in inputs])


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else _freeze(x)


def _same_shape(opname, a, b):
    sa, sb = _value(a).shape, _value(b).shape
    if sa != sb:
        raise ShapeError(f"{opname}: shapes {sa[0]}x{sa[1]} and {sb[0]}x{sb[1]} differ")


# --------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a, b) -> Node:
    sa, sb = _value(a).shape, _value(b).shape
    if sa[1] != sb[0]:
        raise ShapeError(f"matmul: cannot multiply {sa[0]}x{sa[1]} by {sb[0]}x{sb[1]}")
    return _op(
        lambda x, y: x @ y,
        lambda g, out, x, y: (g @ y.T, x.T @ g),
        a, b,
    )


def add(a, b) -> Node:
    _same_shape("add", a, b)
    return _op(lambda x, y: x + y, lambda g, out, x, y: (g, g), a, b)


def sub(a, b) -> Node:
    _same_shape("sub", a, b)
    return _op(lambda x, y: x - y, lambda g, out, x, y: (g, -g), a, b)


def mul(a, b) -> Node:
    _same_shape("mul", a, b)
    return _op(lambda x, y: x * y, lambda g, out, x, y: (g * y, g * x), a, b)


def scale(a, c: float) -> Node:
    c = float(c)
    return _op(lambda x: x * c, lambda g, out, x: (g * c,), a)


def shift(a, c: float) -> Node:
    c = float(c)
    return _op(lambda x: x + c, lambda g, out, x: (g,), a)


def add_bias(m, bias) -> Node:
    """Add a 1 x cols row vector to every row of ``m``."""
    sm, sb = _value(m).shape, _value(bias).shape
    if sb != (1, sm[1]):
        raise ShapeError(f"add_bias: bias {sb[0]}x{sb[1]} does not fit {sm[0]}x{sm[1]}")
    return _op(
        lambda x, b: x + b,
        lambda g, out, x, b: (g, g.sum(axis=0, keepdims=True)),
        m, bias,
    )


def linear(x, w, b) -> Node:
    """x @ w + b with ``b`` a 1 x cols row."""
    sx, sw, sb = _value(x).shape, _value(w).shape, _value(b).shape
    if sx[1] != sw[0]:
        raise ShapeError(f"linear: cannot multiply {sx[0]}x{sx[1]} by {sw[0]}x{sw[1]}")
    if sb != (1, sw[1]):
        raise ShapeError(f"linear: bias {sb[0]}x{sb[1]} does not fit {sw[1]} outputs")
    return _op(
        lambda x, w, b: x @ w + b,
        lambda g, out, x, w, b: (g @ w.T, x.T @ g, g.sum(axis=0, keepdims=True)),
        x, w, b,
    )


def scale_rows(m, w) -> Node:
    """Multiply row i of ``m`` by the scalar ``w[i, 0]``."""
    sm, sw = _value(m).shape, _value(w).shape
    if sw != (sm[0], 1):
        raise ShapeError(f"scale_rows: weights {sw[0]}x{sw[1]} do not fit {sm[0]}x{sm[1]}")
    return _op(
        lambda x, v: x * v,
        lambda g, out, x, v: (g * v, (g * x).sum(axis=1, keepdims=True)),
        m, w,
    )


def square(a) -> Node:
    return _op(lambda x: x * x, lambda g, out, x: (2.0 * g * x,), a)


def exp(a) -> Node:
    return _op(np.exp, lambda g, out, x: (g * out,), a)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Node:
    return _op(_sigmoid, lambda g, out, x: (g * out * (1.0 - out),), a)


def gelu(a) -> Node:
    """Exact Gaussian-error linear unit, x * Phi(x)."""

    def fwd(x):
        return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))

    def vjp(g, out, x):
        cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _op(fwd, vjp, a)


def gated_blend(x, y, slope: float, shift: float) -> Node:
    """Elementwise ``x + g * (y - x)`` with ``g = sigmoid(slope * (y - x - shift))``.

    The result is clamped to the closed interval between ``x`` and ``y`` so
    rounding never pushes it outside; ``gated_blend(x, x, ...)`` returns ``x``
    exactly.
    """
    _same_shape("gated_blend", x, y)

    def fwd(a, b):
        d = b - a
        out = a + _sigmoid(slope * (d - shift)) * d
        return np.clip(out, np.minimum(a, b), np.maximum(a, b))

    def vjp(g, out, a, b):
        d = b - a
        gate = _sigmoid(slope * (d - shift))
        dd = gate + slope * d * gate * (1.0 - gate)
        return g * (1.0 - dd), g * dd

    return _op(fwd, vjp, x, y)


# --------------------------------------------------------------------------
# row-wise normalisations


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m) -> Node:
    def vjp(g, out, x):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _op(_softmax, vjp, m)


def logsumexp_rows(m) -> Node:
    """Row-wise log-sum-exp as a rows x 1 column."""

    def fwd(x):
        mx = x.max(axis=1, keepdims=True)
        return mx + np.log(np.exp(x - mx).sum(axis=1, keepdims=True))

    def vjp(g, out, x):
        return (g * np.exp(x - out),)

    return _op(fwd, vjp, m)


def normalize_rows(m) -> Node:
    """Divide each row by its sum."""

    def fwd(x):
        return x / x.sum(axis=1, keepdims=True)

    def vjp(g, out, x):
        s = x.sum(axis=1, keepdims=True)
        return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

    return _op(fwd, vjp, m)


def cosine_sim(a, b) -> Node:
    """Pairwise cosine similarity, out[i, j] = <a_i, b_j> / (|a_i| |b_j| + eps)."""
    sa, sb = _value(a).shape, _value(b).shape
    if sa[1] != sb[1]:
        raise ShapeError(f"cosine_sim: column counts differ ({sa[0]}x{sa[1]} vs {sb[0]}x{sb[1]})")

    def fwd(x, y):
        nx = np.sqrt((x * x).sum(axis=1, keepdims=True))
        ny = np.sqrt((y * y).sum(axis=1, keepdims=True))
        return (x @ y.T) / (nx @ ny.T + COSINE_EPS)

    def vjp(g, out, x, y):
        nx = np.sqrt((x * x).sum(axis=1, keepdims=True))
        ny = np.sqrt((y * y).sum(axis=1, keepdims=True))
        q = nx @ ny.T + COSINE_EPS
        dp = g / q
        dq = -g * out / q
        ux = np.divide(x, nx, out=np.zeros_like(x), where=nx > 0)
        uy = np.divide(y, ny, out=np.zeros_like(y), where=ny > 0)
        gx = dp @ y + (dq @ ny) * ux
        gy = dp.T @ x + (dq.T @ nx) * uy
        return gx, gy

    return _op(fwd, vjp, a, b)


# --------------------------------------------------------------------------
# structural ops: gathers, scatters, concatenation, reductions


def _as_index(idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    idx.setflags(write=False)
    return idx


def take_rows(m, rows) -> Node:
    rows = _as_index(rows)
    n = _value(m).shape[0]

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, rows, g)
        return (gx,)

    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError(f"take_rows: row index out of range for {n} rows")
    return _op(lambda x: x[rows], vjp, m)


def scatter_add_rows(m, rows, n_rows: int) -> Node:
    """Output with ``n_rows`` rows where row ``rows[i]`` accumulates ``m[i]``."""
    rows = _as_index(rows)
    if rows.shape != (_value(m).shape[0],):
        raise ShapeError("scatter_add_rows: one target row per input row required")

    def fwd(x):
        out = np.zeros((n_rows, x.shape[1]))
        np.add.at(out, rows, x)
        return out

    return _op(fwd, lambda g, out, x: (g[rows],), m)


def take_along_rows(m, idx) -> Node:
    """out[i, k] = m[i, idx[i, k]]."""
    idx = _as_index(idx)
    if idx.ndim != 2 or idx.shape[0] != _value(m).shape[0]:
        raise ShapeError("take_along_rows: index needs one row per matrix row")

    r = np.arange(idx.shape[0])[:, None]

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, (r, idx), g)
        return (gx,)

    return _op(lambda x: x[r, idx], vjp, m)


def place_along_rows(v, idx, n_cols: int) -> Node:
    """Dense rows x n_cols matrix with ``out[i, idx[i, k]] += v[i, k]``, zeros elsewhere."""
    idx = _as_index(idx)
    if idx.shape != _value(v).shape:
        raise ShapeError("place_along_rows: index and values must share a shape")
    r = np.arange(idx.shape[0])[:, None]

    def fwd(x):
        out = np.zeros((x.shape[0], n_cols))
        np.add.at(out, (r, idx), x)
        return out

    return _op(fwd, lambda g, out, x: (g[r, idx],), v)


def take_elements(m, rows, cols) -> Node:
    """Column vector with entries m[rows[i], cols[i]]."""
    rows, cols = _as_index(rows), _as_index(cols)

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, (rows, cols), g[:, 0])
        return (gx,)

    return _op(lambda x: x[rows, cols].reshape(-1, 1), vjp, m)


def concat_rows(parts: Sequence) -> Node:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    widths = {_value(p).shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(widths)}")
    bounds = np.cumsum([0] + [_value(p).shape[0] for p in parts])

    def vjp(g, out, *xs):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _op(lambda *xs: np.concatenate(xs, axis=0), vjp, *parts)


def concat_cols(parts: Sequence) -> Node:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: nothing to concatenate")
    heights = {_value(p).shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(heights)}")
    bounds = np.cumsum([0] + [_value(p).shape[1] for p in parts])

    def vjp(g, out, *xs):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _op(lambda *xs: np.concatenate(xs, axis=1), vjp, *parts)


def sum_all(m) -> Node:
    return _op(
        lambda x: x.sum().reshape(1, 1),
        lambda g, out, x: (np.full_like(x, g[0, 0]),),
        m,
    )


def mean_all(m) -> Node:
    def vjp(g, out, x):
        return (np.full_like(x, g[0, 0] / x.size),)

    return _op(lambda x: x.mean().reshape(1, 1), vjp, m)


def mean_rows(m) -> Node:
    """Column means as a 1 x cols row (the mean over rows)."""

    def vjp(g, out, x):
        return (np.broadcast_to(g / x.shape[0], x.shape).copy(),)

    return _op(lambda x: x.mean(axis=0, keepdims=True), vjp, m)


# --------------------------------------------------------------------------
# selection


def topk_rows(m, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries of each row.

    Ties go to the lowest column index.  Entries set to ``-inf`` sort last.
    """
    values = _value(m)
    if not 1 <= k <= values.shape[1]:
        raise ValueError(f"topk_rows: k={k} outside [1, {values.shape[1]}]")
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    return order, values[np.arange(values.shape[0])[:, None], order]


# --------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names: Sequence[str] | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays.

    ``masks`` optionally restricts an array to the entries marked True;
    skipped entries are reported as NaN.
    """
    current = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    # every evaluation leaves a tape (a reference cycle) behind; collecting
    # those mid-sweep costs more than the sweep itself, so do it once at the end
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _central_differences(f, current, h, names, masks)
    finally:
        if was_enabled:
            gc.enable()


def _central_differences(f, current, h, names, masks):
    grads = {}
    for name in names if names is not None else list(current):
        arr = current[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        entries = range(flat.size)
        if masks is not None and name in masks:
            gflat[:] = np.nan
            entries = np.flatnonzero(np.asarray(masks[name]).reshape(-1))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(current))
            flat[i] = orig - h
            fm = float(f(current))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads
