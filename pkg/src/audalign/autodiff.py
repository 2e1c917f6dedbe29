"""Rank-2 reverse-mode automatic differentiation over a fixed operation set.

Every value is a 2-D float64 numpy array. Operations are recorded on a
:class:`Tape` in execution order, so node inputs always reference earlier
nodes. Scalars are 1x1 matrices.

Shape rules (``a`` is the first operand):

* ``add``/``sub``/``elementwise_mul``: ``b`` has the shape of ``a`` or is a
  1 x cols row that is repeated down the rows.
* ``scalar_div``: ``b`` must be 1x1.
* ``matmul``: ``a.cols == b.rows``.
* ``gather_rows``/``place_rows``: integer row indices into the input/output.
* ``group_mean_rows``/``grouped_attention``: rows split into ``groups``
  consecutive equal-size blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected rank <= 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return np.ascontiguousarray(arr)


PARAM, FROZEN, CONST, OP = "param", "frozen", "const", "op"


class Node:
    __slots__ = ("tape", "index", "value", "kind", "op", "parents", "forward", "vjp", "name", "requires_grad")

    def __init__(self, tape, index, value, kind, op, parents, forward, vjp, name, requires_grad):
        self.tape = tape
        self.index = index
        self.value = value
        self.kind = kind
        self.op = op
        self.parents = parents
        self.forward = forward
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value[0, 0])

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return elementwise_mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node({self.index}, {self.kind}:{self.op or self.name}, shape={self.value.shape})"


class Tape:
    """Ordered record of leaves and operations.

    Leaves come in three kinds: trainable parameters, frozen parameters (never
    receive gradients) and constants. A tape is single-threaded; separate tapes
    are independent.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _leaf(self, value, kind, name):
        node = Node(self, len(self.nodes), as_matrix(value), kind, None, (), None, None, name, kind == PARAM)
        self.nodes.append(node)
        return node

    def param(self, value, name: str) -> Node:
        return self._leaf(value, PARAM, name)

    def frozen(self, value, name: str) -> Node:
        return self._leaf(value, FROZEN, name)

    def const(self, value, name: str | None = None) -> Node:
        return self._leaf(value, CONST, name)

    def record(self, op: str, parents: Sequence[Node], forward: Callable, vjp: Callable) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"{op}: operand recorded on a different tape")
        value = forward(*(p.value for p in parents))
        requires = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, OP, op, tuple(parents), forward, vjp, None, requires)
        self.nodes.append(node)
        return node

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == PARAM]

    def release(self) -> None:
        """Drop recorded values and links so memory is freed without waiting for the cycle collector."""
        for n in self.nodes:
            n.value = None
            n.parents = ()
            n.forward = n.vjp = None
        self.nodes = []

    def replay(self) -> list[np.ndarray]:
        """Recompute every op node from the stored leaves; returns the values.

        The tape is not modified, so comparing against ``node.value`` checks
        that forward evaluation is reproducible.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == OP:
                values.append(node.forward(*(values[p.index] for p in node.parents)))
            else:
                values.append(node.value)
        return values


@dataclass
class GradientReport:
    grads: dict[str, np.ndarray]
    max_abs_grad: float
    step: int = 0
    disconnected: list[str] = field(default_factory=list)


def backward(tape: Tape, loss: Node, step: int = 0) -> GradientReport:
    """Gradients of scalar ``loss`` with respect to every trainable leaf.

    Frozen leaves and constants are never reported. Parameters the loss does
    not depend on get a zero gradient and are listed in ``disconnected``.
    """
    if loss.tape is not tape:
        raise ValueError("loss node belongs to another tape")
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones((1, 1))
    nodes = tape.nodes
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.kind != OP or not node.requires_grad:
            continue
        contribs = node.vjp(g, *(p.value for p in node.parents), node.value)
        for parent, c in zip(node.parents, contribs):
            if c is None or not parent.requires_grad:
                continue
            j = parent.index
            grads[j] = c if grads[j] is None else grads[j] + c
    out: dict[str, np.ndarray] = {}
    disconnected = []
    max_abs = 0.0
    for node in tape.params():
        g = grads[node.index] if node.index <= loss.index else None
        if g is None:
            g = np.zeros_like(node.value)
            disconnected.append(node.name)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for {node.name}")
        if node.name in out:
            out[node.name] = out[node.name] + g
        else:
            out[node.name] = g
        max_abs = max(max_abs, float(np.max(np.abs(g))) if g.size else 0.0)
    return GradientReport(out, max_abs, step, disconnected)


# ---------------------------------------------------------------------------
# operations


def _bcast_rhs(a: Node, b: Node, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce(g, broadcast):
    return g.sum(axis=0, keepdims=True) if broadcast else g


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    def vjp(g, x, y, out):
        return (g @ y.T if a.requires_grad else None, x.T @ g if b.requires_grad else None)

    return a.tape.record("matmul", (a, b), lambda x, y: x @ y, vjp)


def add(a: Node, b: Node) -> Node:
    bc = _bcast_rhs(a, b, "add")
    return a.tape.record("add", (a, b), lambda x, y: x + y, lambda g, x, y, out: (g, _reduce(g, bc)))


def sub(a: Node, b: Node) -> Node:
    bc = _bcast_rhs(a, b, "sub")
    return a.tape.record("sub", (a, b), lambda x, y: x - y, lambda g, x, y, out: (g, -_reduce(g, bc)))


def elementwise_mul(a: Node, b: Node) -> Node:
    bc = _bcast_rhs(a, b, "elementwise_mul")
    return a.tape.record(
        "elementwise_mul", (a, b), lambda x, y: x * y, lambda g, x, y, out: (g * y, _reduce(g * x, bc))
    )


def scalar_mul(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record("scalar_mul", (a,), lambda x: c * x, lambda g, x, out: (c * g,))


def scalar_div(a: Node, b: Node) -> Node:
    """``a / b`` for a 1x1 node ``b``."""
    if b.shape != (1, 1):
        raise ShapeError(f"scalar_div: divisor must be 1x1, got {b.shape}")

    def vjp(g, x, y, out):
        return g / y[0, 0], np.array([[-np.sum(g * x) / y[0, 0] ** 2]])

    return a.tape.record("scalar_div", (a, b), lambda x, y: x / y[0, 0], vjp)


def relu(a: Node) -> Node:
    return a.tape.record("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, x, out: (g * (x > 0),))


def dropout_with_mask(a: Node, mask, rate: float) -> Node:
    """Inverted dropout with a caller-supplied keep mask (1 = keep)."""
    if mask is None:
        raise ValueError("dropout_with_mask requires an explicit mask")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError(f"dropout mask shape {m.shape} != input shape {a.shape}")
    scale = m / (1.0 - rate)
    return a.tape.record("dropout_with_mask", (a,), lambda x: x * scale, lambda g, x, out: (g * scale,))


def mean_all(a: Node) -> Node:
    n = a.value.size
    return a.tape.record(
        "mean_all", (a,), lambda x: np.array([[x.mean()]]), lambda g, x, out: (np.full(x.shape, g[0, 0] / n),)
    )


def sum_all(a: Node) -> Node:
    return a.tape.record(
        "sum_all", (a,), lambda x: np.array([[x.sum()]]), lambda g, x, out: (np.full(x.shape, g[0, 0]),)
    )


def frobenius_norm(a: Node) -> Node:
    def vjp(g, x, out):
        nrm = out[0, 0]
        if nrm == 0.0:
            return (np.zeros_like(x),)
        return (g[0, 0] * x / nrm,)

    return a.tape.record("frobenius_norm", (a,), lambda x: np.array([[np.sqrt(np.sum(x * x))]]), vjp)


def frobenius_inner(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_inner: shapes {a.shape} and {b.shape} differ")
    return a.tape.record(
        "frobenius_inner",
        (a, b),
        lambda x, y: np.array([[np.sum(x * y)]]),
        lambda g, x, y, out: (g[0, 0] * y, g[0, 0] * x),
    )


def transpose(a: Node) -> Node:
    return a.tape.record(
        "transpose", (a,), lambda x: np.ascontiguousarray(x.T), lambda g, x, out: (np.ascontiguousarray(g.T),)
    )


def row_mean_center(a: Node) -> Node:
    """Subtract the mean row, i.e. center every column over the rows."""
    return a.tape.record(
        "row_mean_center",
        (a,),
        lambda x: x - x.mean(axis=0, keepdims=True),
        lambda g, x, out: (g - g.mean(axis=0, keepdims=True),),
    )


def square_error_masked(pred: Node, target: Node, row_mask) -> Node:
    """Mean of squared errors over the rows selected by boolean ``row_mask``."""
    if pred.shape != target.shape:
        raise ShapeError(f"square_error_masked: shapes {pred.shape} and {target.shape} differ")
    m = np.asarray(row_mask, dtype=bool).reshape(-1)
    if m.shape[0] != pred.shape[0]:
        raise ShapeError(f"row mask length {m.shape[0]} != rows {pred.shape[0]}")
    count = int(m.sum()) * pred.shape[1]
    if count == 0:
        raise ValueError("square_error_masked: no rows selected")
    w = m[:, None].astype(np.float64)

    def fwd(p, t):
        d = (p - t) * w
        return np.array([[np.sum(d * d) / count]])

    def vjp(g, p, t, out):
        d = 2.0 * g[0, 0] * (p - t) * w / count
        return d, -d

    return pred.tape.record("square_error_masked", (pred, target), fwd, vjp)


def softmax_rows(a: Node) -> Node:
    def fwd(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def vjp(g, x, y):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return a.tape.record("softmax_rows", (a,), fwd, vjp)


LN_EPS = 1e-5


def layer_norm_rows(a: Node, eps: float = LN_EPS) -> Node:
    """Standardize each row to zero mean and unit variance (no affine part)."""

    def fwd(x):
        xc = x - x.mean(axis=1, keepdims=True)
        return xc / np.sqrt(np.mean(xc * xc, axis=1, keepdims=True) + eps)

    def vjp(g, x, y):
        xc = x - x.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=1, keepdims=True) + eps)
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return a.tape.record("layer_norm_rows", (a,), fwd, vjp)


def l2_normalize_rows(a: Node, eps: float = 1e-12) -> Node:
    def fwd(x):
        return x / np.maximum(np.sqrt(np.sum(x * x, axis=1, keepdims=True)), eps)

    def vjp(g, x, y):
        n = np.maximum(np.sqrt(np.sum(x * x, axis=1, keepdims=True)), eps)
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / n,)

    return a.tape.record("l2_normalize_rows", (a,), fwd, vjp)


def clip(a: Node, lo: float, hi: float) -> Node:
    return a.tape.record(
        "clip", (a,), lambda x: np.clip(x, lo, hi), lambda g, x, out: (g * ((x >= lo) & (x <= hi)),)
    )


def gather_rows(a: Node, index) -> Node:
    idx = np.asarray(index, dtype=np.intp).reshape(-1)

    def vjp(g, x, out):
        full = np.zeros_like(x)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record("gather_rows", (a,), lambda x: x[idx], vjp)


def place_rows(a: Node, index, n_rows: int) -> Node:
    """Zero matrix of ``n_rows`` rows with row ``index[i]`` set to ``a[i]``."""
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"place_rows: {idx.shape[0]} indices for {a.shape[0]} rows")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("place_rows: duplicate target rows")

    def fwd(x):
        out = np.zeros((n_rows, x.shape[1]))
        out[idx] = x
        return out

    return a.tape.record("place_rows", (a,), fwd, lambda g, x, out: (g[idx],))


def group_mean_rows(a: Node, groups: int) -> Node:
    """Mean over each of ``groups`` consecutive equal-size row blocks."""
    rows, cols = a.shape
    if groups < 1 or rows % groups:
        raise ShapeError(f"group_mean_rows: {rows} rows not divisible into {groups} groups")
    n = rows // groups

    def fwd(x):
        return x.reshape(groups, n, cols).mean(axis=1)

    def vjp(g, x, out):
        return (np.repeat(g / n, n, axis=0),)

    return a.tape.record("group_mean_rows", (a,), fwd, vjp)


def grouped_attention(q: Node, k: Node, v: Node, groups: int, heads: int) -> Node:
    """Multi-head scaled dot-product attention within each row group.

    ``q``, ``k``, ``v`` are (groups*n) x d; tokens attend only to tokens of
    their own group. Output has the shape of ``q``.
    """
    rows, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"grouped_attention: shapes {q.shape}, {k.shape}, {v.shape} differ")
    if rows % groups or d % heads:
        raise ShapeError(f"grouped_attention: {rows}x{d} not divisible by groups={groups}, heads={heads}")
    n, dh = rows // groups, d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(x):
        return x.reshape(groups, n, heads, dh).transpose(0, 2, 1, 3)

    def merge(x):
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(rows, d))

    def probs(qv, kv):
        s = np.matmul(split(qv), split(kv).transpose(0, 1, 3, 2)) * scale
        s -= s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=-1, keepdims=True)

    def fwd(qv, kv, vv):
        return merge(np.matmul(probs(qv, kv), split(vv)))

    def vjp(g, qv, kv, vv, out):
        p = probs(qv, kv)
        gh = split(g)
        gv = np.matmul(p.transpose(0, 1, 3, 2), gh)
        gp = np.matmul(gh, split(vv).transpose(0, 1, 3, 2))
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, split(kv))
        gk = np.matmul(gs.transpose(0, 1, 3, 2), split(qv))
        return merge(gq), merge(gk), merge(gv)

    return q.tape.record("grouped_attention", (q, k, v), fwd, vjp)


OP_SET = (
    "matmul", "add", "sub", "scalar_mul", "elementwise_mul", "relu", "dropout_with_mask", "mean_all",
    "frobenius_norm", "frobenius_inner", "transpose", "row_mean_center", "square_error_masked",
    "softmax_rows", "layer_norm_rows",
    # structural and composite additions
    "scalar_div", "sum_all", "l2_normalize_rows", "clip", "gather_rows", "place_rows",
    "group_mean_rows", "grouped_attention",
)


def grad_check(fn: Callable[[Tape, dict[str, Node]], Node], params: dict[str, np.ndarray],
               h: float = 1e-5, seed: int = 0, max_coords: int | None = None, zero_tol: float = 0.0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn(tape, leaves)`` must build a scalar loss from the parameter leaves and
    be deterministic. With ``max_coords`` only a seeded random subset of
    coordinates per parameter is probed.

    Error per coordinate is ``|ad - fd| / max(1e-8, |fd|)``. A coordinate whose
    true gradient is exactly zero (dead ReLU, a bias the loss is invariant to)
    still gets ``|fd|`` near ``ulp(f) / 2h``, far above the 1e-8 floor when
    ``|f| ~ 1``. ``zero_tol > 0`` scores a coordinate as exact when both
    ``|ad|`` and ``|fd|`` are within it; a wrongly zeroed gradient still fails
    because its ``|fd|`` is large.
    """
    if h <= 0:
        raise ValueError("h must be positive")

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.param(v, k) for k, v in values.items()}
        loss = fn(tape, leaves)
        val = loss.item()
        if not np.isfinite(val):
            raise FloatingPointError("function value is not finite")
        return tape, loss

    base = {k: as_matrix(v).copy() for k, v in params.items()}
    tape, loss = evaluate(base)
    report = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in base.items():
        coords = list(np.ndindex(value.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for c in coords:
            orig = value[c]
            up, down = orig + h, orig - h
            value[c] = up
            fp = evaluate(base)[1].item()
            value[c] = down
            fm = evaluate(base)[1].item()
            value[c] = orig
            # divide by the step actually taken, not 2h, to drop representation error
            fd = (fp - fm) / (up - down)
            ad = report.grads[name][c]
            if abs(ad) <= zero_tol and abs(fd) <= zero_tol:
                continue
            worst = max(worst, abs(ad - fd) / max(1e-8, abs(fd)))
    return worst
