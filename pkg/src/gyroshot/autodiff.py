"""Reverse-mode automatic differentiation on an explicit tape.

A `Tape` is a Wengert list: every operation appends one `Var` node holding the
primal value, references to its operand nodes, and a local adjoint rule.
`backward(root)` zero-initializes all gradients, seeds the scalar root with 1,
and walks the list in reverse. Because nodes are appended in evaluation order,
the reversed list is a valid topological order and the walk is deterministic:
identical tapes produce identical gradients bit for bit.

Every public op accepts either `Var` operands or plain numpy arrays / scalars
(treated as constants), so the same code path serves taped training and
untaped evaluation. Mixed expressions work through the operator overloads;
`__array_ufunc__ = None` keeps numpy from absorbing a `Var` into an object
array.

Gradients accumulate with `+=`, so a node used several times collects the sum
of its downstream adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, TapeError

_SAFE_NORM_FLOOR = 1e-15


class Tape:
    """Append-only list of recorded operations."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def var(self, value) -> "Var":
        """Wrap `value` as a leaf variable on this tape."""
        return Var(value, self)

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """One tape node: primal value, gradient slot, and local adjoint rule."""

    # Refuse numpy's ufunc protocol so `ndarray <op> Var` falls back to our
    # reflected operators instead of building an object array.
    __array_ufunc__ = None

    __slots__ = ("value", "grad", "tape", "op", "parents", "_backward")

    def __init__(self, value, tape: Tape, op: str = "leaf", parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.op = op
        self.parents = tuple(parents)
        self._backward = _backward
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def val(x):
    """Primal value of `x`: unwraps a Var, passes arrays/scalars through."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*operands) -> Tape:
    tape = None
    for o in operands:
        if isinstance(o, Var):
            if tape is None:
                tape = o.tape
            elif o.tape is not tape:
                raise TapeError("operands live on different tapes")
    if tape is None:
        raise TapeError("no Var operand found")
    return tape


def record(value, pulls, tape: Tape, op: str = "op") -> Var:
    """Append a node with primal `value` and adjoint rules `pulls`.

    `pulls` is a list of (operand Var, pull fn) pairs; each pull maps the
    node's output adjoint to that operand's gradient contribution.
    """
    out = Var(value, tape, op=op, parents=tuple(v for v, _ in pulls))
    def _bw(g):
        for v, pull in pulls:
            v.grad += pull(g)
    out._backward = _bw
    return out


def backward(root: Var) -> None:
    """Reverse sweep from scalar `root`; fills `.grad` on every tape node."""
    if not isinstance(root, Var):
        raise TapeError("backward root must be a Var")
    if np.size(root.value) != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.value.shape}")
    for node in root.tape.nodes:
        node.grad = np.zeros_like(node.value)
    root.grad = root.grad + 1.0
    for node in reversed(root.tape.nodes):
        if node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    g = np.asarray(g)
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    pulls = []
    if isinstance(a, Var):
        pulls.append((a, lambda g: _unbroadcast(g, np.shape(av))))
    if isinstance(b, Var):
        pulls.append((b, lambda g: _unbroadcast(g, np.shape(bv))))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(a, b), "add")


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv
    pulls = []
    if isinstance(a, Var):
        pulls.append((a, lambda g: _unbroadcast(g, np.shape(av))))
    if isinstance(b, Var):
        pulls.append((b, lambda g: _unbroadcast(-g, np.shape(bv))))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(a, b), "sub")


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    pulls = []
    if isinstance(a, Var):
        pulls.append((a, lambda g: _unbroadcast(g * bv, np.shape(av))))
    if isinstance(b, Var):
        pulls.append((b, lambda g: _unbroadcast(g * av, np.shape(bv))))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(a, b), "mul")


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv
    pulls = []
    if isinstance(a, Var):
        pulls.append((a, lambda g: _unbroadcast(g / bv, np.shape(av))))
    if isinstance(b, Var):
        pulls.append((b, lambda g: _unbroadcast(-g * av / (bv * bv), np.shape(bv))))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(a, b), "div")


def neg(x):
    if not isinstance(x, Var):
        return -x
    return record(-x.value, [(x, lambda g: -g)], x.tape, "neg")


def pow_(x, p):
    """x ** p for a constant real exponent p."""
    xv = val(x)
    out = xv ** p
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g * p * xv ** (p - 1))], x.tape, "pow")


# ---------------------------------------------------------------------------
# elementwise


def sqrt(x):
    xv = val(x)
    out = np.sqrt(xv)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g * 0.5 / out)], x.tape, "sqrt")


def exp(x):
    xv = val(x)
    out = np.exp(xv)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g * out)], x.tape, "exp")


def log(x):
    xv = val(x)
    out = np.log(xv)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g / xv)], x.tape, "log")


def tanh(x):
    xv = val(x)
    out = np.tanh(xv)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g * (1.0 - out * out))], x.tape, "tanh")


def arctanh(x):
    xv = val(x)
    if np.any(np.abs(xv) >= 1.0):
        worst = float(np.max(np.abs(xv)))
        raise DomainError(f"arctanh argument magnitude {worst} >= 1")
    out = np.arctanh(xv)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g / (1.0 - xv * xv))], x.tape, "arctanh")


def sigmoid(x):
    xv = val(x)
    # exp only of non-positive numbers: stable for large |x|
    z = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: g * out * (1.0 - out))], x.tape, "sigmoid")


def relu(x):
    xv = val(x)
    out = np.maximum(xv, 0.0)
    if not isinstance(x, Var):
        return out
    mask = xv > 0
    return record(out, [(x, lambda g: g * mask)], x.tape, "relu")


def where(cond, a, b):
    """Elementwise select by a plain boolean mask (the mask is not traced)."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = val(a), val(b)
    out = np.where(cond, av, bv)
    pulls = []
    if isinstance(a, Var):
        pulls.append((a, lambda g: _unbroadcast(np.where(cond, g, 0.0), np.shape(av))))
    if isinstance(b, Var):
        pulls.append((b, lambda g: _unbroadcast(np.where(cond, 0.0, g), np.shape(bv))))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(a, b), "where")


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    xv = val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    axes = _normalize_axes(axis, np.ndim(xv))

    def pull(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, xv.shape)

    return record(out, [(x, pull)], x.tape, "sum")


def mean(x, axis=None, keepdims=False):
    xv = val(x)
    n = xv.size if axis is None else np.prod(
        [xv.shape[a] for a in _normalize_axes(axis, xv.ndim)]
    )
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def norm(x, keepdims=False):
    """Euclidean norm over the last axis, with a gradient safe at zero.

    d||x||/dx = x/||x||; the denominator is floored at 1e-15 so a zero vector
    yields a zero (sub)gradient instead of NaN.
    """
    xv = val(x)
    out_keep = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    out = out_keep if keepdims else out_keep[..., 0]
    if not isinstance(x, Var):
        return out
    denom = np.maximum(out_keep, _SAFE_NORM_FLOOR)

    def pull(g):
        if not keepdims:
            g = np.asarray(g)[..., None]
        return g * xv / denom

    return record(out, [(x, pull)], x.tape, "norm")


# ---------------------------------------------------------------------------
# shape


def reshape(x, shape):
    xv = val(x)
    out = np.reshape(xv, shape)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: np.reshape(g, xv.shape))], x.tape, "reshape")


def swapaxes(x, a, b):
    xv = val(x)
    out = np.swapaxes(xv, a, b)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: np.swapaxes(g, a, b))], x.tape, "swapaxes")


def broadcast_to(x, shape):
    xv = val(x)
    out = np.broadcast_to(xv, shape)
    if not isinstance(x, Var):
        return out
    return record(out, [(x, lambda g: _unbroadcast(g, xv.shape))], x.tape, "broadcast")


def concat(parts, axis=-1):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(p, Var) for p in parts):
        return out
    splits = np.cumsum([v.shape[axis] for v in vals[:-1]])
    pulls = []
    for i, p in enumerate(parts):
        if isinstance(p, Var):
            pulls.append((p, lambda g, i=i: np.split(g, splits, axis=axis)[i]))
    return record(out, pulls, _tape_of(*parts), "concat")


# ---------------------------------------------------------------------------
# linear maps


def matmul(a, b):
    av, bv = val(a), val(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    out = av @ bv
    pulls = []
    if isinstance(a, Var):
        pulls.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Var):
        pulls.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(a, b), "matmul")


def conv2d(x, k):
    """Valid-padding stride-1 convolution, channels last.

    x: (B, H, W, Cin), k: (kh, kw, Cin, Cout) -> (B, H-kh+1, W-kw+1, Cout).
    """
    xv, kv = val(x), val(k)
    if np.ndim(xv) != 4 or np.ndim(kv) != 4:
        raise ShapeError("conv2d expects a 4-D input and a 4-D kernel")
    B, H, W, Ci = xv.shape
    kh, kw, Ck, Co = kv.shape
    if Ck != Ci:
        raise ShapeError(f"conv2d channel mismatch: input {Ci}, kernel {Ck}")
    Ho, Wo = H - kh + 1, W - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d kernel ({kh},{kw}) larger than input ({H},{W})")
    out = np.zeros((B, Ho, Wo, Co))
    for di in range(kh):
        for dj in range(kw):
            out += xv[:, di:di + Ho, dj:dj + Wo, :] @ kv[di, dj]
    pulls = []
    if isinstance(x, Var):
        def pull_x(g):
            gx = np.zeros_like(xv)
            for di in range(kh):
                for dj in range(kw):
                    gx[:, di:di + Ho, dj:dj + Wo, :] += g @ kv[di, dj].T
            return gx
        pulls.append((x, pull_x))
    if isinstance(k, Var):
        def pull_k(g):
            gk = np.zeros_like(kv)
            for di in range(kh):
                for dj in range(kw):
                    gk[di, dj] = np.tensordot(
                        xv[:, di:di + Ho, dj:dj + Wo, :], g, axes=([0, 1, 2], [0, 1, 2])
                    )
            return gk
        pulls.append((k, pull_k))
    if not pulls:
        return out
    return record(out, pulls, _tape_of(x, k), "conv2d")


# ---------------------------------------------------------------------------
# composites


def softmax(x, axis=-1):
    """Softmax along `axis`; the max shift is detached (softmax is shift
    invariant, so the gradient is unchanged)."""
    shift = np.max(val(x), axis=axis, keepdims=True)
    e = exp(sub(x, shift))
    return div(e, sum(e, axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    shift = np.max(val(x), axis=axis, keepdims=True)
    centered = sub(x, shift)
    return sub(centered, log(sum(exp(centered), axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDiffReport:
    """Outcome of comparing tape gradients against central differences.

    `flagged` lists flat indices whose relative error exceeded the tolerance;
    at a kink or clip boundary the two estimates legitimately disagree, and
    those coordinates show up here.
    """

    max_rel_error: float
    tolerance: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray
    flagged: list = field(default_factory=list)


def finite_diff_check(f, point, step: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Check d f / d point against central finite differences.

    `f` maps a Var (or array) to a scalar. The analytic gradient comes from
    one taped evaluation at `point`; the numeric one from 2 * point.size
    untaped evaluations. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1).
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.var(point)
    out = f(x)
    if not isinstance(out, Var):
        raise TapeError("finite_diff_check: f must return a Var")
    backward(out)
    analytic = np.array(x.grad, copy=True)

    numeric = np.zeros_like(point)
    flat = point.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(val(f(point)))
        flat[i] = orig - step
        f_minus = float(val(f(point)))
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    flagged = [int(i) for i in np.flatnonzero(rel.ravel() > tol)]
    max_rel = float(rel.max()) if rel.size else 0.0
    return FiniteDiffReport(
        max_rel_error=max_rel,
        tolerance=tol,
        passed=not flagged,
        analytic=analytic,
        numeric=numeric,
        flagged=flagged,
    )
