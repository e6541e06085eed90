"""Dense float64 tensors and a reverse-mode differentiation tape.

Values are plain C-contiguous ``numpy`` float64 arrays.  A :class:`Tape`
records a fixed, small set of primitives (matmul with optional operand
transposes, broadcasting add/sub/mul, elementwise unaries with supplied
derivatives, power, axis reductions, slicing/expansion/concatenation and
trace) while an expression is evaluated; :meth:`Tape.backward` then walks
the recorded nodes in reverse and accumulates adjoints, returning the
gradient of the scalar output with respect to every registered parameter.

The engine is deliberately minimal: every training loss in this package is
expressible in the primitive set, gradients accumulate additively across
all uses of a parameter, and a tape admits exactly one backward pass per
recorded forward pass.  All intermediate values are checked for NaN/Inf
(raising :class:`NonFiniteError`) unless the tape is created with
``check_finite=False``.

Tensors are immutable by convention and safe to share between threads; a
Tape is single-owner and single-threaded.  Parallelism, where wanted, sits
above this module: independent per-batch tapes can be evaluated
concurrently and their gradients summed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "TapeReuseError",
    "tensor",
    "matmul",
    "Tape",
    "Var",
    "record_scalar",
    "backward",
    "exp",
    "log",
    "tanh",
    "softplus_sym",
    "sech2",
    "reciprocal",
    "vsum",
    "vmean",
    "dot",
    "trace",
]

Tensor = np.ndarray


class NonFiniteError(ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class TapeReuseError(RuntimeError):
    """Backward was invoked twice on the same recorded tape."""


def _check(value: np.ndarray, where: str) -> np.ndarray:
    # A single reduction: any NaN/Inf entry makes the sum non-finite, so
    # this detects every non-finite tensor (and rejects the astronomically
    # large finite ones whose sum overflows, which are equally fatal).
    if not np.isfinite(value.sum()):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return value


def tensor(data, shape=None) -> Tensor:
    """Build a float64 C-order tensor, rejecting non-finite entries."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"data length {arr.size} does not match shape {tuple(shape)}")
        arr = arr.reshape(shape)
    return _check(arr, "tensor()")


def matmul(a, b) -> Tensor:
    """Checked matrix product of two 2-d tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return _check(a @ b, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _softplus_sym(x):
    # log(e^x + e^-x) in overflow-safe form |x| + log1p(exp(-2|x|)).
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax))


def _sech2(x):
    t = np.tanh(x)
    return 1.0 - t * t


# Elementwise unaries: name -> (forward, derivative taking (x, y=f(x))).
_UNARY = {
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "softplus_sym": (_softplus_sym, lambda x, y: np.tanh(x)),
    "sech2": (_sech2, lambda x, y: -2.0 * np.tanh(x) * y),
    "reciprocal": (lambda x: 1.0 / x, lambda x, y: -y * y),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
    "square": (lambda x: x * x, lambda x, y: 2.0 * x),
    "one_minus_square": (lambda x: 1.0 - x * x, lambda x, y: -2.0 * x),
    "neg": (np.negative, lambda x, y: -1.0),
}


class _Node:
    __slots__ = ("op", "parents", "aux", "value")

    def __init__(self, op, parents, aux, value):
        self.op = op
        self.parents = parents
        self.aux = aux
        self.value = value


class Var:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "idx")

    # keep numpy from absorbing `ndarray <op> Var` into an object array;
    # the reflected operators below handle those cases
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    # Arithmetic sugar; non-Var operands are treated as constants.
    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, self.tape.unary(other, "reciprocal"))
        return self.tape.mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return self.tape.mul(self.tape.unary(self, "reciprocal"), other)

    def __neg__(self):
        return self.tape.unary(self, "neg")

    def __pow__(self, p):
        if p == 2:
            return self.tape.unary(self, "square")
        return self.tape.powf(self, float(p))


class Tape:
    """Ordered record of primitive operations with reverse-mode backward.

    Nodes are stored in topological order (parents always precede their
    consumers).  Parameters occupy one leaf node each; the slot map
    ``param_nodes`` takes a parameter id to its node index.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.param_nodes: dict[str, int] = {}
        self.check_finite = check_finite
        self.output: int | None = None
        self.consumed = False

    # -- recording ---------------------------------------------------------

    def _push(self, op, parents, aux, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite:
            _check(value, op)
        self.nodes.append(_Node(op, parents, aux, value))
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Var:
        if name in self.param_nodes:
            raise ValueError(f"parameter slot {name!r} already registered")
        v = self._push("param", (), name, np.asarray(value, dtype=np.float64))
        self.param_nodes[name] = v.idx
        return v

    def constant(self, value) -> Var:
        return self._push("const", (), None, value)

    def _operand(self, x):
        """Split an operand into (node index or None, raw value)."""
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand recorded on a different tape")
            return x.idx, x.value
        return None, np.asarray(x, dtype=np.float64)

    def add(self, a, b) -> Var:
        ia, va = self._operand(a)
        ib, vb = self._operand(b)
        return self._push("add", (ia, ib), (va, vb), va + vb)

    def sub(self, a, b) -> Var:
        ia, va = self._operand(a)
        ib, vb = self._operand(b)
        return self._push("sub", (ia, ib), (va, vb), va - vb)

    def mul(self, a, b) -> Var:
        ia, va = self._operand(a)
        ib, vb = self._operand(b)
        return self._push("mul", (ia, ib), (va, vb), va * vb)

    def div(self, a, b) -> Var:
        ia, va = self._operand(a)
        ib, vb = self._operand(b)
        return self._push("div", (ia, ib), (va, vb), va / vb)

    def matmul(self, a, b, ta: bool = False, tb: bool = False) -> Var:
        ia, va = self._operand(a)
        ib, vb = self._operand(b)
        A = np.swapaxes(va, -1, -2) if ta else va
        B = np.swapaxes(vb, -1, -2) if tb else vb
        if A.shape[-1] != B.shape[-2]:
            raise ValueError(f"inner dimensions disagree: {A.shape} x {B.shape}")
        return self._push("matmul", (ia, ib), (va, vb, ta, tb), A @ B)

    def unary(self, a, kind: str, deriv: np.ndarray | None = None) -> Var:
        """Elementwise unary; ``deriv`` optionally supplies a precomputed
        derivative array (e.g. an already-taped tanh value), avoiding a
        transcendental re-evaluation during backward."""
        ia, va = self._operand(a)
        fwd, _ = _UNARY[kind]
        return self._push("unary", (ia,), (kind, va, deriv), fwd(va))

    def affine(self, a, W, b) -> Var:
        """Fused a @ W^T + b for the network's dense layers."""
        ia, va = self._operand(a)
        iw, vw = self._operand(W)
        ib, vb = self._operand(b)
        if va.shape[-1] != vw.shape[1]:
            raise ValueError(f"affine dimensions disagree: {va.shape} x {vw.shape}")
        return self._push("affine", (ia, iw, ib), (va, vw, vb), va @ vw.T + vb)

    def reshape(self, a, shape) -> Var:
        ia, va = self._operand(a)
        return self._push("reshape", (ia,), va.shape, va.reshape(shape))

    def powf(self, a, p: float) -> Var:
        ia, va = self._operand(a)
        return self._push("powf", (ia,), (p, va), va**p)

    def sum(self, a, axis=None, keepdims: bool = False) -> Var:
        ia, va = self._operand(a)
        return self._push(
            "sum", (ia,), (axis, keepdims, va.shape), va.sum(axis=axis, keepdims=keepdims)
        )

    def narrow(self, a, axis: int, start: int, stop: int) -> Var:
        ia, va = self._operand(a)
        sl = [slice(None)] * va.ndim
        sl[axis] = slice(start, stop)
        return self._push("narrow", (ia,), (axis, start, stop, va.shape), va[tuple(sl)])

    def expand_dims(self, a, axis: int) -> Var:
        ia, va = self._operand(a)
        return self._push("expand", (ia,), (axis, va.shape), np.expand_dims(va, axis))

    def concat(self, a, b, axis: int) -> Var:
        ia, va = self._operand(a)
        ib, vb = self._operand(b)
        return self._push(
            "concat", (ia, ib), (axis, va.shape[axis], vb), np.concatenate([va, vb], axis=axis)
        )

    def trace(self, a) -> Var:
        ia, va = self._operand(a)
        if va.ndim != 2 or va.shape[0] != va.shape[1]:
            raise ValueError("trace expects a square matrix")
        return self._push("trace", (ia,), va.shape[0], np.trace(va))

    # -- backward ----------------------------------------------------------

    def finalize(self, out: Var) -> float:
        """Mark the scalar output of the recorded expression."""
        if out.value.size != 1:
            raise ValueError("tape output must be a scalar")
        self.output = out.idx
        return float(out.value)

    def backward(self, seed: float = 1.0) -> dict[str, np.ndarray]:
        """Return d(output)/d(param) for every registered parameter.

        A tape may be walked backward exactly once per recording.
        """
        if self.output is None:
            raise ValueError("tape has no finalized output")
        if self.consumed:
            raise TapeReuseError("backward already ran on this tape; re-record first")
        self.consumed = True

        nodes = self.nodes
        adj: list = [None] * len(nodes)
        owned = [False] * len(nodes)
        adj[self.output] = np.full_like(nodes[self.output].value, float(seed))
        owned[self.output] = True

        def give(idx, contrib, fresh=True):
            # ``fresh`` marks contributions we allocated ourselves; only
            # those may later be accumulated into in place.
            if idx is None:
                return
            if adj[idx] is None:
                adj[idx] = contrib
                owned[idx] = fresh
            elif owned[idx] and adj[idx].shape == contrib.shape:
                adj[idx] += contrib
            else:
                adj[idx] = adj[idx] + contrib
                owned[idx] = True

        for i in range(len(nodes) - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            op = node.op
            if op in ("param", "const"):
                continue
            if op == "add":
                va, vb = node.aux
                ca = _unbroadcast(g, va.shape)
                cb = _unbroadcast(g, vb.shape)
                give(node.parents[0], ca, fresh=ca is not g)
                give(node.parents[1], cb, fresh=cb is not g)
            elif op == "sub":
                va, vb = node.aux
                ca = _unbroadcast(g, va.shape)
                give(node.parents[0], ca, fresh=ca is not g)
                give(node.parents[1], _unbroadcast(-g, vb.shape))
            elif op == "mul":
                va, vb = node.aux
                if node.parents[0] is not None:
                    give(node.parents[0], _unbroadcast(g * vb, va.shape))
                if node.parents[1] is not None:
                    give(node.parents[1], _unbroadcast(g * va, vb.shape))
            elif op == "div":
                va, vb = node.aux
                if node.parents[0] is not None:
                    give(node.parents[0], _unbroadcast(g / vb, va.shape))
                if node.parents[1] is not None:
                    give(node.parents[1], _unbroadcast(-g * node.value / vb, vb.shape))
            elif op == "matmul":
                va, vb, ta, tb = node.aux
                A = np.swapaxes(va, -1, -2) if ta else va
                B = np.swapaxes(vb, -1, -2) if tb else vb
                if node.parents[0] is not None:
                    dA = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
                    give(node.parents[0], np.swapaxes(dA, -1, -2) if ta else dA)
                if node.parents[1] is not None:
                    dB = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
                    give(node.parents[1], np.swapaxes(dB, -1, -2) if tb else dB)
            elif op == "unary":
                kind, x, dv = node.aux
                give(node.parents[0], g * (dv if dv is not None else _UNARY[kind][1](x, node.value)))
            elif op == "affine":
                va, vw, _ = node.aux
                if node.parents[0] is not None:
                    give(node.parents[0], g @ vw)
                if node.parents[1] is not None:
                    gw = np.swapaxes(g, -1, -2) @ va
                    if gw.ndim > 2:
                        gw = gw.sum(axis=tuple(range(gw.ndim - 2)))
                    give(node.parents[1], gw)
                if node.parents[2] is not None:
                    give(node.parents[2], g.sum(axis=tuple(range(g.ndim - 1))))
            elif op == "reshape":
                give(node.parents[0], g.reshape(node.aux), fresh=False)
            elif op == "powf":
                p, x = node.aux
                give(node.parents[0], g * p * x ** (p - 1.0))
            elif op == "sum":
                axis, keepdims, shape = node.aux
                gg = g
                if axis is not None and not keepdims:
                    gg = np.expand_dims(g, axis)
                give(node.parents[0], np.broadcast_to(gg, shape), fresh=False)
            elif op == "narrow":
                axis, start, stop, shape = node.aux
                buf = np.zeros(shape)
                sl = [slice(None)] * len(shape)
                sl[axis] = slice(start, stop)
                buf[tuple(sl)] = g
                give(node.parents[0], buf)
            elif op == "expand":
                axis, shape = node.aux
                give(node.parents[0], g.reshape(shape), fresh=False)
            elif op == "concat":
                axis, na, _ = node.aux
                sl_a = [slice(None)] * g.ndim
                sl_b = [slice(None)] * g.ndim
                sl_a[axis] = slice(0, na)
                sl_b[axis] = slice(na, None)
                give(node.parents[0], g[tuple(sl_a)], fresh=False)
                give(node.parents[1], g[tuple(sl_b)], fresh=False)
            elif op == "trace":
                give(node.parents[0], g * np.eye(node.aux))
            else:  # pragma: no cover
                raise RuntimeError(f"unknown op {op!r}")
            adj[i] = None

        grads = {}
        for name, idx in self.param_nodes.items():
            a = adj[idx]
            grads[name] = np.zeros_like(nodes[idx].value) if a is None else np.asarray(a) + 0.0
        return grads

    # -- replay ------------------------------------------------------------

    def replay(self) -> float:
        """Re-execute the recorded forward pass and return the output value."""
        if self.output is None:
            raise ValueError("tape has no finalized output")
        vals: list = [None] * len(self.nodes)

        def operand(node, slot):
            p = node.parents[slot]
            return vals[p] if p is not None else node.aux[slot]

        for i, node in enumerate(self.nodes):
            op = node.op
            if op in ("param", "const"):
                vals[i] = node.value
            elif op == "add":
                vals[i] = operand(node, 0) + operand(node, 1)
            elif op == "sub":
                vals[i] = operand(node, 0) - operand(node, 1)
            elif op == "mul":
                vals[i] = operand(node, 0) * operand(node, 1)
            elif op == "div":
                vals[i] = operand(node, 0) / operand(node, 1)
            elif op == "matmul":
                va, vb, ta, tb = node.aux
                a = vals[node.parents[0]] if node.parents[0] is not None else va
                b = vals[node.parents[1]] if node.parents[1] is not None else vb
                A = np.swapaxes(a, -1, -2) if ta else a
                B = np.swapaxes(b, -1, -2) if tb else b
                vals[i] = A @ B
            elif op == "unary":
                vals[i] = _UNARY[node.aux[0]][0](vals[node.parents[0]])
            elif op == "affine":
                va, vw, vb = node.aux
                a = vals[node.parents[0]] if node.parents[0] is not None else va
                w = vals[node.parents[1]] if node.parents[1] is not None else vw
                b = vals[node.parents[2]] if node.parents[2] is not None else vb
                vals[i] = a @ w.T + b
            elif op == "reshape":
                vals[i] = vals[node.parents[0]].reshape(self.nodes[i].value.shape)
            elif op == "powf":
                vals[i] = vals[node.parents[0]] ** node.aux[0]
            elif op == "sum":
                axis, keepdims, _ = node.aux
                vals[i] = vals[node.parents[0]].sum(axis=axis, keepdims=keepdims)
            elif op == "narrow":
                axis, start, stop, shape = node.aux
                sl = [slice(None)] * len(shape)
                sl[axis] = slice(start, stop)
                vals[i] = vals[node.parents[0]][tuple(sl)]
            elif op == "expand":
                vals[i] = np.expand_dims(vals[node.parents[0]], node.aux[0])
            elif op == "concat":
                axis, _, vb = node.aux
                b = vals[node.parents[1]] if node.parents[1] is not None else vb
                vals[i] = np.concatenate([vals[node.parents[0]], b], axis=axis)
            elif op == "trace":
                vals[i] = np.trace(vals[node.parents[0]])
            else:  # pragma: no cover
                raise RuntimeError(f"unknown op {op!r}")
        return float(np.asarray(vals[self.output]))


def record_scalar(fn, inputs: dict) -> tuple[float, Tape]:
    """Record ``fn`` evaluated on the named inputs; return (value, tape).

    ``fn`` receives the tape and a dict of parameter Vars and must return a
    scalar Var.  The recorded value equals the un-taped evaluation
    bit-for-bit because recording runs the same numpy primitives.
    """
    tape = Tape()
    params = {name: tape.param(name, value) for name, value in inputs.items()}
    out = fn(tape, params)
    tape.finalize(out)
    return float(out.value), tape


def backward(tape: Tape, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient map of a finalized tape (single use)."""
    return tape.backward(seed)


# -- polymorphic helpers ----------------------------------------------------
# These dispatch on Var vs. ndarray so that potential/energy descriptors can
# be written once and evaluated both under the tape and in plain numpy.


def exp(x):
    return x.tape.unary(x, "exp") if isinstance(x, Var) else np.exp(x)


def log(x):
    return x.tape.unary(x, "log") if isinstance(x, Var) else np.log(x)


def tanh(x):
    return x.tape.unary(x, "tanh") if isinstance(x, Var) else np.tanh(x)


def softplus_sym(x):
    """The activation log(e^x + e^-x), overflow-safe."""
    if isinstance(x, Var):
        return x.tape.unary(x, "softplus_sym")
    return _softplus_sym(np.asarray(x, dtype=np.float64))


def sech2(x):
    """Second derivative of the activation: 1 - tanh(x)^2."""
    return x.tape.unary(x, "sech2") if isinstance(x, Var) else _sech2(np.asarray(x, dtype=np.float64))


def reciprocal(x):
    return x.tape.unary(x, "reciprocal") if isinstance(x, Var) else 1.0 / x


def vsum(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return x.tape.sum(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def vmean(x, axis=None):
    if isinstance(x, Var):
        n = x.value.size if axis is None else x.value.shape[axis]
        return x.tape.sum(x, axis=axis) * (1.0 / n)
    return np.mean(x, axis=axis)


def dot(a, b):
    """Inner product along all axes (sum of elementwise products)."""
    if isinstance(a, Var) or isinstance(b, Var):
        t = a.tape if isinstance(a, Var) else b.tape
        return t.sum(t.mul(a, b))
    return float(np.sum(np.asarray(a) * np.asarray(b)))


def trace(a):
    return a.tape.trace(a) if isinstance(a, Var) else float(np.trace(a))
