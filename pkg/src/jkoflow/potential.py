"""Scalar potential network with closed-form input derivatives.

The potential ``phi(tau, x)`` is a residual network on the stacked input
``s = (x, tau)`` in R^{d+1} (spatial coordinates first, time appended
last, so the spatial gradient is the first d entries of the input
gradient and the spatial Hessian is the top-left d x d block):

    u_1     = sigma(W0 s + b0)
    u_{l+1} = u_l + sigma(W_l u_l + b_l),   l = 1 .. L-1
    phi     = w . u_L

with the smooth elementwise activation sigma(x) = log(e^x + e^-x), whose
first two derivatives are tanh and sech^2.

First and second derivatives with respect to the input are evaluated in
closed form rather than by tracing the forward pass.  With
a_0 = W0 s + b0, a_l = W_l u_l + b_l and the backward vectors

    z_L = w,    z_l = z_{l+1} + W_l^T (sigma'(a_l) . z_{l+1}),

the gradient is  grad_s phi = W0^T (sigma'(a_0) . z_1)  and the Hessian is

    hess_s phi = W0^T diag(sigma''(a_0) . z_1) W0
               + sum_{l=1}^{L-1} G_l^T W_l^T diag(sigma''(a_l) . z_{l+1}) W_l G_l,

where G_1 = diag(sigma'(a_0)) W0 and G_{l+1} = (I + diag(sigma'(a_l)) W_l) G_l
are the forward Jacobians du_l/ds.  For L = 2 this reduces to the familiar
two-term expression; larger L just extends the recursion.  Every term is
symmetric by construction.

The same recursions are recorded on a :class:`~jkoflow.tape.Tape` (via
:class:`TapedPotential`) when gradients with respect to the network
parameters are needed: the closed-form input derivatives are themselves
taped expressions, so one reverse sweep yields d(loss)/d(theta).

A network is immutable during loss evaluation; parameter updates go
through :meth:`ResNetPotential.replace_params`, producing a new instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tape import Tape, Var, sech2, softplus_sym

CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ResNetPotential:
    """Parameter set of the scalar potential phi(tau, x).

    ``layers`` holds the residual blocks (W_l, b_l) for l = 1..L-1; the
    layer count L equals ``len(layers) + 1`` and must be at least 2.
    """

    d: int
    m: int
    W0: np.ndarray
    b0: np.ndarray
    layers: tuple
    w: np.ndarray

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("d and m must be positive")
        if len(self.layers) < 1:
            raise ValueError("layer count L must be >= 2")
        if self.W0.shape != (self.m, self.d + 1):
            raise ValueError(f"W0 must be (m, d+1), got {self.W0.shape}")
        if self.b0.shape != (self.m,) or self.w.shape != (self.m,):
            raise ValueError("b0 and w must be m-vectors")
        for W, b in self.layers:
            if W.shape != (self.m, self.m) or b.shape != (self.m,):
                raise ValueError("residual layers must be (m, m) matrices with m-vector biases")
        for arr in self._arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError("network parameters must be finite")

    def _arrays(self):
        yield self.W0
        yield self.b0
        for W, b in self.layers:
            yield W
            yield b
        yield self.w

    @property
    def L(self) -> int:
        return len(self.layers) + 1

    def params(self) -> dict:
        """Named parameter arrays: W0, b0, W1, b1, ..., w."""
        out = {"W0": self.W0, "b0": self.b0}
        for l, (W, b) in enumerate(self.layers, start=1):
            out[f"W{l}"] = W
            out[f"b{l}"] = b
        out["w"] = self.w
        return out

    def replace_params(self, new: dict) -> "ResNetPotential":
        """New network with the given parameter arrays substituted."""
        cur = self.params()
        cur.update(new)
        layers = tuple((cur[f"W{l}"], cur[f"b{l}"]) for l in range(1, self.L))
        return ResNetPotential(self.d, self.m, cur["W0"], cur["b0"], layers, cur["w"])

    # -- plain (un-taped) evaluation ----------------------------------------

    def _states(self, S: np.ndarray):
        """Pre-activations a_0..a_{L-1} and hidden states u_1..u_{L-1}."""
        A = [S @ self.W0.T + self.b0]
        u = softplus_sym(A[0])
        us = [u]
        for W, b in self.layers:
            A.append(us[-1] @ W.T + b)
            us.append(us[-1] + softplus_sym(A[-1]))
        return A, us

    def value_batch(self, tau, X: np.ndarray) -> np.ndarray:
        """phi at a batch of points; tau is a scalar or per-row array."""
        S = _stack_input(tau, X, self.d)
        _, us = self._states(S)
        return us[-1] @ self.w

    def _backward_vectors(self, A):
        """z_L..z_1 keyed by layer index (batched rows)."""
        zs = {self.L: self.w}
        for l in range(self.L - 1, 0, -1):
            W = self.layers[l - 1][0]
            zl = zs[l + 1] + (np.tanh(A[l]) * zs[l + 1]) @ W
            zs[l] = zl
        return zs

    def grad_batch(self, tau, X: np.ndarray) -> np.ndarray:
        """Full input gradient grad_s phi for a batch, shape (N, d+1)."""
        S = _stack_input(tau, X, self.d)
        A, _ = self._states(S)
        zs = self._backward_vectors(A)
        return (np.tanh(A[0]) * zs[1]) @ self.W0

    def grad_trace_batch(self, tau, X: np.ndarray):
        """(grad_s phi, trace of the spatial Hessian block) for a batch."""
        S = _stack_input(tau, X, self.d)
        A, _ = self._states(S)
        zs = self._backward_vectors(A)
        grad = (np.tanh(A[0]) * zs[1]) @ self.W0

        q0 = (self.W0[:, : self.d] ** 2).sum(axis=1)
        tr = (sech2(A[0]) * zs[1]) @ q0
        G = np.tanh(A[0])[:, :, None] * self.W0[:, : self.d]
        for l in range(1, self.L):
            W = self.layers[l - 1][0]
            P = np.matmul(W, G)
            tr = tr + ((sech2(A[l]) * zs[l + 1]) * (P**2).sum(axis=2)).sum(axis=1)
            G = G + np.tanh(A[l])[:, :, None] * P
        return grad, tr

    def velocity_divergence(self, tau, X: np.ndarray):
        """(-grad_x phi, -tr hess_x phi) for a batch: the transport field."""
        grad, tr = self.grad_trace_batch(tau, X)
        return -grad[:, : self.d], -tr

    def hessian_batch(self, tau, X: np.ndarray) -> np.ndarray:
        """Full (d+1) x (d+1) input Hessians for a batch, shape (N, d+1, d+1)."""
        S = _stack_input(tau, X, self.d)
        A, _ = self._states(S)
        zs = self._backward_vectors(A)
        c0 = sech2(A[0]) * zs[1]
        H = np.einsum("nr,ri,rj->nij", c0, self.W0, self.W0)
        G = np.tanh(A[0])[:, :, None] * self.W0
        for l in range(1, self.L):
            W = self.layers[l - 1][0]
            P = np.matmul(W, G)
            cl = sech2(A[l]) * zs[l + 1]
            H = H + np.einsum("nr,nri,nrj->nij", cl, P, P)
            G = G + np.tanh(A[l])[:, :, None] * P
        return H


def _stack_input(tau, X: np.ndarray, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"positions must be (N, {d}), got {X.shape}")
    col = np.broadcast_to(np.asarray(tau, dtype=np.float64), (X.shape[0],))[:, None]
    return np.concatenate([X, col], axis=1)


# -- spec-level single-point operations --------------------------------------


def forward(net: ResNetPotential, tau: float, x) -> float:
    """phi(tau, x) at one point."""
    return float(net.value_batch(tau, np.asarray(x, dtype=np.float64)[None, :])[0])


def input_gradient(net: ResNetPotential, tau: float, x) -> np.ndarray:
    """grad_s phi at one point; the spatial part is the first d entries."""
    return net.grad_batch(tau, np.asarray(x, dtype=np.float64)[None, :])[0]


def input_hessian(net: ResNetPotential, tau: float, x) -> np.ndarray:
    """hess_s phi at one point; the spatial block is the top-left d x d."""
    return net.hessian_batch(tau, np.asarray(x, dtype=np.float64)[None, :])[0]


def velocity(net: ResNetPotential, tau: float, x) -> np.ndarray:
    """Transport velocity -grad_x phi."""
    return -input_gradient(net, tau, x)[: net.d]


def divergence(net: ResNetPotential, tau: float, x) -> float:
    """div of the velocity field: -tr of the spatial Hessian block."""
    H = input_hessian(net, tau, x)
    return -float(np.trace(H[: net.d, : net.d]))


# -- initialization -----------------------------------------------------------


def init_params(d: int, m: int, L: int, rng: np.random.Generator, mode: str = "scaled-normal") -> ResNetPotential:
    """Draw a fresh parameter set.

    ``unit-normal`` uses independent standard normal entries everywhere;
    ``scaled-normal`` divides each draw by sqrt(fan-in) of its layer, which
    keeps initial velocities moderate at widths of 64 and above.
    """
    if mode not in ("unit-normal", "scaled-normal"):
        raise ValueError(f"unknown init mode {mode!r}")

    def draw(shape, fan_in):
        g = rng.standard_normal(shape)
        if mode == "scaled-normal":
            g = g / np.sqrt(fan_in)
        return g

    W0 = draw((m, d + 1), d + 1)
    b0 = draw((m,), d + 1)
    layers = tuple((draw((m, m), m), draw((m,), m)) for _ in range(L - 1))
    w = draw((m,), m)
    return ResNetPotential(d, m, W0, b0, layers, w)


def zero_potential(d: int, m: int = 4, L: int = 2) -> ResNetPotential:
    """All-zero parameters: identity transport, handy in tests."""
    layers = tuple((np.zeros((m, m)), np.zeros(m)) for _ in range(L - 1))
    return ResNetPotential(d, m, np.zeros((m, d + 1)), np.zeros(m), layers, np.zeros(m))


# -- taped evaluation ---------------------------------------------------------


class TapedPotential:
    """Network evaluation recorded on a tape, for d(loss)/d(theta).

    Registers every parameter array once on the given tape and re-derives
    the closed-form gradient/Hessian-trace recursions as taped expressions.
    Reusable across many evaluation points on the same tape (RK stages,
    inner steps).
    """

    def __init__(self, tape: Tape, net: ResNetPotential):
        self.tape = tape
        self.net = net
        self.d = net.d
        self.L = net.L
        self.pvars = {name: tape.param(name, value) for name, value in net.params().items()}
        self._spatial = None

    def _spatial_weight_vars(self):
        # q0[r] = sum_{i<d} W0[r,i]^2 and the spatial columns of W0 enter
        # every Hessian-trace evaluation; build them once per tape.
        if self._spatial is None:
            t = self.tape
            W0 = self.pvars["W0"]
            sp = t.narrow(W0, 1, 0, self.d)
            q0 = t.sum(t.unary(sp, "square"), axis=1)
            cols = [t.reshape(t.narrow(W0, 1, i, i + 1), (self.net.m,)) for i in range(self.d)]
            self._spatial = (q0, cols)
        return self._spatial

    def _stage(self, tau, Z: Var):
        """Pre-activations, their tanh, and backward vectors at (tau, Z).

        tanh is evaluated once per pre-activation; sigma and sigma'' reuse
        it (sigma' = tanh, sigma'' = 1 - tanh^2), which keeps the number of
        transcendental array passes per stage minimal.
        """
        t = self.tape
        n = Z.value.shape[0]
        col = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))[:, None]
        S = t.concat(Z, col, axis=1)
        A = [t.affine(S, self.pvars["W0"], self.pvars["b0"])]
        T = [t.unary(A[0], "tanh")]
        U = t.unary(A[0], "softplus_sym", deriv=T[0].value)
        for l in range(1, self.L):
            A.append(t.affine(U, self.pvars[f"W{l}"], self.pvars[f"b{l}"]))
            T.append(t.unary(A[l], "tanh"))
            if l < self.L - 1:
                U = U + t.unary(A[l], "softplus_sym", deriv=T[l].value)
        zs = {self.L: self.pvars["w"]}
        for l in range(self.L - 1, 0, -1):
            zs[l] = zs[l + 1] + t.matmul(T[l] * zs[l + 1], self.pvars[f"W{l}"])
        return T, zs

    def grad_trace(self, tau, Z: Var, want_trace: bool = True):
        """(velocity, |grad_x phi|^2, tr hess_x phi) as taped Vars.

        ``tau`` may be a scalar or a per-row array; the trace Var is None
        when ``want_trace`` is false.  The spatial Jacobian recursion runs
        column by column so every contraction is a plain matrix product.
        """
        t = self.tape
        T, zs = self._stage(tau, Z)
        gradS = t.matmul(T[0] * zs[1], self.pvars["W0"])
        grad_x = t.narrow(gradS, 1, 0, self.d)
        vel = -grad_x
        kin = t.sum(t.unary(grad_x, "square"), axis=1)
        if not want_trace:
            return vel, kin, None

        q0, w0cols = self._spatial_weight_vars()
        c0 = t.unary(T[0], "one_minus_square") * zs[1]
        tr = t.sum(c0 * q0, axis=1)
        Gcols = [T[0] * col for col in w0cols]
        for l in range(1, self.L):
            W = self.pvars[f"W{l}"]
            Pcols = [t.matmul(G, W, tb=True) for G in Gcols]
            Q = t.unary(Pcols[0], "square")
            for P in Pcols[1:]:
                Q = Q + t.unary(P, "square")
            cl = t.unary(T[l], "one_minus_square") * zs[l + 1]
            tr = tr + t.sum(cl * Q, axis=1)
            if l < self.L - 1:
                Gcols = [G + T[l] * P for G, P in zip(Gcols, Pcols)]
        return vel, kin, tr

    def value(self, tau, Z: Var) -> Var:
        """Taped phi values, shape (N,)."""
        t = self.tape
        n = Z.value.shape[0]
        col = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))[:, None]
        S = t.concat(Z, col, axis=1)
        A0 = t.affine(S, self.pvars["W0"], self.pvars["b0"])
        U = softplus_sym(A0)
        for l in range(1, self.L):
            Al = t.affine(U, self.pvars[f"W{l}"], self.pvars[f"b{l}"])
            U = U + softplus_sym(Al)
        return t.sum(U * self.pvars["w"], axis=1)


def taped_loss_primitives(net: ResNetPotential, taus, X):
    """Record the loss ingredients phi, |grad_x phi|^2 and tr hess_x phi.

    ``taus`` is a scalar or per-point array, ``X`` an (N, d) batch.  Returns
    (tape, primitives) where primitives carries taped Vars ``value``,
    ``kinetic``, ``hess_trace`` and ``velocity``; finalize any scalar built
    from them and run ``tape.backward()`` for parameter gradients.
    """
    X = np.asarray(X, dtype=np.float64)
    tape = Tape()
    tp = TapedPotential(tape, net)
    Z = tape.constant(X)
    vel, kin, tr = tp.grad_trace(taus, Z)
    val = tp.value(taus, Z)

    class _Primitives:
        value = val
        kinetic = kin
        hess_trace = tr
        velocity = vel
        positions = Z

    return tape, _Primitives


# -- checkpoint format --------------------------------------------------------
# One JSON document per trained step:
#   {"version": 1, "L": int, "m": int, "d": int,
#    "params": {"W0": [row-major floats], "b0": [...], ..., "w": [...]}}
# Floats are serialized with repr round-tripping, so reloading is bit-stable.


def save_checkpoint(net: ResNetPotential, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "L": net.L,
        "m": net.m,
        "d": net.d,
        "params": {k: v.ravel().tolist() for k, v in net.params().items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ResNetPotential:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    L, m, d = doc["L"], doc["m"], doc["d"]
    shapes = {"W0": (m, d + 1), "b0": (m,), "w": (m,)}
    for l in range(1, L):
        shapes[f"W{l}"] = (m, m)
        shapes[f"b{l}"] = (m,)
    params = {}
    for name, shape in shapes.items():
        flat = np.asarray(doc["params"][name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"checkpoint field {name} has wrong length")
        params[name] = flat.reshape(shape)
    layers = tuple((params[f"W{l}"], params[f"b{l}"]) for l in range(1, L))
    return ResNetPotential(d, m, params["W0"], params["b0"], layers, params["w"])
