"""Tape-based reverse-mode differentiation over 2-D float64 matrices.

Every operation evaluates eagerly and appends a node to the tape owning its
inputs; ``Tape.backward`` then sweeps the nodes in reverse order. Recorded
values are never mutated.

Example
-------
>>> tape = Tape()
>>> w = tape.leaf([[1.0, -2.0]])
>>> loss = sum_all(square(w))
>>> tape.backward(loss)
>>> w.grad
array([[ 2., -4.]])
"""

import numpy as np
from scipy.linalg import lu_solve

from . import linalg
from .linalg import DimensionError, as_mat

__all__ = [
    "Tape", "Var", "ContractError",
    "add", "sub", "neg", "mul", "scale", "matmul", "transpose",
    "relu", "tanh", "exp", "square", "log", "reciprocal",
    "rows", "cols", "vcat", "hcat", "diag_extract", "diag_build",
    "sum_all", "mean", "solve", "softmax_cross_entropy",
    "acyclic_neurons", "forward_substitution", "cayley", "activation", "grad_check",
]


class ContractError(ValueError):
    """An operation was invoked outside its contract."""


class Var:
    """Handle to one recorded node."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "requires_grad", "grad")
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), vjp=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.shape})"

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
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _slice(self, key)


class Tape:
    """Ordered record of operations; owns the values and (after backward) leaf adjoints."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=True):
        return Var(self, np.array(as_mat(value), dtype=np.float64), requires_grad=requires_grad)

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    def backward(self, root):
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: root.index + 1]):
            if node.grad is None or node.vjp is None:
                continue
            parent_grads = node.vjp(node.grad)
            if node is not root:
                # adjoints are kept for leaves only
                node.grad = None
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g
        for node in self.nodes:
            if node.requires_grad and not node.parents and node.grad is None:
                node.grad = np.zeros_like(node.value)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        raise ContractError("at least one operand must be a Var")
    return tape


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.const(x)


def _record(tape, value, parents, vjp):
    requires = any(p.requires_grad for p in parents)
    return Var(tape, value, tuple(parents), vjp if requires else None, requires)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a} with {b}") from None
    return shape


# --- linear structure -------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(tape, a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(tape, a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a):
    return _record(a.tape, -a.value, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a constant real scalar."""
    c = float(c)
    return _record(a.tape, c * a.value, (a,), lambda g: (c * g,))


def mul(a, b):
    """Elementwise product with row/column broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _record(tape, av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return _record(tape, linalg.matmul(av, bv), (a, b),
                   lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    return _record(a.tape, a.value.T.copy(), (a,), lambda g: (g.T,))


def _slice(a, key):
    if not isinstance(key, tuple):
        key = (key, slice(None))
    if len(key) != 2 or not all(isinstance(k, slice) for k in key):
        raise ContractError("only 2-D basic slices are supported")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record(a.tape, a.value[key], (a,), vjp)


def rows(a, start, stop):
    return _slice(a, (slice(start, stop), slice(None)))


def cols(a, start, stop):
    return _slice(a, (slice(None), slice(start, stop)))


def _concat(parts, axis):
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    other = 1 - axis
    if len({p.shape[other] for p in parts}) > 1:
        raise DimensionError(f"concat: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(tape, np.concatenate([p.value for p in parts], axis=axis), parts, vjp)


def vcat(parts):
    return _concat(list(parts), 0)


def hcat(parts):
    return _concat(list(parts), 1)


def diag_extract(a):
    """Diagonal of a square matrix as a column."""
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"diag_extract needs a square matrix, got {a.shape}")
    return _record(a.tape, np.diag(a.value).reshape(-1, 1).copy(), (a,),
                   lambda g: (np.diag(g[:, 0]),))


def diag_build(v):
    """Square diagonal matrix from a column (or row) vector."""
    if 1 not in v.shape:
        raise DimensionError(f"diag_build needs a vector, got {v.shape}")
    shape = v.shape
    return _record(v.tape, np.diag(v.value.ravel()), (v,),
                   lambda g: (np.diag(g).reshape(shape),))


def sum_all(a):
    shape = a.shape
    return _record(a.tape, np.array([[a.value.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def mean(a):
    n = a.value.size
    if n == 0:
        raise ContractError("mean of an empty matrix")
    shape = a.shape
    return _record(a.tape, np.array([[a.value.sum() / n]]), (a,),
                   lambda g: (np.full(shape, g[0, 0] / n),))


# --- elementwise maps -------------------------------------------------------

def relu(a):
    mask = (a.value > 0).astype(np.float64)
    return _record(a.tape, a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    y = np.tanh(a.value)
    return _record(a.tape, y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    y = np.exp(a.value)
    return _record(a.tape, y, (a,), lambda g: (g * y,))


def square(a):
    x = a.value
    return _record(a.tape, x * x, (a,), lambda g: (2.0 * g * x,))


def log(a, floor=None):
    """Natural log; with ``floor`` the argument is clamped below (zero gradient there)."""
    x = a.value
    if floor is None:
        return _record(a.tape, np.log(x), (a,), lambda g: (g / x,))
    live = x > floor
    safe = np.where(live, x, floor)
    return _record(a.tape, np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def reciprocal(a):
    y = 1.0 / a.value
    return _record(a.tape, y, (a,), lambda g: (-g * y * y,))


ACTIVATIONS = {"relu": relu, "tanh": tanh}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}; slope-restricted choices: relu, tanh") from None


def _act_value_and_slope(name, v):
    if name == "relu":
        return np.maximum(v, 0.0), (v > 0).astype(np.float64)
    if name == "tanh":
        y = np.tanh(v)
        return y, 1.0 - y * y
    raise ContractError(f"unknown activation {name!r}")


# --- solves and losses ------------------------------------------------------

def solve(a, b):
    """``X = a^{-1} b`` by LU; adjoints reuse the factorization."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    n = av.shape[0]
    if av.shape != (n, n) or bv.shape[0] != n:
        raise DimensionError(f"solve shape mismatch: {av.shape} \\ {bv.shape}")
    if n == 0:
        return _record(tape, np.zeros(bv.shape), (a, b), lambda g: (np.zeros((0, 0)), np.zeros(bv.shape)))
    factors = linalg.lu_factorize(av)
    x = lu_solve(factors, bv)

    def vjp(g):
        gb = lu_solve(factors, g, trans=1)
        return -gb @ x.T, gb

    return _record(tape, x, (a, b), vjp)


def softmax_cross_entropy(logits, onehot):
    """Mean over columns of ``-sum(onehot * log softmax(logits))``."""
    tape = logits.tape
    y = as_mat(onehot.value if isinstance(onehot, Var) else onehot)
    z = logits.value
    if z.shape != y.shape:
        raise DimensionError(f"cross-entropy shape mismatch: {z.shape} vs {y.shape}")
    batch = z.shape[1]
    shifted = z - z.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logsum
    p = np.exp(logp)
    value = -(y * logp).sum() / batch
    return _record(tape, np.array([[value]]), (logits,),
                   lambda g: (g[0, 0] * (p * y.sum(axis=0, keepdims=True) - y) / batch,))


def forward_substitution(base, strict_lower, act="relu"):
    """Neuron outputs ``w`` and slopes for ``w = act(base + L w)``, ``L`` strictly lower."""
    nv = base.shape[0]
    w = np.empty_like(base)
    f = np.tanh if act == "tanh" else _relu_value
    if act not in ACTIVATIONS:
        raise ContractError(f"unknown activation {act!r}")
    for i in range(nv):
        vi = base[i] + strict_lower[i, :i] @ w[:i] if i else base[i]
        w[i] = f(vi)
    _, slope = _act_value_and_slope(act, base + strict_lower @ w)
    return w, slope


def _relu_value(v):
    return np.maximum(v, 0.0)


def acyclic_neurons(v0, d11, act="relu"):
    """Solve ``w = act(v0 + tril(d11, -1) w)`` by forward substitution.

    ``v0`` is ``nv x batch``; only the strictly lower triangle of ``d11`` is
    read. Returns ``w``.
    """
    tape = _tape_of(v0, d11)
    v0, d11 = _lift(tape, v0), _lift(tape, d11)
    nv = v0.shape[0]
    if d11.shape != (nv, nv):
        raise DimensionError(f"acyclic_neurons: D11 {d11.shape} vs v {v0.shape}")
    D = np.tril(d11.value, -1)
    w, slope = forward_substitution(v0.value, D, act)

    def vjp(g):
        gv = np.empty_like(g)
        for i in range(nv - 1, -1, -1):
            gv[i] = slope[i] * (g[i] + D[i + 1:, i] @ gv[i + 1:])
        return gv, np.tril(gv @ w.T, -1)

    return _record(tape, w, (v0, d11), vjp)


def cayley_values(X, Y):
    """Numpy ``([A^T; B^T], lu_factors(I + Z))``; see ``cayley``."""
    eye = np.eye(X.shape[0])
    Z = X - X.T + Y.T @ Y
    factors = linalg.lu_factorize(eye + Z)
    AT = lu_solve(factors, eye - Z)
    BT = -2.0 * lu_solve(factors, Y.T, trans=1).T
    return np.vstack([AT, BT]), factors


def cayley(X, Y):
    """Stacked Cayley blocks ``[A^T; B^T]`` for ``Z = X - X^T + Y^T Y``.

    ``A^T = (I + Z)^{-1} (I - Z)`` and ``B^T = -2 Y (I + Z)^{-1}``. Fused so
    that only the LU factors and the output are kept for the reverse sweep.
    """
    tape = _tape_of(X, Y)
    X, Y = _lift(tape, X), _lift(tape, Y)
    q = X.shape[0]
    if X.shape != (q, q) or Y.shape[1] != q:
        raise DimensionError(f"cayley: X {X.shape}, Y {Y.shape}")
    Yv = Y.value
    out, factors = cayley_values(X.value, Yv)

    def vjp(g):
        ga, gb = g[:q], g[q:]
        h = -2.0 * lu_solve(factors, ga, trans=1) - out[q:].T @ gb
        gz = lu_solve(factors, h.T).T
        sym = gz + gz.T
        gy = -2.0 * lu_solve(factors, gb.T).T + Yv @ sym
        return gz - gz.T, gy

    return _record(tape, out, (X, Y), vjp)


# --- gradient checking ------------------------------------------------------

def _relative_errors(ad, fd, scale_):
    floor = max(1e-3 * scale_, 1e-12)
    return np.abs(ad - fd) / np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)


def grad_check(f, leaves, step=1e-6):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(tape, vars)`` must build a scalar root from leaf Vars created in the
    same order as ``leaves``. Per-entry errors are relative to
    ``max(|ad|, |fd|, 1e-3 * g)`` where ``g`` is the largest gradient entry
    over all leaves, so entries whose gradient is roundoff-sized (for
    instance exactly zero by symmetry) do not dominate. Returns ``inf`` if
    ``f`` is not deterministic.
    """
    leaves = [np.array(as_mat(x), dtype=np.float64) for x in leaves]

    def evaluate(values):
        tape = Tape()
        return f(tape, [tape.leaf(v) for v in values]).value[0, 0]

    tape = Tape()
    xs = [tape.leaf(v) for v in leaves]
    root = f(tape, xs)
    tape.backward(root)
    if evaluate(leaves) != root.value[0, 0]:
        return float("inf")
    fds = []
    for k, x in enumerate(leaves):
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [v.copy() for v in leaves]
            minus = [v.copy() for v in leaves]
            plus[k][idx] += step
            minus[k][idx] -= step
            fd[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        fds.append(fd)
    scale_ = max((max(np.abs(v.grad).max(), np.abs(fd).max()) for v, fd in zip(xs, fds) if fd.size),
                 default=0.0)
    worst = 0.0
    for v, fd in zip(xs, fds):
        if fd.size:
            worst = max(worst, float(_relative_errors(v.grad, fd, scale_).max()))
    return worst
