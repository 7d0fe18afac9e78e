"""Dense Lipschitz-bounded deep networks built from sandwich layers.

The network is

    z = sqrt(g) * x
    z = sqrt(2) A^T Psi act(sqrt(2) Psi^{-1} B z + b)    (each hidden layer)
    y = W_L (sqrt(g) * z) + b_L

where every ``(A, B)`` pair comes from a Cayley transform with
``A A^T + B B^T = I`` and ``W_L`` is the ``B`` block of the output layer's
pair, so each stage is 1-Lipschitz and the whole map is ``g``-Lipschitz.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .linalg import DimensionError

SQRT2 = np.sqrt(2.0)


@dataclass
class LbdnDirectParams:
    """Free parameters of a dense LBDN.

    ``params`` holds ``X{k}``, ``Y{k}``, ``b{k}`` for every layer and
    ``d{k}`` for hidden layers (``k = len(widths)`` is the output layer),
    plus ``log_gamma`` when the bound is learnable.
    """

    nu: int
    widths: tuple
    ny: int
    params: dict
    gamma: float = 1.0
    learnable_gamma: bool = False
    act: str = "relu"

    @property
    def n_layers(self):
        return len(self.widths) + 1

    def layer_io(self, k):
        sizes = (self.nu, *self.widths, self.ny)
        return sizes[k], sizes[k + 1]

    def log_gamma(self):
        if self.learnable_gamma:
            return float(self.params["log_gamma"][0, 0])
        return float(np.log(self.gamma))

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


@dataclass
class SandwichLayer:
    """One constructed layer.

    ``AT``/``BT`` are the Cayley blocks and ``psi`` the diagonal scaling
    (column). Hidden layers cache ``pre = sqrt(2) Psi^{-1} B`` and
    ``post = sqrt(2) A^T Psi``; the output layer uses ``W = B``.
    """

    AT: object
    BT: object
    b: object
    psi: object = None
    is_output: bool = False
    pre: object = None
    post: object = None
    W: object = None

    def __post_init__(self):
        if self.is_output:
            if self.W is None:
                self.W = self.BT.T
        elif self.pre is None:
            self.pre = ((1.0 / self.psi) * self.BT.T) * SQRT2
            self.post = self.AT * (self.psi.T * SQRT2)


@dataclass
class ExplicitLbdn:
    layers: list
    input_scale: object
    output_scale: object
    act: str = "relu"

    @property
    def W_L(self):
        return self.layers[-1].W

    @property
    def b_L(self):
        return self.layers[-1].b


def init_lbdn(nu, widths, ny, gamma=1.0, learnable_gamma=False, seed=0, act="relu"):
    """Direct parameters with ``X, Y ~ N(0, 1/(p+q))``, ``d = 0``, ``b = 0``."""
    if not gamma > 0:
        raise ValueError("Lipschitz bound gamma must be positive")
    ad.activation(act)
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in widths)
    sizes = (nu, *widths, ny)
    params = {}
    for k in range(len(sizes) - 1):
        p, q = sizes[k], sizes[k + 1]
        std = 1.0 / np.sqrt(p + q)
        params[f"X{k}"] = std * rng.standard_normal((q, q))
        params[f"Y{k}"] = std * rng.standard_normal((p, q))
        if k < len(widths):
            params[f"d{k}"] = np.zeros((q, 1))
        params[f"b{k}"] = np.zeros((q, 1))
    if learnable_gamma:
        params["log_gamma"] = np.full((1, 1), np.log(gamma))
    return LbdnDirectParams(nu, widths, ny, params, float(gamma), learnable_gamma, act)


def cayley(X, Y):
    """Cayley pair ``(A^T, B^T)`` from free ``X`` (q x q) and ``Y`` (p x q).

    Works on numpy arrays or Vars.
    """
    if X.shape[0] != X.shape[1] or Y.shape[1] != X.shape[0]:
        raise DimensionError(f"cayley: X {X.shape}, Y {Y.shape}")
    q = X.shape[0]
    if isinstance(X, Var) or isinstance(Y, Var):
        stacked = ad.cayley(X, Y)
        return ad.rows(stacked, 0, q), ad.rows(stacked, q, q + Y.shape[0])
    stacked, _ = ad.cayley_values(np.asarray(X, dtype=float), np.asarray(Y, dtype=float))
    return stacked[:q], stacked[q:]


def build_explicit(tape, p, v):
    """Construct the explicit network on ``tape`` from parameter Vars ``v``."""
    layers = []
    for k in range(p.n_layers):
        AT, BT = cayley(v[f"X{k}"], v[f"Y{k}"])
        hidden = k < len(p.widths)
        psi = ad.exp(v[f"d{k}"]) if hidden else None
        layers.append(SandwichLayer(AT, BT, v[f"b{k}"], psi, is_output=not hidden))
    log_gamma = v["log_gamma"] if p.learnable_gamma else tape.const(np.log(p.gamma))
    root = ad.exp(ad.scale(log_gamma, 0.5))
    return ExplicitLbdn(layers, root, root, p.act)


def lbdn_to_explicit(p):
    """Numpy-valued explicit network."""
    tape = Tape()
    m = build_explicit(tape, p, {k: tape.leaf(val) for k, val in p.params.items()})
    layers = [
        SandwichLayer(l.AT.value, l.BT.value, l.b.value,
                      None if l.psi is None else l.psi.value, l.is_output)
        for l in m.layers
    ]
    return ExplicitLbdn(layers, float(m.input_scale.value[0, 0]),
                        float(m.output_scale.value[0, 0]), m.act)


def _act(name, z):
    if isinstance(z, Var):
        return ad.activation(name)(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def sandwich_forward(layer, z, act="relu"):
    if layer.is_output:
        return layer.W @ z + layer.b
    if z.shape[0] != layer.BT.shape[0]:
        raise DimensionError(f"sandwich layer expects {layer.BT.shape[0]} inputs, got {z.shape[0]}")
    return layer.post @ _act(act, layer.pre @ z + layer.b)


def lbdn_forward(m, x):
    """Evaluate on columns ``x`` (nu x batch); records on a tape if anything is a Var."""
    nu = m.layers[0].BT.shape[0]
    if x.shape[0] != nu:
        raise DimensionError(f"LBDN expects {nu} inputs, got {x.shape}")
    z = m.input_scale * x
    for layer in m.layers[:-1]:
        z = sandwich_forward(layer, z, m.act)
    return sandwich_forward(m.layers[-1], m.output_scale * z, m.act)


def orthogonality_residual(layer):
    """``||A A^T + B B^T - I||_F`` for a constructed layer."""
    AT, BT = np.asarray(layer.AT), np.asarray(layer.BT)
    q = AT.shape[0]
    return float(np.linalg.norm(AT.T @ AT + BT.T @ BT - np.eye(q)))
