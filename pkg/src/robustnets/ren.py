"""Recurrent equilibrium networks: direct parameters, construction, evaluation.

A REN is the acyclic feedback interconnection

    [x+; v; y] = W [x; w; u] + b,     w = act(v)

where ``D11`` (the ``v <- w`` block of ``W``) is strictly lower triangular so
that ``w`` is found by one forward-substitution sweep. The weights are never
trained directly: ``RenDirectParams.params`` holds unconstrained matrices and
``to_explicit`` maps them onto weights that satisfy a dissipation LMI
together with the returned certificate ``(P, Lambda)``.

Block layout of the construction matrix is ``(x, w, x+)`` with sizes
``(nx, nv, nx)``; see ``build_explicit`` for the per-variant recipes.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tape, Var
from .linalg import DimensionError

KINDS = ("contracting", "lipschitz", "passive_input", "passive_output", "general")


class SpecError(ValueError):
    """IQC specification is inconsistent with the requested model."""


class ConstructionError(ArithmeticError):
    """The direct-to-explicit mapping failed numerically."""


@dataclass(frozen=True)
class RenDims:
    nu: int
    nx: int
    nv: int
    ny: int

    def __post_init__(self):
        for name in ("nu", "nx", "nv", "ny"):
            if int(getattr(self, name)) < 0:
                raise DimensionError(f"{name} must be >= 0")


@dataclass(frozen=True)
class IqcSpec:
    """Incremental IQC ``(Q, S, R)`` plus the contraction rate ``alpha``.

    Use the named constructors; ``qsr(nu, ny)`` materializes the matrices.
    """

    kind: str = "contracting"
    alpha: float = 1.0
    gamma: float = 1.0
    learnable_gamma: bool = False
    nu_passive: float = 0.0
    rho: float = 1.0
    Q: np.ndarray = None
    S: np.ndarray = None
    R: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown IQC kind {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise SpecError(f"contraction rate alpha must lie in (0, 1], got {self.alpha}")
        if self.kind == "lipschitz" and not self.gamma > 0:
            raise SpecError("Lipschitz bound gamma must be positive")
        if self.kind == "passive_input" and self.nu_passive < 0:
            raise SpecError("input passivity index nu must be >= 0")
        if self.kind == "passive_output" and not self.rho > 0:
            raise SpecError("output passivity index rho must be positive")

    @classmethod
    def contracting(cls, alpha=1.0):
        return cls("contracting", alpha=alpha)

    @classmethod
    def lipschitz(cls, gamma, learnable=False, alpha=1.0):
        return cls("lipschitz", alpha=alpha, gamma=float(gamma), learnable_gamma=learnable)

    @classmethod
    def passive_input(cls, nu=0.0, alpha=1.0):
        return cls("passive_input", alpha=alpha, nu_passive=float(nu))

    @classmethod
    def passive_output(cls, rho, alpha=1.0):
        return cls("passive_output", alpha=alpha, rho=float(rho))

    @classmethod
    def general(cls, Q, S, R, alpha=1.0):
        Q, S, R = (np.array(linalg.as_mat(m)) for m in (Q, S, R))
        return cls("general", alpha=alpha, Q=Q, S=S, R=R)

    def qsr(self, nu, ny, gamma=None):
        """Supply-rate matrices for a model with ``nu`` inputs and ``ny`` outputs."""
        if self.kind == "contracting":
            raise SpecError("a contracting spec carries no IQC")
        if self.kind == "lipschitz":
            g = self.gamma if gamma is None else gamma
            return -np.eye(ny) / g, np.zeros((nu, ny)), g * np.eye(nu)
        if self.kind in ("passive_input", "passive_output") and nu != ny:
            raise DimensionError(f"passivity needs nu == ny, got nu={nu}, ny={ny}")
        if self.kind == "passive_input":
            return np.zeros((ny, ny)), np.eye(nu), -2.0 * self.nu_passive * np.eye(nu)
        if self.kind == "passive_output":
            return -2.0 * self.rho * np.eye(ny), np.eye(nu), np.zeros((nu, nu))
        if self.Q.shape != (ny, ny) or self.S.shape != (nu, ny) or self.R.shape != (nu, nu):
            raise DimensionError(
                f"general IQC shapes Q{self.Q.shape} S{self.S.shape} R{self.R.shape} "
                f"do not match nu={nu}, ny={ny}"
            )
        return self.Q, self.S, self.R


@dataclass
class RenDirectParams:
    """Free parameters of one REN variant.

    ``params`` maps names to unconstrained float64 matrices; it is the only
    state an optimizer touches.
    """

    dims: RenDims
    spec: IqcSpec
    params: dict
    eps: float = 1e-6
    act: str = "relu"
    output_map: bool = True
    d22_free: bool = False

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


@dataclass
class ExplicitRen:
    """Evaluable weights. Fields hold numpy arrays, or Vars when built on a tape."""

    A: object
    B1: object
    B2: object
    C1: object
    D11: object
    D12: object
    C2: object
    D21: object
    D22: object
    bx: object
    bv: object
    by: object
    act: str = "relu"

    @property
    def dims(self):
        return RenDims(nu=self.B2.shape[1], nx=self.A.shape[0], nv=self.D11.shape[0], ny=self.C2.shape[0])

    def matrices(self):
        names = ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22", "bx", "bv", "by")
        return {n: getattr(self, n) for n in names}


@dataclass
class Certificate:
    P: np.ndarray
    Lambda: np.ndarray = field(default_factory=lambda: np.zeros(0))


# --- spec preprocessing -----------------------------------------------------

Q_SHIFT = 1e-6


def _check_spec(dims, spec):
    if spec.kind in ("passive_input", "passive_output") and dims.nu != dims.ny:
        raise DimensionError(f"passive REN needs nu == ny, got nu={dims.nu}, ny={dims.ny}")
    if spec.kind == "general":
        _general_factors(dims, spec)


def _general_factors(dims, spec):
    """Off-tape factors for a fixed (Q, S, R) with Q negative definite.

    Returns ``(LQ, LQ_inv, LR, D0)`` with ``LQ^T LQ = -Q``,
    ``LR^T LR = R - S Q^{-1} S^T`` and ``D0 = -Q^{-1} S^T``.
    """
    Q, S, R = spec.qsr(dims.nu, dims.ny)
    Q = 0.5 * (Q + Q.T)
    R = 0.5 * (R + R.T)
    if dims.ny:
        top = np.linalg.eigvalsh(Q).max()
        if top > 1e-12 * (1.0 + np.abs(Q).max()):
            raise SpecError(f"Q must be negative semidefinite (largest eigenvalue {top:.3e})")
        if top > -Q_SHIFT:
            Q = Q - Q_SHIFT * np.eye(dims.ny)
    LQ = linalg.cholesky(-Q).T if dims.ny else np.zeros((0, 0))
    LQ_inv = linalg.solve_lu(LQ, np.eye(dims.ny)) if dims.ny else np.zeros((0, 0))
    D0 = -linalg.solve_lu(Q, S.T) if dims.ny else np.zeros((0, dims.nu))
    schur = R - S @ linalg.solve_lu(Q, S.T) if dims.ny else R
    try:
        LR = linalg.cholesky(schur).T if dims.nu else np.zeros((0, 0))
    except linalg.NotPositiveDefiniteError:
        raise SpecError("general IQC needs R - S Q^{-1} S^T positive definite") from None
    return LQ, LQ_inv, LR, D0


# --- initialization ---------------------------------------------------------

def _param_shapes(dims, spec, output_map=True, d22_free=False):
    nu, nx, nv, ny = dims.nu, dims.nx, dims.nv, dims.ny
    n = 2 * nx + nv
    shapes = {
        "X": (n, n), "Y1": (nx, nx), "B2": (nx, nu), "D12": (nv, nu),
        "bx": (nx, 1), "bv": (nv, 1),
    }
    if spec.kind == "contracting":
        if output_map:
            shapes.update(C2=(ny, nx), D21=(ny, nv), by=(ny, 1))
            if d22_free:
                shapes["D22"] = (ny, nu)
        return shapes
    shapes.update(C2=(ny, nx), D21=(ny, nv), by=(ny, 1))
    m, k = min(nu, ny), abs(ny - nu)
    if spec.kind == "passive_input":
        shapes.update(Y3=(nu, nu), Z3=(nu, nu))
    else:
        shapes.update(X3=(m, m), Y3=(m, m), Z3=(k, m))
    if spec.kind == "lipschitz" and spec.learnable_gamma:
        shapes["log_gamma"] = (1, 1)
    return shapes


def init_ren(dims, spec, init="identity", seed=0, eps=1e-6, act="relu",
             output_map=True, d22_free=False, noise=0.01):
    """Draw direct parameters.

    ``init="identity"`` sets ``X = I`` and every other free matrix to
    N(0, (noise / sqrt(fan_in))^2); ``init="random"`` draws every entry from
    N(0, 1 / (2 nx + nv)).
    """
    if not isinstance(dims, RenDims):
        dims = RenDims(*dims)
    _check_spec(dims, spec)
    if not 1e-10 <= eps <= 1e-2:
        raise SpecError(f"eps must lie in [1e-10, 1e-2], got {eps}")
    ad.activation(act)
    if not output_map:
        if spec.kind != "contracting":
            raise SpecError("output_map=False is only available for contracting RENs")
        if dims.ny != dims.nx:
            raise DimensionError("output_map=False needs ny == nx")
    rng = np.random.default_rng(seed)
    n = 2 * dims.nx + dims.nv
    params = {}
    for name, shape in _param_shapes(dims, spec, output_map, d22_free).items():
        if name == "log_gamma":
            params[name] = np.full(shape, np.log(spec.gamma))
        elif init == "identity":
            if name == "X":
                params[name] = np.eye(n)
            else:
                std = noise / np.sqrt(max(shape[1], 1))
                params[name] = std * rng.standard_normal(shape)
        elif init == "random":
            params[name] = rng.standard_normal(shape) / np.sqrt(max(n, 1))
        else:
            raise ValueError(f"unknown init style {init!r}")
    return RenDirectParams(dims, spec, params, eps=eps, act=act,
                           output_map=output_map, d22_free=d22_free)


# --- construction -----------------------------------------------------------

def _eye(n):
    return np.eye(n)


def _cayley_tall(tape, X3, Y3, Z3, eps):
    """Contractive ``N`` (``(m + k) x m``) with ``N^T N < I``."""
    m = X3.shape[0]
    M = X3.T @ X3 + Y3 - Y3.T + Z3.T @ Z3 + eps * _eye(m)
    IpM = M + _eye(m)
    top = ad.solve(IpM, _eye(m) - M)
    bottom = ad.scale(ad.solve(IpM.T, Z3.T).T, -2.0)
    return ad.vcat([top, bottom])


def _feedthrough_cayley(tape, v, nu, ny, eps):
    N = _cayley_tall(tape, v["X3"], v["Y3"], v["Z3"], eps)
    return N if ny >= nu else N.T


def _qsr_blocks(tape, p, v):
    """Return ``(T_extra, D22)``: the added ``K^T Xi^{-1} K`` term and feedthrough."""
    dims, spec, eps = p.dims, p.spec, p.eps
    nu, nx, nv, ny = dims.nu, dims.nx, dims.nv, dims.ny
    C2, D21, B2, D12 = v["C2"], v["D21"], v["B2"], v["D12"]
    zeros_x = np.zeros((ny, nx))

    if spec.kind == "passive_input":
        Z3, Y3 = v["Z3"], v["Y3"]
        D22 = Z3.T @ Z3 + Y3 - Y3.T + (spec.nu_passive + eps) * _eye(nu)
        Xi = D22 + D22.T - 2.0 * spec.nu_passive * _eye(nu)
        K = ad.hcat([C2, D21 - D12.T, B2.T])
        return K.T @ ad.solve(Xi, K), D22

    N = _feedthrough_cayley(tape, v, nu, ny, eps)
    if spec.kind == "lipschitz":
        if spec.learnable_gamma:
            log_gamma = v["log_gamma"]
        else:
            log_gamma = tape.const(np.log(spec.gamma))
        inv_sqrt = ad.exp(ad.scale(log_gamma, -0.5))
        gamma = ad.exp(log_gamma)
        D22 = gamma * N
        LQ_D22 = ad.exp(ad.scale(log_gamma, 0.5)) * N
        corner = gamma * _eye(nu)
        K_top = ad.hcat([inv_sqrt * C2, inv_sqrt * D21, zeros_x])
        K_bot = ad.hcat([np.zeros((nu, nx)), -D12.T, B2.T])
    else:
        LQ, LQ_inv, LR, D0 = _general_factors(dims, spec)
        _, S, R = spec.qsr(nu, ny)
        D22 = D0 + (LQ_inv @ N) @ LR
        LQ_D22 = LQ @ D22
        SD22 = S @ D22
        corner = SD22 + SD22.T + R
        K_top = ad.hcat([LQ @ C2, LQ @ D21, zeros_x])
        K_bot = ad.hcat([S @ C2, S @ D21 - D12.T, B2.T])
    Xi = ad.vcat([ad.hcat([tape.const(_eye(ny)), LQ_D22]), ad.hcat([LQ_D22.T, corner])])
    K = ad.vcat([K_top, K_bot])
    return K.T @ ad.solve(Xi, K), D22


def build_explicit(tape, p, v):
    """Construct the explicit model on ``tape``.

    ``v`` maps parameter names to Vars (usually leaves for ``p.params``).
    Returns ``(ExplicitRen, P, Lambda)`` with every field a Var.
    """
    dims, spec, eps = p.dims, p.spec, p.eps
    nu, nx, nv, ny = dims.nu, dims.nx, dims.nv, dims.ny
    alpha2 = spec.alpha ** 2
    X = v["X"]
    H = X.T @ X + eps * _eye(X.shape[0])
    if spec.kind == "contracting":
        T = H
        if p.output_map:
            C2, D21, by = v["C2"], v["D21"], v["by"]
            D22 = v["D22"] if p.d22_free else tape.const(np.zeros((ny, nu)))
        else:
            C2, D21 = tape.const(_eye(nx)), tape.const(np.zeros((ny, nv)))
            D22, by = tape.const(np.zeros((ny, nu))), tape.const(np.zeros((ny, 1)))
    else:
        extra, D22 = _qsr_blocks(tape, p, v)
        T = H + extra
        C2, D21, by = v["C2"], v["D21"], v["by"]

    x_, w_ = slice(0, nx), slice(nx, nx + nv)
    s_ = slice(nx + nv, 2 * nx + nv)
    P = ad.scale(T[x_, x_], 1.0 / alpha2)
    T22 = T[w_, w_]
    Y1 = v["Y1"]
    E = ad.scale(T[s_, s_] + P + Y1 - Y1.T, 0.5)
    Lambda = ad.scale(ad.diag_extract(T22), 0.5)
    strict = np.tril(np.ones((nv, nv)), -1)
    D11_imp = ad.mul(T22, -strict)
    C1_imp = -T[w_, x_]
    F, B1_imp = T[s_, x_], T[s_, w_]

    try:
        rhs = ad.hcat([F, B1_imp, v["B2"], v["bx"]])
        state = ad.solve(E, rhs)
    except linalg.SingularMatrixError as exc:
        raise ConstructionError(f"E singular during construction: {exc}") from exc
    A, B1 = state[:, 0:nx], state[:, nx:nx + nv]
    B2, bx = state[:, nx + nv:nx + nv + nu], state[:, nx + nv + nu:]
    inv_lam = ad.reciprocal(Lambda)
    model = ExplicitRen(
        A=A, B1=B1, B2=B2,
        C1=inv_lam * C1_imp, D11=inv_lam * D11_imp, D12=inv_lam * v["D12"],
        C2=C2, D21=D21, D22=D22,
        bx=bx, bv=inv_lam * v["bv"], by=by, act=p.act,
    )
    return model, P, Lambda


def leaves_for(tape, p):
    return {k: tape.leaf(val) for k, val in p.params.items()}


def _values(model):
    out = {k: np.array(val.value) for k, val in model.matrices().items()}
    out["D11"] = np.tril(out["D11"], -1)
    return ExplicitRen(**out, act=model.act)


def to_explicit(p):
    """Explicit weights and certificate for direct parameters ``p``."""
    tape = Tape()
    model, P, Lambda = build_explicit(tape, p, leaves_for(tape, p))
    explicit = _values(model)
    for name, val in explicit.matrices().items():
        if not np.all(np.isfinite(val)):
            raise ConstructionError(f"non-finite entries in {name}")
    return explicit, Certificate(P=0.5 * (P.value + P.value.T), Lambda=Lambda.value.ravel().copy())


# --- evaluation -------------------------------------------------------------

def _check_step_shapes(m, x, u):
    nx, nu = m.A.shape[0], m.B2.shape[1]
    if x.shape[0] != nx or u.shape[0] != nu or x.shape[1] != u.shape[1]:
        raise DimensionError(f"ren_step: x {x.shape} / u {u.shape} vs nx={nx}, nu={nu}")


def ren_step(m, x, u):
    """One step ``(x_next, y)`` for batched columns ``x`` (nx x B), ``u`` (nu x B).

    Works on numpy models and, when any of ``m``, ``x``, ``u`` holds Vars,
    records the step on the shared tape.
    """
    if isinstance(m.A, Var) or isinstance(x, Var) or isinstance(u, Var):
        return _ren_step_tape(m, x, u)
    x, u = linalg.as_mat(x), linalg.as_mat(u)
    _check_step_shapes(m, x, u)
    base = m.C1 @ x + m.D12 @ u + m.bv
    w, _ = ad.forward_substitution(base, np.tril(m.D11, -1), m.act)
    x_next = m.A @ x + m.B1 @ w + m.B2 @ u + m.bx
    y = m.C2 @ x + m.D21 @ w + m.D22 @ u + m.by
    return x_next, y


def _ren_step_tape(m, x, u):
    tape = ad._tape_of(m.A, x, u)
    x = ad._lift(tape, x)
    u = ad._lift(tape, u)
    _check_step_shapes(m, x, u)
    base = m.C1 @ x + m.D12 @ u + m.bv
    w = ad.acyclic_neurons(base, m.D11, m.act)
    x_next = m.A @ x + m.B1 @ w + m.B2 @ u + m.bx
    y = m.C2 @ x + m.D21 @ w + m.D22 @ u + m.by
    return x_next, y


def ren_simulate(m, x0, us):
    """Iterate ``ren_step``. Returns ``(xs, ys)`` with ``len(xs) == len(us) + 1``."""
    xs, ys = [x0], []
    x = x0
    for u in us:
        x, y = ren_step(m, x, u)
        xs.append(x)
        ys.append(y)
    return xs, ys
