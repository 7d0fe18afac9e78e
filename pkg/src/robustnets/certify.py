"""Independent checks of the robustness claims.

``verify_ren`` assembles the one-step dissipation matrix of an explicit REN
with its certificate and tests it for negative semidefiniteness via
Cholesky bisection. The probes (``iqc_accumulate``, ``contraction_probe``,
``passivity_probe``, ``empirical_lipschitz``) check the same claims by
simulation, without looking at how the model was built.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tape
from .lbdn import ExplicitLbdn, lbdn_to_explicit, orthogonality_residual
from .ren import IqcSpec, ren_simulate, ren_step

PASS_SLACK = 1e-8
ORTHO_TOL = 1e-10
SCALE_RTOL = 1e-12


@dataclass
class LmiReport:
    margin: float
    matrix_norm: float
    passed: bool
    slack_used: float

    def as_text(self):
        lines = [f"{k}={v!r}" for k, v in vars(self).items()]
        return "\n".join(lines)


def _report(margin, norm):
    slack = PASS_SLACK * (1.0 + norm)
    return LmiReport(float(margin), float(norm), bool(margin <= slack), float(slack))


def build_iqc_matrix(m, c, spec, contraction_only=False):
    """Dissipation matrix ``M`` over ``eta = (dx, dw[, du])``; certified iff ``M <= 0``."""
    nx, nv, nu, ny = m.A.shape[0], m.D11.shape[0], m.B2.shape[1], m.C2.shape[0]
    P = linalg.as_mat(c.P)
    lam = np.asarray(c.Lambda, dtype=np.float64).reshape(-1)
    if P.shape != (nx, nx) or lam.shape != (nv,):
        raise linalg.DimensionError(f"certificate P{P.shape}, Lambda{lam.shape} vs nx={nx}, nv={nv}")
    contraction_only = contraction_only or spec.kind == "contracting"
    n_u = 0 if contraction_only else nu
    n = nx + nv + n_u
    Abar = np.hstack([m.A, m.B1, m.B2[:, :n_u]])
    Cv = np.hstack([m.C1, m.D11, m.D12[:, :n_u]])
    Ex = np.eye(nx, n)
    Ew = np.eye(nv, n, nx)
    LCv = lam[:, None] * Cv
    M = Abar.T @ P @ Abar - spec.alpha ** 2 * (Ex.T @ P @ Ex)
    M = M + Ew.T @ LCv + LCv.T @ Ew - 2.0 * Ew.T @ (lam[:, None] * Ew)
    if not contraction_only:
        Q, S, R = spec.qsr(nu, ny)
        Cy = np.hstack([m.C2, m.D21, m.D22])
        Eu = np.eye(nu, n, nx + nv)
        SCy = Eu.T @ S @ Cy
        M = M - Cy.T @ Q @ Cy - SCy - SCy.T - Eu.T @ R @ Eu
    return 0.5 * (M + M.T)


def verify_ren(m, c, spec, contraction_only=False):
    """LMI check; ``margin`` is the largest eigenvalue of the dissipation matrix."""
    M = build_iqc_matrix(m, c, spec, contraction_only)
    norm = float(np.linalg.norm(M))
    if M.size == 0:
        return _report(-np.inf, 0.0)
    margin = -linalg.pd_margin(-M, tol=1e-12 * (1.0 + norm))
    return _report(margin, norm)


def _supply(spec, nu, ny):
    Q, S, R = spec.qsr(nu, ny)
    return np.block([[Q, S.T], [S, R]])


def iqc_accumulate(m, c, spec, x0a, x0b, us, vs):
    """Summed supply over two runs and the storage bound ``-(dx0' P dx0)``.

    ``x0a``/``x0b`` may carry several columns (independent pairs); the result
    is then an array per column.
    """
    if len(us) != len(vs):
        raise ad.ContractError(f"input sequences differ in length: {len(us)} vs {len(vs)}")
    nu, ny = m.B2.shape[1], m.C2.shape[0]
    W = _supply(spec, nu, ny)
    _, ya = ren_simulate(m, x0a, us)
    _, yb = ren_simulate(m, x0b, vs)
    lhs = np.zeros(np.shape(x0a)[1])
    for y1, y2, u, v in zip(ya, yb, us, vs):
        z = np.vstack([y1 - y2, u - v])
        lhs += np.einsum("ib,ij,jb->b", z, W, z)
    dx = x0a - x0b
    bound = -np.einsum("ib,ij,jb->b", dx, c.P, dx)
    if lhs.size == 1:
        return float(lhs[0]), float(bound[0])
    return lhs, bound


def contraction_probe(m, c, x0a, x0b, us):
    """P-norm gap ``sqrt(dx' P dx)`` along two runs with shared inputs (length ``len(us)+1``)."""
    xa, _ = ren_simulate(m, x0a, us)
    xb, _ = ren_simulate(m, x0b, us)
    gaps = []
    for a, b in zip(xa, xb):
        d = a - b
        gaps.append(np.sqrt(np.maximum(np.einsum("ib,ij,jb->b", d, c.P, d), 0.0)))
    gaps = np.array(gaps)
    return gaps[:, 0] if gaps.shape[1] == 1 else gaps


def passivity_probe(m, c, spec, pairs=100, horizon=50, seed=0, scale=1.0):
    """Minimum passivity slack over random input pairs with a shared initial state."""
    if spec.kind not in ("passive_input", "passive_output"):
        raise ad.ContractError(f"passivity_probe needs a passive spec, got {spec.kind!r}")
    nx, nu, ny = m.A.shape[0], m.B2.shape[1], m.C2.shape[0]
    if nu != ny:
        raise ad.ContractError("passivity needs nu == ny")
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((nx, pairs))
    us = [scale * rng.standard_normal((nu, pairs)) for _ in range(horizon)]
    vs = [scale * rng.standard_normal((nu, pairs)) for _ in range(horizon)]
    _, ya = ren_simulate(m, x0, us)
    _, yb = ren_simulate(m, x0, vs)
    slack = np.zeros(pairs)
    for y1, y2, u, v in zip(ya, yb, us, vs):
        dy, du = y1 - y2, u - v
        slack += (dy * du).sum(axis=0)
        if spec.kind == "passive_input":
            slack -= spec.nu_passive * (du * du).sum(axis=0)
        else:
            slack -= spec.rho * (dy * dy).sum(axis=0)
    return float(slack.min())


def _jacobian(f, x):
    """Dense Jacobian of ``f`` at column ``x`` via one reverse sweep per output."""
    tape = Tape()
    xv = tape.leaf(x)
    y = f(xv)
    rows = []
    for i in range(y.shape[0]):
        pick = np.zeros((y.shape[0], 1))
        pick[i, 0] = 1.0
        root = ad.sum_all(ad.mul(y, pick))
        tape.backward(root)
        rows.append(xv.grad.ravel().copy())
    return np.array(rows)


def empirical_lipschitz(f, nu, trials=2000, refine=50, seed=0, scale=1.0):
    """Lower bound on the Lipschitz constant of ``f``.

    ``f`` maps an ``nu x batch`` matrix (numpy or Var) column-wise to outputs.
    Random pairs give a first estimate; power iteration on ``J^T J`` at the
    best pair (Jacobian rows from reverse sweeps) refines it.
    """
    rng = np.random.default_rng(seed)
    u = scale * rng.standard_normal((nu, trials))
    radius = scale * np.exp(rng.uniform(np.log(1e-3), 0.0, size=trials))
    d = rng.standard_normal((nu, trials))
    d /= np.linalg.norm(d, axis=0, keepdims=True)
    v = u + radius * d
    du = np.linalg.norm(u - v, axis=0)
    keep = du > 0
    fu, fv = np.asarray(f(u)), np.asarray(f(v))
    ratios = np.linalg.norm(fu - fv, axis=0)[keep] / du[keep]
    if ratios.size == 0:
        return 0.0
    best_i = int(np.argmax(ratios))
    best = float(ratios[best_i])
    if refine <= 0:
        return best
    J = _jacobian(f, u[:, np.flatnonzero(keep)[best_i]][:, None])
    vec = d[:, np.flatnonzero(keep)[best_i]].copy()
    sigma = 0.0
    for _ in range(refine):
        w = J.T @ (J @ vec)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        vec = w / nw
        sigma = float(np.linalg.norm(J @ vec))
    return max(best, sigma)


def unrolled_ren_map(m, x0, horizon):
    """Flattened input sequence -> flattened output sequence for fixed ``x0``.

    Columns of the argument are independent sequences of length ``horizon``
    stacked time-major (``nu * horizon`` rows).
    """
    nu = m.B2.shape[1]

    def f(U):
        batch = U.shape[1]
        x = np.repeat(linalg.as_mat(x0), batch, axis=1)
        ys = []
        for t in range(horizon):
            x, y = ren_step(m, x, U[t * nu:(t + 1) * nu, :])
            ys.append(y)
        return ad.vcat(ys) if isinstance(ys[0], ad.Var) else np.vstack(ys)

    return f


def certify_lbdn(p):
    """Constructive LBDN check: orthogonal layers and scalings multiplying to gamma.

    Accepts direct parameters or an already explicit network (the latter lets
    tampered weights be checked).
    """
    if isinstance(p, ExplicitLbdn):
        m, gamma = p, None
    else:
        m, gamma = lbdn_to_explicit(p), float(np.exp(p.log_gamma()))
    worst = max(orthogonality_residual(layer) for layer in m.layers)
    product = float(m.input_scale) * float(m.output_scale)
    scale_err = 0.0 if gamma is None else abs(product - gamma) / gamma
    passed = worst <= ORTHO_TOL and scale_err <= SCALE_RTOL
    return LmiReport(margin=max(worst, scale_err), matrix_norm=product,
                     passed=bool(passed), slack_used=ORTHO_TOL)


def lbdn_gamma(m):
    """Certified Lipschitz bound of an explicit LBDN."""
    return float(m.input_scale) * float(m.output_scale)


def model_spec(p):
    """The spec to verify a REN against (learned gamma substituted)."""
    spec = p.spec
    if spec.kind == "lipschitz" and spec.learnable_gamma:
        return IqcSpec.lipschitz(float(np.exp(p.params["log_gamma"][0, 0])), alpha=spec.alpha)
    return spec
