"""Two runs of one contracting REN forgetting their initial conditions."""

import numpy as np

from ..certify import contraction_probe
from ..ren import IqcSpec, RenDims, init_ren, ren_simulate, to_explicit
from .config import STREAM_AUX, STREAM_INIT, ContractionConfig, sub_rng, sub_seed


def exp_contraction_demo(cfg=None, seed=0, x0a=None, x0b=None):
    """Simulate a random contracting REN from two initial states under ``u_t = sin(omega t)``.

    Returns a dict with the model, certificate, inputs, outputs of both runs
    and the P-norm gap (length ``T + 1``).
    """
    cfg = cfg or ContractionConfig()
    spec = IqcSpec.contracting(cfg.alpha)
    p = init_ren(RenDims(1, 1, cfg.nv, 1), spec, init="random", seed=sub_seed(seed, STREAM_INIT))
    model, cert = to_explicit(p)
    rng = sub_rng(seed, STREAM_AUX)
    if x0a is None:
        x0a = cfg.x0_scale * rng.standard_normal((1, 1))
    if x0b is None:
        x0b = cfg.x0_scale * rng.standard_normal((1, 1))
    us = [np.array([[np.sin(cfg.omega * t)]]) for t in range(cfg.T)]
    xa, ya = ren_simulate(model, np.atleast_2d(x0a), us)
    xb, yb = ren_simulate(model, np.atleast_2d(x0b), us)
    gap = contraction_probe(model, cert, np.atleast_2d(x0a), np.atleast_2d(x0b), us)
    return {
        "model": model,
        "cert": cert,
        "spec": spec,
        "us": us,
        "y_a": np.array([y[0, 0] for y in ya]),
        "y_b": np.array([y[0, 0] for y in yb]),
        "gap": gap,
        "x_a": np.array([x[0, 0] for x in xa]),
        "x_b": np.array([x[0, 0] for x in xb]),
    }


def rounding_floor(result):
    """Gap resolution of float64 states: a few ulps of the largest state, in the P metric."""
    scale = 1.0 + max(np.abs(result["x_a"]).max(), np.abs(result["x_b"]).max())
    return 8.0 * np.finfo(float).eps * scale * np.sqrt(np.linalg.norm(result["cert"].P, 2))


def check_contraction(result, rtol=1e-6):
    """``(monotone, bound_ok)`` for the gap sequence of ``exp_contraction_demo``.

    Monotonicity is judged up to ``rounding_floor``: once the two runs agree
    to the last few bits their gap is rounding noise.
    """
    gap = result["gap"]
    alpha = result["spec"].alpha
    monotone = bool(np.all(np.diff(gap) <= rounding_floor(result)))
    steps = len(gap) - 1
    bound_ok = bool(gap[-1] <= alpha ** steps * gap[0] * (1.0 + rtol))
    return monotone, bound_ok


def contraction_rows(result):
    """CSV rows ``t,y_a,y_b,gap``; the gap is taken at the state before step ``t``."""
    for t, (a, b) in enumerate(zip(result["y_a"], result["y_b"])):
        yield (t, a, b, result["gap"][t])
