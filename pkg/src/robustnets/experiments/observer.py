"""Learning a contracting state observer for the box from position measurements."""

import logging

import numpy as np

from .. import autodiff as ad
from ..autodiff import Var
from ..certify import contraction_probe
from ..linalg import DimensionError
from ..ren import IqcSpec, RenDims, build_explicit as build_ren, init_ren, ren_step, to_explicit
from ..train import REBUILD, AdamState, plateau_schedule, train_loop
from .box import box_fd
from .config import (STREAM_INIT, STREAM_SHUFFLE, STREAM_TEST_DATA, STREAM_TRAIN_DATA, BoxParams,
                     ObserverConfig, sub_rng, sub_seed)

log = logging.getLogger(__name__)

NX = 2


def obs_measure(x):
    """Position measurement ``y = q`` (first row)."""
    if x.shape[0] != NX:
        raise DimensionError(f"expected a {NX} x batch state, got {x.shape}")
    return x[0:1, :]


def obs_loss(model, xn, xt, inputs):
    """Mean over columns of the squared one-step prediction error."""
    xpred, _ = ren_step(model, xt, inputs)
    if xpred.shape != np.shape(xn):
        raise DimensionError(f"prediction {xpred.shape} vs target {np.shape(xn)}")
    if isinstance(xpred, Var):
        d = xpred - xn
        return ad.scale(ad.sum_all(ad.mul(d, d)), 1.0 / xn.shape[1])
    return float(np.mean(np.sum((xn - xpred) ** 2, axis=0)))


def simulate_box(x0, steps, p):
    """States ``x_0 .. x_{steps-1}`` of the unforced box."""
    xs = [x0]
    u = np.zeros((1, x0.shape[1]))
    for _ in range(steps - 1):
        xs.append(box_fd(xs[-1], u, p))
    return xs


def observer_inputs(xs):
    """``[u_t; y_t]`` with ``u = 0`` for each state snapshot."""
    return [np.vstack([np.zeros((1, x.shape[1])), obs_measure(x)]) for x in xs]


def training_batches(cfg, seed, p):
    """Shuffled ``(x_next, x_t, [u_t; y_t])`` pairs, one batch per time step."""
    rng = sub_rng(seed, STREAM_TRAIN_DATA)
    x0 = cfg.x0_range * (2.0 * rng.random((NX, cfg.nbatch)) - 1.0)
    xs = simulate_box(x0, p.steps, p)
    inputs = observer_inputs(xs[:-1])
    data = list(zip(xs[1:], xs[:-1], inputs))
    order = sub_rng(seed, STREAM_SHUFFLE).permutation(len(data))
    return [data[i] for i in order]


def init_observer(cfg, seed=0):
    spec = IqcSpec.contracting()
    return init_ren(RenDims(nu=2, nx=NX, nv=cfg.nv, ny=NX), spec, seed=sub_seed(seed, STREAM_INIT),
                    output_map=False)


def observer_rollout(model, x0hat, inputs):
    """Closed-loop estimates ``xhat_t`` (state before each update), length ``len(inputs)``."""
    xhat = [x0hat]
    for u in inputs[:-1]:
        x_next, _ = ren_step(model, xhat[-1], u)
        xhat.append(x_next)
    return xhat


def exp_observer(cfg=None, seed=0):
    """Train the observer by one-step prediction, then run it closed loop on fresh data."""
    cfg = cfg or ObserverConfig()
    p_box = BoxParams(dt=cfg.dt, Tmax=cfg.Tmax, signed_drag=cfg.signed_drag)
    params = init_observer(cfg, seed)
    data = training_batches(cfg, seed, p_box)
    opt = AdamState(lr=cfg.lr)

    def loss_fn(handle, batch):
        xn, xt, inputs = batch
        return obs_loss(handle(), xn, xt, inputs)

    def schedule(epoch, history, opt):
        log.info("epoch %d loss %.3e lr %.1e", epoch, history[-1], opt.lr)
        plateau_schedule(opt, history, cfg.min_lr)

    history = train_loop(params.params, lambda tape, v: build_ren(tape, params, v)[0], loss_fn,
                         data, cfg.epochs, opt, mode=REBUILD, on_epoch_end=schedule)
    model, cert = to_explicit(params)

    rng = sub_rng(seed, STREAM_TEST_DATA)
    x0 = cfg.test_x0_range * (2.0 * rng.random((NX, cfg.test_batches)) - 1.0)
    x_test = simulate_box(x0, p_box.steps, p_box)
    inputs = observer_inputs(x_test)
    xhat = observer_rollout(model, np.zeros((NX, cfg.test_batches)), inputs)
    err = [np.linalg.norm(x - xh, axis=0) for x, xh in zip(x_test, xhat)]
    return {
        "params": params,
        "model": model,
        "cert": cert,
        "history": history,
        "x_test": x_test,
        "xhat": xhat,
        "inputs": inputs,
        "err": err,
        "final_error": float(np.mean(err[-1])),
    }


def copies_gap(model, cert, inputs, x0a, x0b):
    """P-norm gap between two observer copies fed the same measurements."""
    return contraction_probe(model, cert, x0a, x0b, inputs[:-1])


def observer_rows(result, dt):
    """CSV rows ``t,batch,q,qdot,qhat,qdothat,err_norm``."""
    for t, (x, xh, e) in enumerate(zip(result["x_test"], result["xhat"], result["err"])):
        for b in range(x.shape[1]):
            yield (t * dt, b, x[0, b], x[1, b], xh[0, b], xh[1, b], e[b])
