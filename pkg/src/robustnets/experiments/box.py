"""Box-in-fluid dynamics, policy rollouts, RL training and the mode benchmark."""

import logging
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .. import autodiff as ad
from ..autodiff import Var
from ..lbdn import build_explicit as build_lbdn, init_lbdn, lbdn_forward, lbdn_to_explicit
from ..linalg import DimensionError
from ..train import CACHED, REBUILD, AdamState, loss_and_grad, train_loop
from .config import STREAM_INIT, STREAM_TEST_DATA, STREAM_TRAIN_DATA, BenchConfig, BoxParams, RlConfig, sub_rng, sub_seed

log = logging.getLogger(__name__)


def _vstack(parts):
    if any(isinstance(p, Var) for p in parts):
        return ad.vcat(parts)
    return np.vstack(parts)


def _abs(a):
    if isinstance(a, Var):
        return ad.mul(a, np.sign(a.value))
    return np.abs(a)


def _check_box(x, u):
    if x.shape[0] != 2 or u.shape[0] != 1 or x.shape[1] != u.shape[1]:
        raise DimensionError(f"box dynamics need x 2xB and u 1xB, got {x.shape} and {u.shape}")


def box_f(x, u, p):
    """Continuous-time derivative ``[qdot; (u - k q - mu * drag) / m]``.

    ``drag`` is ``qdot * |qdot|`` (opposes motion) when ``p.signed_drag``,
    else ``qdot^2``, which pushes backwards-moving boxes faster and blows
    up in finite time.
    """
    _check_box(x, u)
    q, qd = x[0:1, :], x[1:2, :]
    drag = qd * _abs(qd) if p.signed_drag else qd * qd
    qdd = (u - p.k * q - p.mu * drag) * (1.0 / p.m)
    return _vstack([qd, qdd])


def box_fd(x, u, p):
    """Forward Euler step."""
    return x + p.dt * box_f(x, u, p)


def rollout(policy, x0, qref, p):
    """``[x_t; u_t]`` snapshots for ``t < Tmax/dt`` with ``u_t = policy([x_t; qref])``."""
    if x0.shape[0] != 2 or qref.shape != (1, x0.shape[1]):
        raise DimensionError(f"rollout: x0 {x0.shape}, qref {qref.shape}")
    z = []
    x = x0
    for _ in range(p.steps):
        u = policy(_vstack([x, qref]))
        z.append(_vstack([x, u]))
        x = box_fd(x, u, p)
    return z


def rl_cost(z, qref, uref, weights):
    """Time-average of the batch-mean weighted squared deviation from ``(qref, 0, uref)``."""
    if not z:
        raise ValueError("empty trajectory")
    target = np.vstack([qref, np.zeros_like(qref), uref])
    w = np.asarray(weights, dtype=np.float64).reshape(3, 1)
    if any(isinstance(zt, Var) for zt in z):
        total = None
        for zt in z:
            if zt.shape != target.shape:
                raise DimensionError(f"rl_cost: snapshot {zt.shape} vs target {target.shape}")
            d = zt - target
            term = ad.sum_all(ad.mul(ad.mul(d, d), w))
            total = term if total is None else total + term
        return ad.scale(total, 1.0 / (len(z) * target.shape[1]))
    per_step = [float(np.mean(np.sum(w * (zt - target) ** 2, axis=0))) for zt in z]
    return float(np.mean(per_step))


def _rl_loss(p_box, weights):
    def loss_fn(handle, batch):
        x0, qref, uref = batch
        z = rollout(lambda inp: lbdn_forward(handle(), inp), x0, qref, p_box)
        return rl_cost(z, qref, uref, weights)
    return loss_fn


def _lbdn_builder(p):
    return lambda tape, leaves: build_lbdn(tape, p, leaves)


def _goals(rng, n):
    return 2.0 * rng.random((1, n)) - 1.0


def exp_rl_train(cfg=None, seed=0, mode=CACHED):
    """Train the Lipschitz policy on random goals and test it on fresh ones.

    Returns a dict with ``params``, ``history`` (per-epoch cost), the test
    trajectory ``z_test``, goals and terminal errors.
    """
    cfg = cfg or RlConfig()
    p_box = BoxParams(dt=cfg.dt, Tmax=cfg.Tmax, signed_drag=cfg.signed_drag)
    params = init_lbdn(3, cfg.hidden, 1, gamma=cfg.gamma, seed=sub_seed(seed, STREAM_INIT))
    qref = _goals(sub_rng(seed, STREAM_TRAIN_DATA), cfg.batches)
    batch = (np.zeros((2, cfg.batches)), qref, p_box.k * qref)
    opt = AdamState(lr=cfg.lr)
    history = train_loop(params.params, _lbdn_builder(params), _rl_loss(p_box, cfg.weights),
                         [batch], cfg.epochs, opt, mode=mode)
    model = lbdn_to_explicit(params)
    qr_test = _goals(sub_rng(seed, STREAM_TEST_DATA), cfg.test_batches)
    z_test = rollout(lambda inp: lbdn_forward(model, inp), np.zeros((2, cfg.test_batches)), qr_test, p_box)
    x_final = box_fd(z_test[-1][0:2], z_test[-1][2:3], p_box)
    return {
        "params": params,
        "model": model,
        "history": history,
        "z_test": z_test,
        "qref_test": qr_test,
        "terminal_q_error": float(np.mean(np.abs(x_final[0] - qr_test[0]))),
        "terminal_u_error": float(np.mean(np.abs(z_test[-1][2] - p_box.k * qr_test[0]))),
        "box": p_box,
    }


def rl_rows(z, qref, dt):
    """CSV rows ``t,batch,q,qdot,u,qref`` for a trajectory."""
    for t, zt in enumerate(z):
        for b in range(zt.shape[1]):
            yield (t * dt, b, zt[0, b], zt[1, b], zt[2, b], qref[0, b])


def count_conversions(n, mode, seed=0, cfg=None):
    """theta -> theta-bar conversions in one RL loss evaluation."""
    cfg = cfg or BenchConfig()
    p_box = BoxParams(dt=cfg.dt, Tmax=cfg.Tmax)
    params = init_lbdn(3, (n,), 1, gamma=cfg.gamma, seed=sub_seed(seed, STREAM_INIT))
    qref = _goals(sub_rng(seed, STREAM_TRAIN_DATA), cfg.batches)
    batch = (np.zeros((2, cfg.batches)), qref, p_box.k * qref)
    _, _, conversions = loss_and_grad(params.params, _lbdn_builder(params),
                                      _rl_loss(p_box, (10.0, 1.0, 0.1)), batch, mode)
    return conversions


def time_training(n, mode, epochs, seed=0, cfg=None):
    """Wall-clock seconds and loss history for ``epochs`` RL updates of a one-layer policy."""
    cfg = cfg or BenchConfig()
    p_box = BoxParams(dt=cfg.dt, Tmax=cfg.Tmax)
    params = init_lbdn(3, (n,), 1, gamma=cfg.gamma, seed=sub_seed(seed, STREAM_INIT))
    qref = _goals(sub_rng(seed, STREAM_TRAIN_DATA), cfg.batches)
    batch = (np.zeros((2, cfg.batches)), qref, p_box.k * qref)
    opt = AdamState(lr=cfg.lr)
    start = time.perf_counter()
    history = train_loop(params.params, _lbdn_builder(params), _rl_loss(p_box, (10.0, 1.0, 0.1)),
                         [batch], epochs, opt, mode=mode)
    return time.perf_counter() - start, history


def bench_modes(cfg=None, seed=0):
    """Rows ``(n, t_cached, t_rebuild)`` over the configured hidden sizes.

    BLAS is limited to one thread while timing.
    """
    cfg = cfg or BenchConfig()
    rows = []
    with threadpool_limits(limits=1):
        if cfg.warmup_epochs > 0:
            time_training(cfg.sizes[0], CACHED, cfg.warmup_epochs, seed, cfg)
            time_training(cfg.sizes[0], REBUILD, cfg.warmup_epochs, seed, cfg)
        for n in cfg.sizes:
            t_cached, _ = time_training(n, CACHED, cfg.epochs, seed, cfg)
            t_rebuild, _ = time_training(n, REBUILD, cfg.epochs, seed, cfg)
            log.info("n=%d cached %.3fs rebuild %.3fs", n, t_cached, t_rebuild)
            rows.append((n, t_cached, t_rebuild))
    return rows
