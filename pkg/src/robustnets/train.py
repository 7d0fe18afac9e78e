"""Losses, Adam, and the training loop with its two construction modes.

Training always differentiates through the direct-to-explicit mapping. The
mode decides how often that mapping runs inside one loss evaluation:

* ``CACHED`` builds the explicit model on first use and reuses it for every
  later call in the same loss evaluation;
* ``REBUILD`` builds it again at every call.

The two give the same numbers; only the amount of work differs.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var
from .linalg import DimensionError, as_mat

log = logging.getLogger(__name__)

CACHED = "cached"
REBUILD = "rebuild"


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """In-place Adam update of the arrays in ``params``."""
    if set(params) != set(grads):
        raise ContractError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.delta)


def adjust_lr(state, new_lr):
    if not new_lr > 0:
        raise ValueError(f"learning rate must be positive, got {new_lr}")
    state.lr = float(new_lr)


def plateau_schedule(state, history, min_lr, factor=0.1):
    """Shrink the rate when the latest epoch loss did not improve on the previous one.

    The rate never drops below ``min_lr`` (``1e-3 * 0.1`` rounds just above
    ``1e-4``, so a plain ``lr > min_lr`` test would shrink it once more).
    """
    floor = min_lr * (1.0 + 1e-9)
    if len(history) >= 2 and history[-1] >= history[-2] and state.lr > floor:
        adjust_lr(state, max(state.lr * factor, min_lr))
        return True
    return False


# --- losses -----------------------------------------------------------------

def _scalar_result(fn, pred, *rest):
    if isinstance(pred, Var):
        return fn(pred, *rest)
    tape = Tape()
    return float(fn(tape.const(pred), *rest).value[0, 0])


def loss_mse(pred, target):
    """Mean over all entries of the squared error."""
    def f(p, t):
        t = t.value if isinstance(t, Var) else as_mat(t)
        if p.shape != t.shape:
            raise DimensionError(f"mse shape mismatch: {p.shape} vs {t.shape}")
        return ad.mean(ad.square(p - t))
    return _scalar_result(f, pred, target)


def loss_crossentropy(pred, onehot, from_logits=True):
    """Mean over columns of ``-sum(onehot * log p)``; ``log`` clamped at 1e-12."""
    def f(p, y):
        y = y.value if isinstance(y, Var) else as_mat(y)
        if p.shape != y.shape:
            raise DimensionError(f"cross-entropy shape mismatch: {p.shape} vs {y.shape}")
        if from_logits:
            return ad.softmax_cross_entropy(p, y)
        return ad.scale(ad.sum_all(ad.mul(ad.log(p, floor=1e-12), y)), -1.0 / y.shape[1])
    return _scalar_result(f, pred, onehot)


def one_hot(labels, classes):
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes})")
    out = np.zeros((classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def accuracy(forward, x, y_onehot):
    """Fraction of columns whose argmax (lowest index on ties) matches the label."""
    scores = np.asarray(forward(x))
    if scores.shape[1] == 0:
        return 0.0
    return float(np.mean(np.argmax(scores, axis=0) == np.argmax(y_onehot, axis=0)))


# --- training loop ----------------------------------------------------------

class ModelHandle:
    """Hands out the explicit model inside one loss evaluation.

    ``build(tape, leaves)`` maps parameter Vars to an explicit model.
    """

    def __init__(self, build, tape, leaves, mode=CACHED):
        if mode not in (CACHED, REBUILD):
            raise ValueError(f"unknown training mode {mode!r}")
        self.build = build
        self.tape = tape
        self.leaves = leaves
        self.mode = mode
        self.conversions = 0
        self._cached = None

    def __call__(self):
        if self.mode == CACHED and self._cached is not None:
            return self._cached
        self.conversions += 1
        model = self.build(self.tape, self.leaves)
        if self.mode == CACHED:
            self._cached = model
        return model


def loss_and_grad(params, build, loss_fn, batch, mode=CACHED):
    """One recorded loss evaluation. Returns ``(loss, grads, conversions)``."""
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    handle = ModelHandle(build, tape, leaves, mode)
    root = loss_fn(handle, batch)
    if not np.all(np.isfinite(root.value)):
        raise TrainingDiverged(f"non-finite loss {root.value[0, 0]}")
    tape.backward(root)
    grads = {k: leaves[k].grad for k in params}
    return float(root.value[0, 0]), grads, handle.conversions


def train_loop(params, build, loss_fn, data, epochs, opt, mode=CACHED, on_epoch_end=None):
    """Adam over ``data`` for ``epochs``; returns the per-epoch mean loss.

    ``data`` is a list of batches or a callable ``epoch -> batches``.
    ``loss_fn(handle, batch)`` must return a scalar Var; ``handle()`` yields
    the explicit model according to ``mode``. ``on_epoch_end(epoch,
    history, opt)`` runs after each epoch (learning-rate schedules).
    """
    history = []
    for epoch in range(epochs):
        batches = data(epoch) if callable(data) else data
        total, count = 0.0, 0
        for b, batch in enumerate(batches):
            try:
                loss, grads, _ = loss_and_grad(params, build, loss_fn, batch, mode)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch {b}") from None
            adam_step(opt, params, grads)
            total += loss
            count += 1
        history.append(total / max(count, 1))
        log.debug("epoch %d mean loss %.6g lr %.3g", epoch, history[-1], opt.lr)
        if on_epoch_end is not None:
            on_epoch_end(epoch, history, opt)
    return history
