"""Digit classification with a Lipschitz-bounded network and a dense baseline."""

import logging

import numpy as np

from .. import autodiff as ad
from ..autodiff import Var
from ..data import add_uniform_noise, load_mnist, mnist_available, shuffle_batches, split, synth_blobs
from ..lbdn import build_explicit as build_lbdn, init_lbdn, lbdn_forward, lbdn_to_explicit
from ..train import CACHED, AdamState, accuracy, adjust_lr, loss_crossentropy, one_hot, train_loop
from .config import (STREAM_BASELINE_INIT, STREAM_INIT, STREAM_NOISE, STREAM_SHUFFLE, STREAM_TRAIN_DATA,
                     MnistConfig, sub_seed)

log = logging.getLogger(__name__)

N_CLASSES = 10
N_PIXELS = 784


class MissingDataError(FileNotFoundError):
    """No dataset on disk and the synthetic fallback was not requested."""


def init_dense(sizes, seed=0):
    """Glorot-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for k in range(len(sizes) - 1):
        p, q = sizes[k], sizes[k + 1]
        params[f"W{k}"] = np.sqrt(2.0 / (p + q)) * rng.standard_normal((q, p))
        params[f"b{k}"] = np.zeros((q, 1))
    return params


def dense_forward(params, x, act="relu"):
    """MLP on numpy arrays or Vars; the last layer is affine."""
    n_layers = len(params) // 2
    z = x
    for k in range(n_layers):
        z = params[f"W{k}"] @ z + params[f"b{k}"]
        if k < n_layers - 1:
            z = ad.activation(act)(z) if isinstance(z, Var) else np.maximum(z, 0.0)
    return z


def load_data(cfg, data_dir=None, synth=False, seed=0):
    """``(train, test)``: real digits when present, else separable blobs if ``synth``."""
    if synth:
        per_class = cfg.synth_per_class + cfg.synth_test_per_class
        blobs = synth_blobs(N_CLASSES, N_PIXELS, per_class, cfg.synth_separation,
                            seed=sub_seed(seed, STREAM_TRAIN_DATA))
        return split(blobs, cfg.synth_per_class / per_class, seed=sub_seed(seed, STREAM_TRAIN_DATA, 1))
    if not mnist_available(data_dir):
        raise MissingDataError(f"digit files not found in {data_dir!r}; use the synthetic fallback")
    return load_mnist(data_dir)


def _classifier_loss(forward):
    def loss_fn(handle, batch):
        x, y = batch
        return loss_crossentropy(forward(handle(), x), y)
    return loss_fn


def _fit(params, build, forward, train, cfg, seed):
    total = cfg.epochs + cfg.fine_epochs
    opt = AdamState(lr=cfg.lr)

    def batches(epoch):
        return shuffle_batches(train, cfg.batch, seed=sub_seed(seed, STREAM_SHUFFLE, epoch), classes=N_CLASSES)

    def schedule(epoch, history, opt):
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if epoch + 1 == cfg.epochs:
            adjust_lr(opt, cfg.fine_lr)

    return train_loop(params, build, _classifier_loss(forward), batches, total, opt,
                      mode=CACHED, on_epoch_end=schedule)


def noise_levels(cfg):
    return np.linspace(0.0, cfg.noise_max, cfg.noise_points)


def exp_mnist(cfg=None, data_dir=None, synth=False, seed=0):
    """Train both classifiers, report accuracies and the uniform-noise sweep."""
    cfg = cfg or MnistConfig()
    train, test = load_data(cfg, data_dir, synth, seed)
    sizes = (N_PIXELS, *cfg.hidden, N_CLASSES)

    lbdn = init_lbdn(N_PIXELS, cfg.hidden, N_CLASSES, gamma=cfg.gamma, seed=sub_seed(seed, STREAM_INIT))
    lbdn_hist = _fit(lbdn.params, lambda tape, v: build_lbdn(tape, lbdn, v), lbdn_forward, train, cfg, seed)
    dense = init_dense(sizes, seed=sub_seed(seed, STREAM_BASELINE_INIT))
    dense_hist = _fit(dense, lambda tape, v: v, dense_forward, train, cfg, seed)

    lbdn_model = lbdn_to_explicit(lbdn)

    def f_lbdn(x):
        return lbdn_forward(lbdn_model, x)

    def f_dense(x):
        return dense_forward(dense, x)

    y_train = one_hot(train.labels, N_CLASSES)
    y_test = one_hot(test.labels, N_CLASSES)
    metrics = {
        "lbdn_train_acc": accuracy(f_lbdn, train.features, y_train),
        "lbdn_test_acc": accuracy(f_lbdn, test.features, y_test),
        "dense_train_acc": accuracy(f_dense, train.features, y_train),
        "dense_test_acc": accuracy(f_dense, test.features, y_test),
    }
    sweep = []
    for i, eps in enumerate(noise_levels(cfg)):
        noisy = add_uniform_noise(test.features, eps, seed=sub_seed(seed, STREAM_NOISE, i))
        sweep.append((float(eps), accuracy(f_lbdn, noisy, y_test), accuracy(f_dense, noisy, y_test)))
    return {
        "lbdn": lbdn,
        "dense": dense,
        "lbdn_history": lbdn_hist,
        "dense_history": dense_hist,
        "metrics": metrics,
        "sweep": sweep,
        "data": "synthetic" if synth else "mnist",
    }
