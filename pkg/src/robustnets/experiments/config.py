"""Experiment configurations and seed derivation."""

from dataclasses import dataclass, fields

import numpy as np

# Fixed stream keys: a new consumer gets a new key, existing streams never move.
STREAM_INIT = 0
STREAM_TRAIN_DATA = 1
STREAM_TEST_DATA = 2
STREAM_SHUFFLE = 3
STREAM_NOISE = 4
STREAM_BASELINE_INIT = 5
STREAM_AUX = 6


def sub_rng(seed, stream, *counters):
    """Independent generator for one consumer of the global seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, counters)]))


def sub_seed(seed, stream, *counters):
    entropy = [int(seed), int(stream), *map(int, counters)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class BoxParams:
    m: float = 1.0
    k: float = 5.0
    mu: float = 0.5
    dt: float = 0.02
    Tmax: float = 4.0
    signed_drag: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.type is float and not getattr(self, f.name) > 0:
                raise ValueError(f"box parameter {f.name} must be positive")

    @property
    def steps(self):
        return int(round(self.Tmax / self.dt))


@dataclass
class RlConfig:
    c1: float = 10.0
    c2: float = 1.0
    c3: float = 0.1
    batches: int = 80
    gamma: float = 20.0
    hidden: tuple = (32, 32)
    epochs: int = 250
    lr: float = 1e-3
    dt: float = 0.02
    Tmax: float = 4.0
    test_batches: int = 60
    signed_drag: bool = True

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("cost weights must be positive")

    @property
    def weights(self):
        return (self.c1, self.c2, self.c3)


@dataclass
class BenchConfig:
    sizes: tuple = (2, 4, 8, 16, 32, 64, 128, 256, 512)
    epochs: int = 100
    gamma: float = 20.0
    batches: int = 80
    lr: float = 1e-3
    dt: float = 0.02
    Tmax: float = 4.0
    warmup_epochs: int = 1


@dataclass
class ObserverConfig:
    dt: float = 0.01
    Tmax: float = 10.0
    nbatch: int = 200
    nv: int = 100
    epochs: int = 100
    lr: float = 1e-3
    min_lr: float = 1e-4
    x0_range: float = 0.5
    test_batches: int = 50
    test_x0_range: float = 0.2
    tol: float = 0.05
    signed_drag: bool = True

    def __post_init__(self):
        for name in ("dt", "Tmax", "nbatch", "nv", "lr", "min_lr", "x0_range",
                     "test_batches", "test_x0_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"observer setting {name} must be positive")


@dataclass
class MnistConfig:
    gamma: float = 5.0
    hidden: tuple = (64, 64)
    batch: int = 256
    epochs: int = 40
    lr: float = 1e-3
    fine_epochs: int = 10
    fine_lr: float = 1e-4
    noise_points: int = 10
    noise_max: float = 200.0 / 255.0
    # synthetic fallback
    synth_per_class: int = 300
    synth_test_per_class: int = 100
    synth_separation: float = 10.0


@dataclass
class ContractionConfig:
    alpha: float = 0.95
    nv: int = 20
    T: int = 500
    omega: float = 0.1
    x0_scale: float = 1.0


@dataclass
class CertifyConfig:
    kind: str = ""
    gamma: float = 0.0
    alpha: float = 0.0
    nu_passivity: float = 0.0
    rho: float = 0.0
