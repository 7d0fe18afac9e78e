"""Command-line entry point: ``robustnets <command> [options]``.

Commands: ``contraction-demo``, ``mnist``, ``rl-box``, ``observer``,
``bench`` and ``certify MODEL``. Every run writes its CSVs, model files,
PNG figures and a ``run.meta`` file under ``--out`` and prints a
``key=value`` summary. Exit status is 0 on success, 1 when a certificate
or acceptance check fails and 2 on usage or configuration errors.
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import __version__
from .certify import certify_lbdn, model_spec, verify_ren
from .data import write_csv
from .experiments.box import (CACHED, REBUILD, bench_modes, count_conversions, exp_rl_train, rl_rows)
from .experiments.config import (BenchConfig, BoxParams, CertifyConfig, ContractionConfig, MnistConfig,
                                 ObserverConfig, RlConfig)
from .experiments.contraction import check_contraction, contraction_rows, exp_contraction_demo
from .experiments.mnist import MissingDataError, exp_mnist
from .experiments.observer import exp_observer, observer_rows
from .ren import KINDS, SpecError
from .serialize import ModelFileError, load_lbdn, load_ren, save_lbdn, save_ren, sniff, spec_from_file

log = logging.getLogger("robustnets")

COMMANDS = {
    "contraction-demo": ContractionConfig,
    "mnist": MnistConfig,
    "rl-box": RlConfig,
    "observer": ObserverConfig,
    "bench": BenchConfig,
    "certify": CertifyConfig,
}
GLOBAL_KEYS = ("seed", "out", "data_dir", "synth")
OVERRIDE_FLAGS = ("gamma", "epochs", "lr", "alpha", "hidden")

RL_Q_TOL = 0.05
RL_U_TOL = 0.1
BENCH_RATIO = 5.0
LOSS_HEADER = ("epoch", "mean_loss")


class UsageError(Exception):
    """Bad command line."""


class ConfigError(Exception):
    """Inconsistent or missing configuration."""


@dataclasses.dataclass
class ExperimentConfig:
    command: str
    seed: int = 0
    out_dir: str = "out"
    data_dir: str = None
    synth: bool = False
    model_path: str = None
    plots: bool = True
    overrides: dict = dataclasses.field(default_factory=dict)
    settings: object = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def coerce(kind, raw, key):
    """Convert ``raw`` (str) to the field type ``kind``; raises ConfigError."""
    raw = str(raw).strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind.__name__})") from None


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    entries = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key.replace("-", "_")] = value
    return entries


def _build_parser():
    parser = _Parser(prog="robustnets", description="Certified robust network experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=str)
        p.add_argument("--out")
        p.add_argument("--config")
        p.add_argument("--data-dir")
        p.add_argument("--synth", action="store_true", default=None)
        p.add_argument("--no-plots", action="store_true")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag in OVERRIDE_FLAGS:
            p.add_argument(f"--{flag}", type=str)
        if name == "certify":
            p.add_argument("model")
            p.add_argument("--kind", choices=KINDS)
            p.add_argument("--nu-passivity", type=str)
            p.add_argument("--rho", type=str)
    return parser


def parse_args(argv):
    """Resolve defaults, config file and command line (highest precedence) into an ExperimentConfig."""
    args = _build_parser().parse_args(argv)
    settings_cls = COMMANDS[args.command]
    types = {f.name: f.type for f in dataclasses.fields(settings_cls)}

    merged = {}
    if args.config:
        merged.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip().replace("-", "_")] = value
    cli = {"seed": args.seed, "out": args.out, "data_dir": args.data_dir, "synth": args.synth}
    for flag in OVERRIDE_FLAGS:
        cli[flag] = getattr(args, flag)
    if args.command == "certify":
        cli.update(kind=args.kind, nu_passivity=args.nu_passivity, rho=args.rho)
    for key, value in cli.items():
        if value is None:
            continue
        if key not in GLOBAL_KEYS and key not in types:
            raise UsageError(f"--{key.replace('_', '-')} does not apply to {args.command}")
        merged[key] = value

    cfg = ExperimentConfig(command=args.command, model_path=getattr(args, "model", None),
                           plots=not args.no_plots)
    overrides = {}
    for key, value in merged.items():
        if key == "seed":
            cfg.seed = coerce(int, value, key)
        elif key == "out":
            cfg.out_dir = str(value)
        elif key == "data_dir":
            cfg.data_dir = str(value)
        elif key == "synth":
            cfg.synth = value if isinstance(value, bool) else coerce(bool, value, key)
        elif key in types:
            overrides[key] = coerce(types[key], value, key)
        else:
            raise ConfigError(f"unknown setting {key!r} for {args.command}")
    try:
        cfg.settings = settings_cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.overrides = overrides
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    return cfg


# --- commands ---------------------------------------------------------------

def _path(cfg, name):
    return os.path.join(cfg.out_dir, name)


def _plot(cfg, fn, *paths):
    if not cfg.plots:
        return None
    from . import plotting
    return getattr(plotting, fn)(*paths)


def _run_contraction(cfg):
    s = cfg.settings
    result = exp_contraction_demo(s, seed=cfg.seed)
    csv_path = _path(cfg, "contraction.csv")
    write_csv(csv_path, ("t", "y_a", "y_b", "gap"), contraction_rows(result))
    save_ren(_path(cfg, "contraction_ren.txt"), result["model"], result["cert"], result["spec"])
    _plot(cfg, "plot_contraction", csv_path)
    report = verify_ren(result["model"], result["cert"], result["spec"])
    monotone, bound_ok = check_contraction(result)
    summary = {
        "gap_initial": float(result["gap"][0]),
        "gap_final": float(result["gap"][-1]),
        "gap_monotone": monotone,
        "gap_within_rate_bound": bound_ok,
        "lmi_margin": report.margin,
        "certified": report.passed,
    }
    return summary, monotone and bound_ok and report.passed


def _run_mnist(cfg):
    s = cfg.settings
    try:
        result = exp_mnist(s, data_dir=cfg.data_dir, synth=cfg.synth, seed=cfg.seed)
    except MissingDataError as exc:
        raise ConfigError(str(exc)) from None
    csv_path = _path(cfg, "mnist.csv")
    write_csv(csv_path, ("epsilon", "lbdn_acc", "dense_acc"), result["sweep"])
    write_csv(_path(cfg, "mnist_lbdn_loss.csv"), LOSS_HEADER, enumerate(result["lbdn_history"]))
    write_csv(_path(cfg, "mnist_dense_loss.csv"), LOSS_HEADER, enumerate(result["dense_history"]))
    save_lbdn(_path(cfg, "mnist_lbdn.txt"), result["lbdn"])
    _plot(cfg, "plot_mnist", csv_path)
    cert = certify_lbdn(result["lbdn"])
    m = result["metrics"]
    floors = (0.99, 0.99) if cfg.synth else (0.95, 0.94)
    summary = dict(data=result["data"], **m, certified=cert.passed)
    passed = cert.passed and m["lbdn_test_acc"] >= floors[0] and m["dense_test_acc"] >= floors[1]
    return summary, passed


def _run_rl(cfg):
    s = cfg.settings
    result = exp_rl_train(s, seed=cfg.seed)
    csv_path = _path(cfg, "rl.csv")
    loss_path = _path(cfg, "rl_loss.csv")
    write_csv(csv_path, ("t", "batch", "q", "qdot", "u", "qref"),
              rl_rows(result["z_test"], result["qref_test"], s.dt))
    write_csv(loss_path, LOSS_HEADER, enumerate(result["history"]))
    save_lbdn(_path(cfg, "rl_policy.txt"), result["params"])
    _plot(cfg, "plot_rl", csv_path, loss_path)
    summary = {
        "epochs": len(result["history"]),
        "loss_first": result["history"][0] if result["history"] else float("nan"),
        "loss_last": result["history"][-1] if result["history"] else float("nan"),
        "terminal_q_error": result["terminal_q_error"],
        "terminal_u_error": result["terminal_u_error"],
    }
    passed = result["terminal_q_error"] < RL_Q_TOL and result["terminal_u_error"] < RL_U_TOL
    return summary, passed


def _run_observer(cfg):
    s = cfg.settings
    result = exp_observer(s, seed=cfg.seed)
    csv_path = _path(cfg, "observer.csv")
    write_csv(csv_path, ("t", "batch", "q", "qdot", "qhat", "qdothat", "err_norm"), observer_rows(result, s.dt))
    write_csv(_path(cfg, "observer_loss.csv"), LOSS_HEADER, enumerate(result["history"]))
    save_ren(_path(cfg, "observer_ren.txt"), result["model"], result["cert"], result["params"].spec)
    _plot(cfg, "plot_observer", csv_path)
    report = verify_ren(result["model"], result["cert"], result["params"].spec)
    summary = {
        "epochs": len(result["history"]),
        "final_error": result["final_error"],
        "tolerance": s.tol,
        "certified": report.passed,
    }
    return summary, report.passed and result["final_error"] < s.tol


def _run_bench(cfg):
    s = cfg.settings
    rows = bench_modes(s, seed=cfg.seed)
    csv_path = _path(cfg, "bench.csv")
    write_csv(csv_path, ("n", "t_cached", "t_rebuild"), rows)
    _plot(cfg, "plot_bench", csv_path)
    steps = BoxParams(dt=s.dt, Tmax=s.Tmax).steps
    n0 = s.sizes[0]
    cached, rebuild = count_conversions(n0, CACHED, cfg.seed, s), count_conversions(n0, REBUILD, cfg.seed, s)
    summary = {"conversions_cached": cached, "conversions_rebuild": rebuild, "steps": steps}
    passed = cached == 1 and rebuild == steps * cached
    for n, tc, tr in rows:
        summary[f"ratio_n{n}"] = tr / tc
    if 512 in s.sizes:
        passed = passed and summary["ratio_n512"] >= BENCH_RATIO
    return summary, passed


def _run_certify(cfg):
    s = cfg.settings
    path = cfg.model_path
    try:
        family = sniff(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc.strerror}") from None
    if family == "lbdn":
        if s.kind and s.kind != "lipschitz":
            raise ConfigError(f"an LBDN file only carries a Lipschitz certificate, not {s.kind!r}")
        p = load_lbdn(path)
        report = certify_lbdn(p)
        bound = float(np.exp(p.log_gamma()))
        passed = report.passed and (not s.gamma or bound <= s.gamma * (1.0 + 1e-12))
        summary = {"model": "lbdn", "kind": "lipschitz", "certified_gamma": bound,
                   "requested_gamma": s.gamma or bound, "orthogonality_error": report.margin}
        return summary, passed
    model, cert, variant, alpha, extras = load_ren(path)
    kind = s.kind or variant
    needs = {"lipschitz": ("gamma", s.gamma), "passive_output": ("rho", s.rho)}
    if kind in needs and not needs[kind][1]:
        raise ConfigError(f"--{needs[kind][0]} is required for kind {kind}")
    if kind == "general" and not extras:
        raise ConfigError("general certification needs Q, S, R records in the model file")
    try:
        spec = spec_from_file(kind, s.alpha or alpha, extras, gamma=s.gamma,
                              nu_passive=s.nu_passivity, rho=s.rho)
    except SpecError as exc:
        raise ConfigError(str(exc)) from None
    report = verify_ren(model, cert, spec, contraction_only=(kind == "contracting"))
    summary = {"model": "ren", "kind": kind, "alpha": spec.alpha, **dataclasses.asdict(report)}
    return summary, report.passed


RUNNERS = {
    "contraction-demo": _run_contraction,
    "mnist": _run_mnist,
    "rl-box": _run_rl,
    "observer": _run_observer,
    "bench": _run_bench,
    "certify": _run_certify,
}


def _format(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def write_meta(cfg):
    lines = [f"version={__version__}", f"command={cfg.command}", f"seed={cfg.seed}",
             f"data_dir={cfg.data_dir or ''}", f"synth={cfg.synth}"]
    if cfg.model_path:
        lines.append(f"model={cfg.model_path}")
    for f in dataclasses.fields(cfg.settings):
        lines.append(f"{f.name}={_format(getattr(cfg.settings, f.name))}")
    with open(_path(cfg, "run.meta"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run(cfg, stream=None):
    """Execute one command; returns the exit status."""
    stream = stream or sys.stdout
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_meta(cfg)
    summary, passed = RUNNERS[cfg.command](cfg)
    summary["result"] = "PASS" if passed else "FAIL"
    for key, value in summary.items():
        print(f"{key}={_format(value)}", file=stream)
    return 0 if passed else 1


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
        return run(cfg)
    except UsageError as exc:
        _build_parser().print_usage(sys.stderr)
        print(f"robustnets: usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ModelFileError) as exc:
        print(f"robustnets: configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
