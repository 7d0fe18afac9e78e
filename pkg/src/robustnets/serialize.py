"""Flat text model files.

Layout::

    renv1 <variant> <nu> <nx> <nv> <ny> <alpha>      (or lbdnv1 <nu> <widths...> <ny> <gamma>)
    <name> <rows> <cols>
    <row-major entries, one matrix row per line, 17 significant digits>
    ...

REN files carry the explicit weights, the certificate (``P``, ``Lambda``),
the activation (``act``: 0 relu, 1 tanh) and for general IQCs the ``Q``,
``S``, ``R`` records. LBDN files carry the direct parameters.
"""

import numpy as np

from .lbdn import LbdnDirectParams
from .ren import Certificate, ExplicitRen, IqcSpec

ACT_CODES = {"relu": 0, "tanh": 1}
REN_FIELDS = ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22", "bx", "bv", "by")


class ModelFileError(ValueError):
    """Malformed model file."""


def _records_text(records):
    lines = []
    for name, mat in records:
        mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
        rows, cols = mat.shape
        lines.append(f"{name} {rows} {cols}")
        for r in range(rows):
            lines.append(" ".join(f"{x:.17g}" for x in mat[r]))
    return lines


def _parse_records(lines):
    records = {}
    tokens = []
    for line in lines:
        tokens.extend(line.split())
    i = 0
    while i < len(tokens):
        try:
            name, rows, cols = tokens[i], int(tokens[i + 1]), int(tokens[i + 2])
        except (IndexError, ValueError):
            raise ModelFileError(f"bad record header near token {i}") from None
        i += 3
        n = rows * cols
        if i + n > len(tokens):
            raise ModelFileError(f"record {name} truncated")
        records[name] = np.array([float(t) for t in tokens[i:i + n]]).reshape(rows, cols)
        i += n
    return records


def save_ren(path, model, cert, spec):
    d = model.dims
    head = f"renv1 {spec.kind} {d.nu} {d.nx} {d.nv} {d.ny} {spec.alpha:.17g}"
    records = [(k, getattr(model, k)) for k in REN_FIELDS]
    records += [("P", cert.P), ("Lambda", np.reshape(cert.Lambda, (-1, 1))),
                ("act", [[ACT_CODES[model.act]]])]
    if spec.kind == "general":
        records += [("Q", spec.Q), ("S", spec.S), ("R", spec.R)]
    with open(path, "w") as fh:
        fh.write("\n".join([head] + _records_text(records)) + "\n")


def _fix_empty(name, mat, dims):
    nu, nx, nv, ny = dims
    shapes = {
        "A": (nx, nx), "B1": (nx, nv), "B2": (nx, nu), "C1": (nv, nx), "D11": (nv, nv),
        "D12": (nv, nu), "C2": (ny, nx), "D21": (ny, nv), "D22": (ny, nu),
        "bx": (nx, 1), "bv": (nv, 1), "by": (ny, 1), "P": (nx, nx), "Lambda": (nv, 1),
    }
    want = shapes.get(name)
    if want is None:
        return mat
    if mat.size == 0:
        return np.zeros(want)
    if mat.shape != want:
        raise ModelFileError(f"record {name} has shape {mat.shape}, expected {want}")
    return mat


def load_ren(path):
    """``(ExplicitRen, Certificate, variant, alpha, extras)`` from a REN file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ModelFileError("empty model file")
    head = lines[0].split()
    if len(head) != 7 or head[0] != "renv1":
        raise ModelFileError(f"not a renv1 file: {lines[0]!r}")
    variant = head[1]
    dims = tuple(int(x) for x in head[2:6])
    alpha = float(head[6])
    rec = _parse_records(lines[1:])
    missing = [k for k in REN_FIELDS + ("P", "Lambda") if k not in rec]
    if missing:
        raise ModelFileError(f"missing records: {missing}")
    mats = {k: _fix_empty(k, rec[k], dims) for k in REN_FIELDS + ("P", "Lambda")}
    act = {v: k for k, v in ACT_CODES.items()}[int(rec.get("act", [[0]])[0][0])]
    model = ExplicitRen(**{k: mats[k] for k in REN_FIELDS}, act=act)
    cert = Certificate(P=mats["P"], Lambda=mats["Lambda"].ravel())
    extras = {k: rec[k] for k in ("Q", "S", "R") if k in rec}
    return model, cert, variant, alpha, extras


def save_lbdn(path, p):
    head = " ".join(["lbdnv1", str(p.nu), *map(str, p.widths), str(p.ny), f"{np.exp(p.log_gamma()):.17g}"])
    records = sorted(p.params.items())
    records.append(("act", [[ACT_CODES[p.act]]]))
    records.append(("learnable", [[1.0 if p.learnable_gamma else 0.0]]))
    with open(path, "w") as fh:
        fh.write("\n".join([head] + _records_text(records)) + "\n")


def load_lbdn(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) < 4 or head[0] != "lbdnv1":
        raise ModelFileError(f"not an lbdnv1 file: {lines[0] if lines else ''!r}")
    nu, *widths, ny = (int(x) for x in head[1:-1])
    gamma = float(head[-1])
    rec = _parse_records(lines[1:])
    act = {v: k for k, v in ACT_CODES.items()}[int(rec.pop("act", [[0]])[0][0])]
    learnable = bool(rec.pop("learnable", [[0.0]])[0][0])
    return LbdnDirectParams(nu, tuple(widths), ny, rec, gamma, learnable, act)


def sniff(path):
    """``"ren"`` or ``"lbdn"`` from the header line."""
    with open(path) as fh:
        first = fh.readline().split()
    if first and first[0] == "renv1":
        return "ren"
    if first and first[0] == "lbdnv1":
        return "lbdn"
    raise ModelFileError(f"unrecognised model file {path}")


def spec_from_file(variant, alpha, extras, gamma=None, nu_passive=None, rho=None):
    """Rebuild an ``IqcSpec`` from header fields plus CLI overrides."""
    if variant == "contracting":
        return IqcSpec.contracting(alpha)
    if variant == "lipschitz":
        return IqcSpec.lipschitz(gamma, alpha=alpha)
    if variant == "passive_input":
        return IqcSpec.passive_input(nu_passive or 0.0, alpha=alpha)
    if variant == "passive_output":
        return IqcSpec.passive_output(rho, alpha=alpha)
    return IqcSpec.general(extras["Q"], extras["S"], extras["R"], alpha=alpha)
