"""Desk-scale analyses: geometry census, attention sparsity, flow export.

Every writer emits floats with ``repr`` so files read back bit-exactly.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mobius as mb
from .errors import NoMobiusLayers, ParabolicMap
from .model import Model, forward

CENSUS_FIELDS = ("layer", "head", "dim", "class", "tau_re", "tau_im", "k_mag", "k_arg")
SPARSITY_FIELDS = ("layer", "head", "kind", "zero_frac", "entropy")
FLOW_FIELDS = ("step", "re", "im", "sx", "sy", "sw")
CLASS_ORDER = tuple(c.value for c in mb.GeometryClass)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(rows, fields, header_lines=()) -> str:
    """CSV text with optional ``# key=value`` comment lines on top."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def read_csv(text: str) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Inverse of :func:`write_csv`: ``(header key/values, rows as strings)``."""
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            for part in line[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def write_matrix(path, M) -> None:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    Path(path).write_text("".join(",".join(repr(float(x)) for x in row) + "\n" for row in M))


def read_matrix(path) -> np.ndarray:
    rows = [[float(x) for x in line.split(",")] for line in Path(path).read_text().splitlines() if line]
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# geometry census
# ---------------------------------------------------------------------------

def census_row(layer: int, head: int, dim: int, m: mb.MobiusParams, tol: float) -> dict:
    tau = mb._normalized_trace_sq(m)
    cls = mb.classify(m, tol)
    try:
        k = mb.characteristic_constant(m, tol).to_complex()
    except ParabolicMap:
        k = 1.0 + 0.0j
    return {"layer": layer, "head": head, "dim": dim, "class": cls.value,
            "tau_re": tau.real, "tau_im": tau.imag, "k_mag": abs(k), "k_arg": float(np.angle(k))}


def geometry_census(model: Model, tol: float = mb.CENSUS_TOL) -> list[dict]:
    """One row per Mobius-parameterized query dimension of every Mobius head."""
    rows = []
    for layer, head, _ in model.mobius_head_prefixes():
        coef = model.mobius_coefficients(layer, head)
        for j in range(coef.shape[1]):
            m = mb.MobiusParams(*coef[:, j])
            rows.append(census_row(layer, head, j, m, tol))
    if not rows:
        raise NoMobiusLayers("model has no Mobius-parameterized layers")
    return rows


def census_counts(rows) -> dict[int, Counter]:
    table: dict[int, Counter] = {}
    for r in rows:
        table.setdefault(int(r["layer"]), Counter())[r["class"]] += 1
    return table


def format_census(rows, tol: float) -> str:
    return write_csv(rows, CENSUS_FIELDS, [f"tol={tol!r}"])


def format_counts(rows) -> str:
    table = census_counts(rows)
    out = [{"layer": layer, **{c: table[layer][c] for c in CLASS_ORDER}} for layer in sorted(table)]
    return write_csv(out, ("layer",) + CLASS_ORDER)


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------

@dataclass
class HeadSparsity:
    layer: int
    head: int
    kind: str
    zero_frac: float
    entropy: float
    weights: np.ndarray  # [B, n, n] post-softmax

    def row(self) -> dict:
        return {f: getattr(self, f) for f in SPARSITY_FIELDS}


def row_entropy(S: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of attention rows, ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(S > 0, -S * np.log(S), 0.0)
    return float(terms.sum(axis=-1).mean())


def sparsity_report(model: Model, token_ids, threshold: float = 1e-3) -> list[HeadSparsity]:
    """Per-head fraction of post-softmax weights below ``threshold`` over a batch."""
    capture: list = []
    forward(model, token_ids, capture=capture)
    out = []
    for rec in capture:
        S = np.asarray(rec["weights"])
        out.append(HeadSparsity(rec["layer"], rec["head"], rec["kind"],
                                float((S < threshold).mean()), row_entropy(S), S))
    return out


def mean_zero_frac(report, kind: str, layers=None) -> float:
    vals = [h.zero_frac for h in report if h.kind == kind and (layers is None or h.layer in layers)]
    return float(np.mean(vals)) if vals else float("nan")


def compare_sparsity(report) -> tuple[float, float]:
    """Mean zero fraction of Mobius vs vanilla heads within the layers holding Mobius heads."""
    layers = {h.layer for h in report if h.kind == "mobius"}
    return mean_zero_frac(report, "mobius", layers), mean_zero_frac(report, "vanilla", layers)


def write_sparsity(report, out_dir, header_lines=()) -> Path:
    """Summary CSV plus one matrix CSV per head (first sequence of the batch)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sparsity.csv"
    path.write_text(write_csv([h.row() for h in report], SPARSITY_FIELDS, header_lines))
    for h in report:
        write_matrix(out / f"attn_layer{h.layer}_{h.kind}{h.head}.csv", h.weights[0])
    return path


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

def flow_rows(m: mb.MobiusParams, z0, steps: int) -> list[dict]:
    rows = []
    for s, z in enumerate(mb.flow_trajectory(m, z0, steps)):
        sx, sy, sw = mb.stereographic_project(z)
        re, im = (float("inf"), float("inf")) if z.is_infinity else (z.re, z.im)
        rows.append({"step": s, "re": re, "im": im, "sx": sx, "sy": sy, "sw": sw})
    return rows


def map_summary(m: mb.MobiusParams, tol: float = mb.DEFAULT_TOL) -> dict[str, str]:
    """Class, fixed points and characteristic constant as whitespace-free strings."""
    out = {"class": mb.classify(m, tol).value}
    if mb.is_identity(m, tol):
        out["fixed_points"] = "all"
        out["k"] = "none"
        return out
    fp = mb.fixed_points(m, tol)
    out["fixed_points"] = ";".join("inf" if g.is_infinity else _cfmt(g.to_complex()) for g in fp.points())
    out["multiplicity"] = str(fp.multiplicity)
    try:
        out["k"] = _cfmt(mb.characteristic_constant(m, tol).to_complex())
    except ParabolicMap:
        out["k"] = "none"
    return out


def _cfmt(z: complex) -> str:
    return f"{z.real!r}{'+' if z.imag >= 0 else '-'}{abs(z.imag)!r}i"
