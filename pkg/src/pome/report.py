"""Spectrum diagnostics, rank-retention sweeps and edit summaries, with CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import PomeParams, resolve_k
from .linalg import as_matrix, frobenius_norm, svd

SWEEP_NOTE = ("rank-retention sweep: retained_energy = sum of kept sigma^2 over total, "
              "residual = ||dW - truncated||_F / ||dW||_F; no task accuracy is measured")
SPECTRUM_COLUMNS = ("tensor", "rank_index", "sigma")
SWEEP_COLUMNS = ("tensor", "ratio", "k", "retained_energy", "residual")
SUMMARY_COLUMNS = ("tensor", "shape", "k", "k_ratio_effective", "alpha", "beta", "delta_fro",
                   "edited_fro", "retained_energy", "residual")


@dataclass(frozen=True)
class SpectrumRow:
    name: str
    shape: tuple
    sigma: tuple
    frobenius_norm: float
    spectral_norm: float
    rms_to_rms_norm: float
    energy_curve: tuple
    zero: bool = False


@dataclass(frozen=True)
class SweepRow:
    name: str
    ratio: float
    k: int
    retained_energy: float
    residual: float


@dataclass(frozen=True)
class SummaryRow:
    name: str
    shape: tuple
    k: int
    k_ratio_effective: float
    alpha: float
    beta: float
    delta_fro: float
    edited_fro: float
    retained_energy: float
    residual: float


@dataclass
class Report:
    """A list of rows of one kind: ``"spectrum"``, ``"sweep"`` or ``"summary"``."""

    kind: str
    rows: list


def energy_curve(sigma):
    sq = np.asarray(sigma, dtype=np.float64) ** 2
    total = sq.sum()
    if total == 0:
        return np.zeros_like(sq)
    # cumsum and sum may round differently; pin the tail to exactly 1
    curve = np.minimum(np.cumsum(sq) / total, 1.0)
    curve[-1] = 1.0
    return curve


def spectrum(delta_w, name="delta"):
    d = as_matrix(delta_w, name)
    sigma = svd(d, name).sigma
    rows, cols = d.shape
    top = float(sigma[0])
    return SpectrumRow(
        name=name,
        shape=d.shape,
        sigma=tuple(float(s) for s in sigma),
        frobenius_norm=frobenius_norm(d),
        spectral_norm=top,
        rms_to_rms_norm=math.sqrt(cols / rows) * top,
        energy_curve=tuple(float(e) for e in energy_curve(sigma)),
        zero=top == 0.0,
    )


def rank_sweep(delta_w, ratios, name="delta", factors=None):
    """Truncation energy and residual at each rank-retention ratio.

    The residual is measured on the reconstructed truncation, not derived from
    the spectrum, so the two can be checked against each other.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ValueError("rank_sweep needs at least one ratio")
    if any(b < a for a, b in zip(ratios, ratios[1:])):
        raise ValueError(f"ratios must be sorted ascending, got {ratios}")
    d = as_matrix(delta_w, name)
    f = svd(d, name) if factors is None else factors
    fro = frobenius_norm(d)
    total = float(np.sum(f.sigma ** 2))
    out = []
    for ratio in ratios:
        k = resolve_k(*d.shape, PomeParams(k_ratio=ratio))
        if fro == 0.0:
            out.append(SweepRow(name, ratio, k, 1.0, 0.0))
            continue
        kept = float(np.sum(f.sigma[:k] ** 2)) / total
        if k == len(f.sigma):
            residual = 0.0
        else:
            residual = frobenius_norm(d - f.reconstruct(k)) / fro
        out.append(SweepRow(name, ratio, k, kept, residual))
    return out


def edit_summary(name, delta_w, edited, beta, factors=None):
    d = np.asarray(delta_w, dtype=np.float64)
    f = svd(d, name) if factors is None else factors
    fro = frobenius_norm(d)
    k = edited.k
    total = float(np.sum(f.sigma ** 2))
    return SummaryRow(
        name=name,
        shape=d.shape,
        k=k,
        k_ratio_effective=k / min(d.shape),
        alpha=float(edited.alpha),
        beta=float(beta),
        delta_fro=fro,
        edited_fro=frobenius_norm(edited.delta_hat),
        retained_energy=float(np.sum(f.sigma[:k] ** 2)) / total,
        residual=frobenius_norm(d - f.reconstruct(k)) / fro if k < len(f.sigma) else 0.0,
    )


def fmt_number(x):
    """17 significant digits: enough for every float64 to survive a text round trip."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return "%.17g" % x


def _csv_rows(report):
    if report.kind == "spectrum":
        yield SPECTRUM_COLUMNS
        for row in report.rows:
            for i, s in enumerate(row.sigma):
                yield row.name, str(i), fmt_number(s)
    elif report.kind == "sweep":
        yield SWEEP_COLUMNS
        for row in report.rows:
            yield row.name, fmt_number(row.ratio), str(row.k), fmt_number(row.retained_energy), fmt_number(row.residual)
    elif report.kind == "summary":
        yield SUMMARY_COLUMNS
        for row in report.rows:
            yield (row.name, "x".join(map(str, row.shape)), str(row.k),
                   *(fmt_number(getattr(row, c)) for c in SUMMARY_COLUMNS[3:]))
    else:
        raise ValueError(f"unknown report kind {report.kind!r}")


def to_csv(report):
    buf = io.StringIO()
    if report.kind == "sweep":
        buf.write("# " + SWEEP_NOTE + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in _csv_rows(report):
        writer.writerow(row)
    return buf.getvalue()


def to_json(report):
    doc = {"kind": report.kind, "rows": [asdict(r) for r in report.rows]}
    if report.kind == "sweep":
        doc["note"] = SWEEP_NOTE
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def emit(report, fmt, path):
    """Write ``report`` as ``csv`` or ``json`` to ``path`` (``-`` for stdout)."""
    if fmt == "csv":
        text = to_csv(report)
    elif fmt == "json":
        text = to_json(report)
    else:
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")
    return text


_ROW_TYPES = {"spectrum": SpectrumRow, "sweep": SweepRow, "summary": SummaryRow}


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def parse_json(text):
    doc = json.loads(text)
    cls = _ROW_TYPES[doc["kind"]]
    rows = [cls(**{k: _tupled(v) for k, v in r.items()}) for r in doc["rows"]]
    return Report(doc["kind"], rows)


def parse_csv(text):
    """Rows of a CSV emission as dicts of parsed numbers (comment lines skipped)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    out = []
    for rec in reader:
        parsed = {}
        for key, value in rec.items():
            if key in ("tensor", "shape"):
                parsed[key] = value
            elif key in ("rank_index", "k"):
                parsed[key] = int(value)
            else:
                parsed[key] = float(value)
        out.append(parsed)
    return out
