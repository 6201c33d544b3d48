"""Scaling curves: unique successes against compute, as CSV and SVG.

Rendering uses an explicit ``Figure`` (no pyplot state), a fixed SVG hash
salt and no date metadata, so identical inputs give identical files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib as mpl
from matplotlib.figure import Figure

from binderflow.bench.runner import RunManifest, atomic_write

CSV_HEADER = ("label", "compute_unit", "compute", "unique_successes")
SVG_RC = {
    "svg.hashsalt": "binderflow",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}


class CurveError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingCurve:
    label: str
    compute_unit: str
    points: tuple

    def __post_init__(self):
        pts = tuple((int(c), int(u)) for c, u in self.points)
        for (c0, u0), (c1, u1) in zip(pts, pts[1:]):
            if c1 <= c0:
                raise CurveError(f"{self.label}: compute must increase strictly ({c0} then {c1})")
            if u1 < u0:
                raise CurveError(f"{self.label}: unique successes decreased ({u0} then {u1})")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_manifest(cls, m: RunManifest, label: str | None = None) -> "ScalingCurve":
        return cls(label or m.label, m.compute_unit, tuple(map(tuple, m.curve)))


def curves_from_manifests(manifests: Sequence[RunManifest]) -> list:
    if not manifests:
        raise CurveError("need at least one manifest")
    units = {m.compute_unit for m in manifests}
    if len(units) > 1:
        raise CurveError(f"manifests mix compute units: {sorted(units)}")
    labels = [m.label for m in manifests]
    curves = []
    for m in manifests:
        label = m.label if labels.count(m.label) == 1 else f"{m.label} (seed {m.seed})"
        curves.append(ScalingCurve.from_manifest(m, label))
    seen = [c.label for c in curves]
    if len(set(seen)) != len(seen):
        raise CurveError("two manifests share a label and seed")
    return curves


def curves_to_csv(curves: Sequence[ScalingCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in curves:
        for compute, unique in c.points:
            w.writerow((c.label, c.compute_unit, compute, unique))
    return buf.getvalue()


def read_curves_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise CurveError("not a curve CSV")
    order, pts, units = [], {}, {}
    for label, unit, compute, unique in rows[1:]:
        if label not in pts:
            order.append(label)
            pts[label], units[label] = [], unit
        pts[label].append((int(compute), int(unique)))
    return [ScalingCurve(k, units[k], tuple(pts[k])) for k in order]


def render_svg(curves: Sequence[ScalingCurve]) -> str:
    with mpl.rc_context(SVG_RC):
        fig = Figure(figsize=(4.5, 3.2))
        ax = fig.add_subplot()
        for c in curves:
            xs, ys = zip(*c.points) if c.points else ((), ())
            ax.plot(xs, ys, marker="o", label=c.label)
        unit = curves[0].compute_unit.replace("_", " ") if curves else "compute"
        ax.set_xlabel(unit)
        ax.set_ylabel("unique successes")
        ax.legend(frameon=False)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def emit_curves(manifests: Sequence[RunManifest], out_dir, stem: str = "curves"):
    """Write ``<stem>.csv`` and ``<stem>.svg``; returns their paths."""
    curves = curves_from_manifests(manifests)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    atomic_write(csv_path, curves_to_csv(curves))
    atomic_write(svg_path, render_svg(curves))
    return csv_path, svg_path
