"""
Comparison reports from a fitted model.

Series are grouped by the columns they share under the hard assignment
(``nu > 0.5``); each group gets one description of the column's kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from gpshare.data import TimeSeriesSet
from gpshare.errors import NoActiveComponent
from gpshare.kernels import describe
from gpshare.pipeline import decompose


@dataclass
class SharedComponent:
    k: int
    members: list  # series names
    description: str
    expression: str
    means: dict = field(default_factory=dict)  # name -> (D,) posterior mean
    variances: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ValueError("a shared component needs at least one member")
        if not self.description:
            raise ValueError("empty description")


def _decompositions(state, ts: TimeSeriesSet):
    """Per-series map from column index to (mean, variance); empty for inactive rows."""
    out = []
    for n in range(state.N):
        if not state.hard[n].any():
            out.append({})
            continue
        dec = decompose(state, ts.X, n)
        out.append({k: (dec.means[i], dec.variances[i]) for i, k in enumerate(dec.columns)})
    return out


def _slope(t, y) -> float:
    tc = t - t.mean()
    return float(tc @ (y - y.mean()) / (tc @ tc)) if tc.any() else 0.0


def build_components(state, ts: TimeSeriesSet) -> list:
    """One :class:`SharedComponent` per active column, largest groups first."""
    hard = state.hard
    active = [k for k in range(state.K) if hard[:, k].any()]
    if not active:
        raise NoActiveComponent("no column is active for any series")
    decs = _decompositions(state, ts)
    comps = []
    for k in active:
        idx = [n for n in range(state.N) if hard[n, k]]
        means = {ts.names[n]: decs[n][k][0] for n in idx}
        variances = {ts.names[n]: decs[n][k][1] for n in idx}
        slope = sum(_slope(ts.t, m) for m in means.values())
        expr = state.kernels[k]
        comps.append(
            SharedComponent(
                k=k,
                members=[ts.names[n] for n in idx],
                description=describe(expr, np.sign(slope), ts.unit),
                expression=str(expr),
                means=means,
                variances=variances,
            )
        )
    comps.sort(key=lambda c: (-len(c.members), c.k))
    return comps


def _subject(members) -> str:
    if len(members) == 1:
        return f"{members[0]} has the following properties"
    return " and ".join(members) + " share the following properties"


def render_markdown(components, title: str | None = None) -> str:
    """Deterministic Markdown: one bullet per component, one line per sentence group."""
    lines = []
    if title:
        lines += [f"# {title}", ""]
    for c in components:
        if not c.members:
            continue
        lines.append(f"- {_subject(c.members)}")
        lines.append(f"  - ▷ {c.description}")
    return "\n".join(lines) + "\n"


def export_plot_data(state, ts: TimeSeriesSet, scale=None) -> list:
    """One record per (series, column) with mean, ±2σ band and active flag.

    Values are in standardized units unless ``scale`` is given, in which case
    means and bands are mapped back to data units (the bands by std only).
    """
    decs = _decompositions(state, ts)
    hard = state.hard
    records = []
    for n, name in enumerate(ts.names):
        for k in range(state.K):
            active = bool(hard[n, k])
            if k in decs[n]:
                mean, var = decs[n][k]
            else:
                mean, var = np.zeros(ts.D), np.zeros(ts.D)
            sd = np.sqrt(np.maximum(var, 0.0))
            if scale is not None:
                sd = sd * scale[n, 1]
                mean = mean * scale[n, 1]
            records.append(
                {
                    "series": name,
                    "column": k,
                    "kernel": str(state.kernels[k]),
                    "active": active,
                    "t": ts.t.tolist(),
                    "mean": mean.tolist(),
                    "lower": (mean - 2 * sd).tolist(),
                    "upper": (mean + 2 * sd).tolist(),
                }
            )
    return records


def total_fit(records, series: str, scale=None, n=None) -> np.ndarray:
    """Sum of exported component means for one series (plus the offset in data units)."""
    total = sum(np.array(r["mean"]) for r in records if r["series"] == series)
    if scale is not None:
        total = total + scale[n, 0]
    return total


def plot_data_json(state, ts: TimeSeriesSet, scale=None) -> str:
    return json.dumps(export_plot_data(state, ts, scale), sort_keys=True)


__all__ = [
    "SharedComponent",
    "build_components",
    "render_markdown",
    "export_plot_data",
    "plot_data_json",
    "total_fit",
]
