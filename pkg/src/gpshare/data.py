"""
Time-series containers, CSV I/O, standardization, metrics and synthetic data.

Models are fit on standardized series; metrics are reported in the original
units. Dates are mapped to fractional years, ``year + (day_of_year - 1) / 365.25``,
so ``2004-01-01`` is exactly ``2004.0``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime

import numpy as np

from gpshare.errors import ConstantSeries, DuplicateTime, ParseError
from gpshare.kernels import AdditiveKernelSet, BaseKernel, KernelExpr, default_base, kernel_from_json
from gpshare.numerics import cholesky

LOG_2PI = math.log(2 * math.pi)


@dataclass
class TimeSeriesSet:
    names: list
    t: np.ndarray  # (D,)
    X: np.ndarray  # (N, D)
    unit: str = "years"
    scale: np.ndarray | None = None  # (N, 2) mean, std used by standardize

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.names = [str(n) for n in self.names]
        if self.X.shape != (len(self.names), self.t.size):
            raise ValueError(f"X has shape {self.X.shape}, expected ({len(self.names)}, {self.t.size})")
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("t must be strictly increasing")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.X))):
            raise ValueError("non-finite values in time-series set")

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def D(self):
        return self.t.size

    def subset(self, idx) -> "TimeSeriesSet":
        idx = np.asarray(idx)
        return TimeSeriesSet(self.names, self.t[idx], self.X[:, idx], self.unit, self.scale)

    def to_dict(self) -> dict:
        out = {"names": self.names, "t": self.t.tolist(), "X": self.X.tolist(), "unit": self.unit}
        if self.scale is not None:
            out["scale"] = self.scale.tolist()
        return out

    @classmethod
    def from_dict(cls, d) -> "TimeSeriesSet":
        scale = d.get("scale")
        return cls(d["names"], d["t"], d["X"], d.get("unit", "years"), None if scale is None else np.array(scale))


@dataclass(frozen=True)
class Split:
    train_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        tr = np.asarray(self.train_mask, dtype=bool)
        te = np.asarray(self.test_mask, dtype=bool)
        if tr.shape != te.shape or np.any(tr & te) or not np.all(tr | te):
            raise ValueError("train and test masks must be disjoint and cover every index")
        object.__setattr__(self, "train_mask", tr)
        object.__setattr__(self, "test_mask", te)


def trailing_split(D: int, test_fraction: float = 0.1) -> Split:
    """Last ``ceil(test_fraction * D)`` points are held out (at least one train point kept)."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    n_test = min(int(math.ceil(test_fraction * D)), D - 1)
    test = np.zeros(D, dtype=bool)
    if n_test > 0:
        test[D - n_test:] = True
    return Split(~test, test)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def date_to_year(d: date) -> float:
    return d.year + (d.timetuple().tm_yday - 1) / 365.25


def _parse_time(text: str, row: int) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return date_to_year(datetime.fromisoformat(text).date())
    except ValueError:
        raise ParseError(f"cannot parse time {text!r}", row=row, column="time") from None


def load_csv(path, unit: str = "years") -> TimeSeriesSet:
    """Read a CSV whose first column is ``time`` and whose other columns are series."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", row=1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0].lower() != "time":
        raise ParseError("first column must be named 'time'", row=1, column=header[0] if header else None)
    names = header[1:]
    if not names:
        raise ParseError("no series columns", row=1)
    times, values = [], []
    for i, r in enumerate(rows[1:], start=2):
        if not r or all(not c.strip() for c in r):
            continue
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(r)}", row=i)
        times.append(_parse_time(r[0], i))
        vals = []
        for name, cell in zip(names, r[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse value {cell!r}", row=i, column=name) from None
            if not math.isfinite(v):
                raise ParseError("non-finite value", row=i, column=name)
            vals.append(v)
        values.append(vals)
    if not times:
        raise ParseError("no data rows", row=2)
    t = np.array(times)
    order = np.argsort(t, kind="stable")
    t = t[order]
    dup = np.flatnonzero(np.diff(t) == 0)
    if dup.size:
        raise DuplicateTime(f"duplicate timestamp {t[dup[0]]!r}", row=int(order[dup[0] + 1]) + 2, column="time")
    X = np.array(values)[order].T
    return TimeSeriesSet(names, t, X, unit)


def save_csv(ts: TimeSeriesSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + ts.names)
        for j in range(ts.D):
            w.writerow([repr(float(ts.t[j]))] + [repr(float(v)) for v in ts.X[:, j]])


# ---------------------------------------------------------------------------
# Standardization and metrics
# ---------------------------------------------------------------------------


def standardize(ts: TimeSeriesSet, mask=None):
    """Zero-mean, unit-variance series; statistics from ``mask`` columns if given.

    Returns the standardized set and the (N, 2) array of (mean, std).
    """
    ref = ts.X if mask is None else ts.X[:, np.asarray(mask, dtype=bool)]
    mean = ref.mean(axis=1)
    std = ref.std(axis=1)
    for name, s in zip(ts.names, std):
        if not s > 1e-12:
            raise ConstantSeries(f"series {name!r} is constant")
    scale = np.column_stack([mean, std])
    X = (ts.X - mean[:, None]) / std[:, None]
    return TimeSeriesSet(ts.names, ts.t, X, ts.unit, scale), scale


def destandardize(values, scale, n=None, variance: bool = False):
    """Map standardized values (one series ``n``, or all rows) back to data units."""
    values = np.asarray(values, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if n is None:
        mean, std = scale[:, 0:1], scale[:, 1:2]
    else:
        mean, std = scale[n, 0], scale[n, 1]
    return values * std**2 if variance else values * std + mean


def _check(*arrays):
    arrays = [np.asarray(a, dtype=float).ravel() for a in arrays]
    if len({a.size for a in arrays}) != 1:
        raise ValueError(f"shape mismatch: {[a.size for a in arrays]}")
    if arrays[0].size == 0:
        raise ValueError("empty input")
    return arrays


def rmse(pred, truth) -> float:
    p, y = _check(pred, truth)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def mnlp(pred_mean, pred_var, truth) -> float:
    """Mean negative log predictive density under independent Gaussians."""
    m, v, y = _check(pred_mean, pred_var, truth)
    if np.any(v <= 0):
        raise ValueError("predictive variances must be positive")
    return float(np.mean(0.5 * (LOG_2PI + np.log(v)) + 0.5 * (y - m) ** 2 / v))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """``{"series": [{"kernel": ..., "seed": ...}], "t": {"start", "end", "count"}}``."""

    series: list = field(default_factory=list)
    start: float = 0.0
    end: float = 1.0
    count: int = 100
    noise: float = 0.0
    names: list | None = None

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.count)

    @classmethod
    def from_dict(cls, d) -> "SynthSpec":
        tt = d.get("t", {})
        return cls(
            series=list(d["series"]),
            start=float(tt.get("start", 0.0)),
            end=float(tt.get("end", 1.0)),
            count=int(tt.get("count", 100)),
            noise=float(d.get("noise", 0.0)),
            names=d.get("names"),
        )

    def to_dict(self) -> dict:
        out = {"series": self.series, "t": {"start": self.start, "end": self.end, "count": self.count}}
        if self.noise:
            out["noise"] = self.noise
        if self.names:
            out["names"] = self.names
        return out

    @classmethod
    def load(cls, path) -> "SynthSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def synth_generate(kernels, t, seed=0, names=None, noise: float = 0.0, jitter: float = 1e-8) -> TimeSeriesSet:
    """One draw per kernel from ``N(0, K + noise^2 I + jitter I)``.

    ``kernels`` holds one entry per series: an :class:`AdditiveKernelSet`, a
    kernel string such as ``"LIN + LIN*SE"``, or a JSON kernel object. Series
    ``n`` uses the ``n``-th child of ``SeedSequence(seed)``, so adding series
    does not change earlier draws. ``seed`` may also be a list of per-series seeds.
    """
    t = np.asarray(t, dtype=float)
    D = t.size
    if isinstance(seed, (list, tuple)):
        seeds = [np.random.SeedSequence(s) for s in seed]
        if len(seeds) != len(kernels):
            raise ValueError("need one seed per series")
    else:
        seeds = np.random.SeedSequence(seed).spawn(len(kernels))
    X = np.empty((len(kernels), D))
    for n, (spec, ss) in enumerate(zip(kernels, seeds)):
        ks = kernel_from_json(spec, t) if not hasattr(spec, "grams") else spec
        G = sum(ks.grams(t)) + (noise**2 + jitter) * np.eye(D)
        L, _ = cholesky(G)
        X[n] = L @ np.random.default_rng(ss).standard_normal(D)
    names = names or [f"series{n + 1}" for n in range(len(kernels))]
    return TimeSeriesSet(names, t, X)


def generate_from_spec(spec: SynthSpec) -> TimeSeriesSet:
    t = spec.t
    kernels = [s["kernel"] for s in spec.series]
    seeds = [int(s.get("seed", i)) for i, s in enumerate(spec.series)]
    return synth_generate(kernels, t, seeds, spec.names, spec.noise)


# Three-series benchmark: shared trend and smoothness, different LIN weight,
# periodicity only in the third series. t is in years, 200 points.
BENCHMARK_KERNELS = (
    "LIN + SE",
    "LIN + LIN*SE",
    "LIN + LIN*SE + PER",
)


def benchmark_kernels(t):
    """Generators for the three-series benchmark with explicit, readable parameters."""
    lo, hi = float(t[0]), float(t[-1])
    mid = 0.5 * (lo + hi)
    span = hi - lo
    lin_strong = BaseKernel("LIN", (9.0 / span**2, lo))
    lin_weak = BaseKernel("LIN", (1.0 / span**2, lo))
    se = BaseKernel("SE", (1.0, span / 10))
    se_long = BaseKernel("SE", (1.0, span / 5))
    per = BaseKernel("PER", (1.0, 1.0, span / 10))
    lin_mid = BaseKernel("LIN", (4.0 / span**2, mid))
    return [
        AdditiveKernelSet((KernelExpr((lin_strong,)), KernelExpr((se,)))),
        AdditiveKernelSet((KernelExpr((lin_weak,)), KernelExpr((lin_mid, se_long)))),
        AdditiveKernelSet((KernelExpr((lin_weak,)), KernelExpr((lin_mid, se_long)), KernelExpr((per,)))),
    ]


def benchmark_data(seed=0, D: int = 200, noise: float = 0.1) -> TimeSeriesSet:
    t = np.linspace(0.0, 10.0, D)
    return synth_generate(benchmark_kernels(t), t, seed, ["series1", "series2", "series3"], noise)


def periodic_toy(seed=0, D: int = 100, noise: float = 0.1) -> TimeSeriesSet:
    """Two standardized draws from one default PER kernel (period ``span / 10``) on ``[0, 10]``."""
    t = np.linspace(0.0, 10.0, D)
    per = AdditiveKernelSet((KernelExpr((default_base("PER", t),)),))
    ts = synth_generate([per, per], t, seed, ["a", "b"], noise)
    return standardize(ts)[0]


__all__ = [
    "TimeSeriesSet",
    "Split",
    "trailing_split",
    "load_csv",
    "save_csv",
    "standardize",
    "destandardize",
    "rmse",
    "mnlp",
    "SynthSpec",
    "synth_generate",
    "generate_from_spec",
    "benchmark_kernels",
    "benchmark_data",
    "periodic_toy",
]
