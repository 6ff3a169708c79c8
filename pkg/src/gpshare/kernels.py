"""
Compositional kernel expressions.

A :class:`KernelExpr` is a product of base kernels, optionally multiplied by
change masks that localize it in time. Additive structure lives one level
up, in :class:`AdditiveKernelSet`, whose elements become the per-column
covariances of the latent models.

Parameters are stored in natural units; optimizers see the *free* vector,
where positive quantities are log-transformed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable

import numpy as np
from scipy import special

KINDS = ("WN", "C", "LIN", "SE", "PER")
PARAM_NAMES = {
    "WN": ("variance",),
    "C": ("variance",),
    "LIN": ("variance", "offset"),
    "SE": ("variance", "lengthscale"),
    "PER": ("variance", "lengthscale", "period"),
}
MASK_KINDS = ("CP-left", "CP-right", "CW-inside", "CW-outside")

_TWO_PI = 2.0 * math.pi


def _is_positive(name: str) -> bool:
    return name != "offset"


def _round_sig(v: float, digits: int = 6) -> float:
    if v == 0 or not math.isfinite(v):
        return v
    return round(v, digits - 1 - int(math.floor(math.log10(abs(v)))))


def _span(t):
    t = np.asarray(t, dtype=float)
    lo, hi = float(t.min()), float(t.max())
    rng = hi - lo if hi > lo else 1.0
    if t.size > 1:
        step = float(np.min(np.diff(np.sort(t))))
        step = step if step > 0 else rng / t.size
    else:
        step = rng
    return lo, hi, rng, step


# ---------------------------------------------------------------------------
# Base kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseKernel:
    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in PARAM_NAMES:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        names = PARAM_NAMES[self.kind]
        params = tuple(float(p) for p in self.params)
        if len(params) != len(names):
            raise ValueError(f"{self.kind} takes parameters {names}")
        for name, value in zip(names, params):
            if not math.isfinite(value) or (_is_positive(name) and value <= 0):
                raise ValueError(f"{self.kind}.{name} must be positive and finite, got {value}")
        object.__setattr__(self, "params", params)

    @property
    def names(self) -> tuple:
        return PARAM_NAMES[self.kind]

    def param(self, name: str) -> float:
        return self.params[self.names.index(name)]

    def free(self) -> np.ndarray:
        return np.array([math.log(v) if _is_positive(n) else v for n, v in zip(self.names, self.params)])

    def with_free(self, v) -> "BaseKernel":
        vals = [math.exp(x) if _is_positive(n) else float(x) for n, x in zip(self.names, v)]
        return BaseKernel(self.kind, tuple(vals))

    def matrix(self, t1, t2=None) -> np.ndarray:
        return self._eval(t1, t2, grad=False)[0]

    def matrix_grads(self, t1, t2=None):
        """Gram matrix and its derivatives with respect to each free parameter."""
        return self._eval(t1, t2, grad=True)

    def _eval(self, t1, t2, grad):
        t1 = np.asarray(t1, dtype=float)
        t2 = t1 if t2 is None else np.asarray(t2, dtype=float)
        x, y = t1[:, None], t2[None, :]
        p = self.params
        var = p[0]
        grads = []
        if self.kind == "WN":
            K = var * (x == y).astype(float)
            grads = [K]
        elif self.kind == "C":
            K = np.full((t1.size, t2.size), var)
            grads = [K]
        elif self.kind == "LIN":
            off = p[1]
            K = var * (x - off) * (y - off)
            if grad:
                grads = [K, -var * ((x - off) + (y - off))]
        elif self.kind == "SE":
            ell = p[1]
            r2 = (x - y) ** 2 / ell**2
            K = var * np.exp(-0.5 * r2)
            if grad:
                grads = [K, K * r2]
        else:  # PER
            ell, period = p[1], p[2]
            beta = 1.0 / ell**2
            phase = _TWO_PI * (x - y) / period
            c = np.cos(phase)
            E = np.exp(beta * (c - 1.0))
            e0 = special.i0e(beta)
            B = 1.0 - e0
            A = E - e0
            K = var * A / B
            if grad:
                de0 = special.i1e(beta) - e0
                dA = (c - 1.0) * E - de0
                dK_dbeta = var * (dA * B + A * de0) / B**2
                dK_dc = var * beta * E / B
                grads = [K, dK_dbeta * (-2.0 * beta), dK_dc * np.sin(phase) * phase]
        return K, grads

    def value(self, x: float, x2: float) -> float:
        return float(self.matrix([x], [x2])[0, 0])

    def log_mask(self) -> list:
        return [_is_positive(n) for n in self.names]

    def default_bounds(self, t) -> list:
        lo, hi, rng, step = _span(t)
        out = []
        for n in self.names:
            if n == "variance":
                out.append((math.log(1e-6), math.log(1e4)))
            elif n == "offset":
                out.append((lo - 10 * rng, hi + 10 * rng))
            elif n == "lengthscale" and self.kind == "SE":
                out.append((math.log(step / 4), math.log(20 * rng)))
            elif n == "lengthscale":  # PER, relative to period
                out.append((math.log(0.05), math.log(20.0)))
            else:  # period
                out.append((math.log(2 * step), math.log(2 * rng)))
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(zip(self.names, self.params))}

    @classmethod
    def from_dict(cls, d) -> "BaseKernel":
        kind = d["kind"]
        return cls(kind, tuple(d["params"][n] for n in PARAM_NAMES[kind]))

    def __str__(self):
        return self.kind


def default_base(kind: str, t) -> BaseKernel:
    """Deterministic data-scaled starting parameters (series assumed standardized)."""
    lo, hi, rng, step = _span(t)
    if kind == "WN":
        params = (0.1,)
    elif kind == "C":
        params = (1.0,)
    elif kind == "LIN":
        params = (1.0 / rng**2, 0.5 * (lo + hi))
    elif kind == "SE":
        params = (1.0, rng / 10)
    elif kind == "PER":
        params = (1.0, 1.0, rng / 10)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return BaseKernel(kind, params)


# ---------------------------------------------------------------------------
# Change masks
# ---------------------------------------------------------------------------


def _sigmoid_and_grads(t, loc, s):
    u = (loc - t) / s
    th = np.tanh(u)
    sig = 0.5 * (1.0 + th)
    dsig_du = 0.5 * (1.0 - th * th)
    return sig, dsig_du / s, -dsig_du * u


@dataclass(frozen=True)
class ChangeMask:
    """Rank-one multiplicative mask ``g(x) g(x')`` built from tanh sigmoids.

    ``CP-left`` keeps the kernel before the changepoint, ``CP-right`` after
    it. ``CW-inside`` keeps it between the two locations and ``CW-outside``
    everywhere else.
    """

    kind: str
    locations: tuple
    steepness: float

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        locs = tuple(float(v) for v in self.locations)
        need = 1 if self.kind.startswith("CP") else 2
        if len(locs) != need:
            raise ValueError(f"{self.kind} needs {need} location(s)")
        if need == 2 and not locs[0] < locs[1]:
            raise ValueError("change window needs location1 < location2")
        if not self.steepness > 0:
            raise ValueError("steepness must be positive")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "steepness", float(self.steepness))

    @property
    def n_free(self) -> int:
        return len(self.locations) + 1

    def free(self) -> np.ndarray:
        if len(self.locations) == 1:
            return np.array([self.locations[0], math.log(self.steepness)])
        l1, l2 = self.locations
        return np.array([l1, math.log(l2 - l1), math.log(self.steepness)])

    def with_free(self, v) -> "ChangeMask":
        if len(self.locations) == 1:
            return ChangeMask(self.kind, (float(v[0]),), math.exp(v[1]))
        l1 = float(v[0])
        return ChangeMask(self.kind, (l1, l1 + math.exp(v[1])), math.exp(v[2]))

    def profile(self, t, grad=False):
        """Per-point factor ``g(t)`` and, optionally, ``dg/dfree``."""
        t = np.asarray(t, dtype=float)
        s = self.steepness
        if len(self.locations) == 1:
            sig, d_loc, d_logs = _sigmoid_and_grads(t, self.locations[0], s)
            if self.kind == "CP-left":
                return sig, [d_loc, d_logs]
            return 1.0 - sig, [-d_loc, -d_logs]
        l1, l2 = self.locations
        s1, d1_loc, d1_logs = _sigmoid_and_grads(t, l1, s)
        s2, d2_loc, d2_logs = _sigmoid_and_grads(t, l2, s)
        w = (1.0 - s1) * s2
        # free params: l1, log(l2 - l1), log s; l2 moves with l1.
        dw_l1 = -d1_loc * s2 + (1.0 - s1) * d2_loc
        dw_logw = (1.0 - s1) * d2_loc * (l2 - l1)
        dw_logs = -d1_logs * s2 + (1.0 - s1) * d2_logs
        grads = [dw_l1, dw_logw, dw_logs]
        if self.kind == "CW-inside":
            return w, grads
        return 1.0 - w, [-g for g in grads]

    def matrix(self, t1, t2=None):
        g1, _ = self.profile(t1)
        g2 = g1 if t2 is None else self.profile(t2)[0]
        return np.outer(g1, g2)

    def matrix_grads(self, t):
        g, dg = self.profile(t, grad=True)
        M = np.outer(g, g)
        return M, [np.outer(d, g) + np.outer(g, d) for d in dg]

    def value(self, x: float, x2: float) -> float:
        return float(self.matrix([x], [x2])[0, 0])

    def log_mask(self) -> list:
        return [False] + [True] * (self.n_free - 1)

    def default_bounds(self, t) -> list:
        lo, hi, rng, step = _span(t)
        logs = (math.log(step / 4), math.log(rng))
        if len(self.locations) == 1:
            return [(lo, hi), logs]
        return [(lo, hi), (math.log(step), math.log(rng)), logs]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "locations": list(self.locations), "steepness": self.steepness}

    @classmethod
    def from_dict(cls, d) -> "ChangeMask":
        return cls(d["kind"], tuple(d["locations"]), d["steepness"])


def default_mask(kind: str, t) -> ChangeMask:
    lo, hi, rng, _ = _span(t)
    s = 0.1 * rng
    if kind.startswith("CP"):
        return ChangeMask(kind, (lo + 0.5 * rng,), s)
    return ChangeMask(kind, (lo + 0.4 * rng, lo + 0.6 * rng), s)


# ---------------------------------------------------------------------------
# Products and additive sets
# ---------------------------------------------------------------------------


def _factor_key(b: BaseKernel):
    return (KINDS.index(b.kind), tuple(_round_sig(p) for p in b.params))


def _mask_key(m: ChangeMask):
    return (MASK_KINDS.index(m.kind), tuple(_round_sig(v) for v in m.locations), _round_sig(m.steepness))


@dataclass(frozen=True)
class KernelExpr:
    """Product of base kernels times zero or more change masks."""

    factors: tuple
    masks: tuple = ()

    def __post_init__(self):
        factors = tuple(self.factors)
        if not factors:
            raise ValueError("a kernel expression needs at least one factor")
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "masks", tuple(self.masks))

    @classmethod
    def of(cls, *kinds, t=None, **kw) -> "KernelExpr":
        """Build from kind names with default parameters scaled to ``t``."""
        t = np.linspace(0.0, 1.0, 11) if t is None else t
        return cls(tuple(default_base(k, t) for k in kinds), **kw)

    @property
    def n_params(self) -> int:
        return sum(len(b.params) for b in self.factors) + sum(m.n_free for m in self.masks)

    def param_names(self) -> list:
        out = []
        for i, b in enumerate(self.factors):
            out += [f"{b.kind}{i}.{n}" for n in b.names]
        for j, m in enumerate(self.masks):
            locs = ["location"] if len(m.locations) == 1 else ["location", "log_width"]
            out += [f"{m.kind}{j}.{n}" for n in locs + ["steepness"]]
        return out

    def free(self) -> np.ndarray:
        parts = [b.free() for b in self.factors] + [m.free() for m in self.masks]
        return np.concatenate(parts)

    def with_free(self, v) -> "KernelExpr":
        v = np.asarray(v, dtype=float)
        factors, masks, i = [], [], 0
        for b in self.factors:
            n = len(b.params)
            factors.append(b.with_free(v[i:i + n]))
            i += n
        for m in self.masks:
            masks.append(m.with_free(v[i:i + m.n_free]))
            i += m.n_free
        return KernelExpr(tuple(factors), tuple(masks))

    def bounds(self, t) -> list:
        out = []
        for part in self.factors + self.masks:
            out += part.default_bounds(t)
        return out

    def log_mask(self) -> list:
        out = []
        for part in self.factors + self.masks:
            out += part.log_mask()
        return out

    def gram(self, t1, t2=None) -> np.ndarray:
        K = self.factors[0].matrix(t1, t2)
        for b in self.factors[1:]:
            K = K * b.matrix(t1, t2)
        for m in self.masks:
            K = K * m.matrix(t1, t2)
        return K

    def gram_gradient(self, t):
        """Gram matrix and ``[dK/dtheta_j]`` over the free parameters."""
        parts = [b.matrix_grads(t) for b in self.factors] + [m.matrix_grads(t) for m in self.masks]
        mats = [p[0] for p in parts]
        K = mats[0].copy()
        for M in mats[1:]:
            K *= M
        grads = []
        for i, (_, dms) in enumerate(parts):
            others = None
            for j, M in enumerate(mats):
                if j != i:
                    others = M.copy() if others is None else others * M
            for dM in dms:
                grads.append(dM if others is None else dM * others)
        return K, grads

    def value(self, x: float, x2: float) -> float:
        return float(self.gram([x], [x2])[0, 0])

    def canonical(self) -> "KernelExpr":
        return KernelExpr(tuple(sorted(self.factors, key=_factor_key)), tuple(sorted(self.masks, key=_mask_key)))

    def key(self) -> tuple:
        c = self.canonical()
        return (tuple(_factor_key(b) for b in c.factors), tuple(_mask_key(m) for m in c.masks))

    def structure(self) -> str:
        """Parameter-free canonical name, e.g. ``SE×PER`` or ``CP-left[LIN×SE]``."""
        c = self.canonical()
        body = "×".join(b.kind for b in c.factors)
        for m in c.masks:
            body = f"{m.kind}[{body}]"
        return body

    def kinds(self) -> list:
        return [b.kind for b in self.factors]

    def to_dict(self) -> dict:
        return {"factors": [b.to_dict() for b in self.factors], "masks": [m.to_dict() for m in self.masks]}

    @classmethod
    def from_dict(cls, d) -> "KernelExpr":
        return cls(
            tuple(BaseKernel.from_dict(b) for b in d["factors"]),
            tuple(ChangeMask.from_dict(m) for m in d.get("masks", [])),
        )

    def __str__(self):
        return self.structure()


def canonicalize(e: KernelExpr) -> KernelExpr:
    return e.canonical()


@dataclass(frozen=True)
class AdditiveKernelSet:
    """Ordered set of kernel expressions, one per latent column."""

    elements: tuple = field(default_factory=tuple)

    def __post_init__(self):
        els = tuple(self.elements)
        if not els:
            raise ValueError("an additive kernel set needs at least one element")
        object.__setattr__(self, "elements", els)

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    @property
    def n_params(self) -> int:
        return sum(e.n_params for e in self.elements)

    def free(self) -> np.ndarray:
        return np.concatenate([e.free() for e in self.elements])

    def with_free(self, v) -> "AdditiveKernelSet":
        out, i = [], 0
        for e in self.elements:
            out.append(e.with_free(v[i:i + e.n_params]))
            i += e.n_params
        return AdditiveKernelSet(tuple(out))

    def slices(self) -> list:
        out, i = [], 0
        for e in self.elements:
            out.append(slice(i, i + e.n_params))
            i += e.n_params
        return out

    def bounds(self, t) -> list:
        out = []
        for e in self.elements:
            out += e.bounds(t)
        return out

    def log_mask(self) -> list:
        out = []
        for e in self.elements:
            out += e.log_mask()
        return out

    def grams(self, t) -> list:
        return [e.gram(t) for e in self.elements]

    def perturbed(self, rng, t, scale: float = 0.5) -> "AdditiveKernelSet":
        """Random restart point: log-normal jitter on positive parameters
        (narrower on periods), Gaussian jitter (``0.2 * scale`` of the input
        range) on locations."""
        _, _, span, _ = _span(t)
        v = self.free()
        is_log = np.array(self.log_mask())
        # periods get a fifth of the log-scale jitter: the likelihood is
        # strongly multimodal in the period, so large moves land on harmonics
        is_period = np.array([n.endswith(".period") for e in self.elements for n in e.param_names()])
        width = np.where(is_log, np.where(is_period, 0.2 * scale, scale), 0.2 * scale * span)
        noise = rng.normal(size=v.size) * width
        lo, hi = np.array(self.bounds(t)).T
        return self.with_free(np.clip(v + noise, lo, hi))

    def subset(self, idx: Iterable[int]) -> "AdditiveKernelSet":
        return AdditiveKernelSet(tuple(self.elements[i] for i in idx))

    def deduplicated(self) -> "AdditiveKernelSet":
        """Keep the first element of each structure (parameters ignored)."""
        seen, out = set(), []
        for e in self.elements:
            k = e.structure()
            if k not in seen:
                seen.add(k)
                out.append(e.canonical())
        return AdditiveKernelSet(tuple(out))

    def to_list(self) -> list:
        return [e.to_dict() for e in self.elements]

    @classmethod
    def from_list(cls, items) -> "AdditiveKernelSet":
        return cls(tuple(KernelExpr.from_dict(d) for d in items))

    def __str__(self):
        return "{" + ", ".join(str(e) for e in self.elements) + "}"


_FACTOR = re.compile(r"^([A-Za-z]+)\s*(?:\((.*)\))?$")


def _split_top(text: str, sep: str) -> list:
    """Split on ``sep`` outside parentheses (so ``SE(1e+2, 1)`` stays whole)."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        depth += (ch == "(") - (ch == ")")
        if ch == sep and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    return parts + [cur]


def _parse_factor(text: str, t) -> BaseKernel:
    m = _FACTOR.match(text.strip())
    if not m:
        raise ValueError(f"cannot parse kernel factor {text!r}")
    kind = m.group(1).upper()
    if m.group(2) is None:
        return default_base(kind, np.linspace(0.0, 1.0, 11) if t is None else t)
    try:
        params = tuple(float(v) for v in m.group(2).split(","))
    except ValueError:
        raise ValueError(f"bad parameters in {text!r}") from None
    return BaseKernel(kind, params)


def parse_expr(text: str, t=None) -> KernelExpr:
    """Parse ``"LIN*SE"`` (or ``LIN×SE``). Bare kinds get default parameters
    scaled to ``t``; ``SE(1, 0.5)`` gives explicit ones in declaration order."""
    factors = [f for f in _split_top(text.replace("×", "*"), "*") if f.strip()]
    if not factors:
        raise ValueError(f"empty kernel expression {text!r}")
    return KernelExpr(tuple(_parse_factor(f, t) for f in factors))


def parse_sum(text: str, t=None) -> AdditiveKernelSet:
    """Parse ``"LIN + LIN*SE + PER"`` into one element per summand."""
    return AdditiveKernelSet(tuple(parse_expr(s, t) for s in _split_top(text, "+") if s.strip()))


def kernel_from_json(obj, t=None):
    """Accept a string, a single expression dict, or a list of either (a sum)."""
    if isinstance(obj, str):
        return parse_sum(obj, t)
    if isinstance(obj, dict):
        return AdditiveKernelSet((KernelExpr.from_dict(obj),))
    items = []
    for o in obj:
        items.extend(kernel_from_json(o, t).elements)
    return AdditiveKernelSet(tuple(items))


# ---------------------------------------------------------------------------
# Natural-language fragments
# ---------------------------------------------------------------------------


def _num(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return s if s not in ("", "-0") else "0"


def format_duration(v: float, unit: str = "years") -> str:
    """Render a length; year-valued inputs are stepped down to months/days/hours."""
    if unit != "years":
        return _with_unit(v, unit)
    if v >= 1:
        return _with_unit(v, "years")
    if v * 12 >= 1:
        return _with_unit(v * 12, "months")
    if v * 365.25 >= 1:
        return _with_unit(v * 365.25, "days")
    return _with_unit(v * 365.25 * 24, "hours")


def _with_unit(v: float, unit: str) -> str:
    text = _num(v)
    if text == "1" and unit.endswith("s"):
        unit = unit[:-1]
    return f"{text} {unit}"


def format_time(x: float, unit: str = "years") -> str:
    """Render a location on the input axis (``Oct 2006`` for fractional years)."""
    if unit != "years" or not 1 <= x < 10000:
        return _num(x)
    year = int(math.floor(x))
    day = (x - year) * 365.25
    d = date(year, 1, 1) + timedelta(days=min(int(day), 364))
    return d.strftime("%b %Y")


_POLY = {1: "linear", 2: "quadratic", 3: "cubic"}


def _mask_phrase(m: ChangeMask, unit: str) -> str:
    locs = [format_time(v, unit) for v in m.locations]
    if m.kind == "CP-left":
        return f"This component applies until {locs[0]}"
    if m.kind == "CP-right":
        return f"This component applies from {locs[0]} onwards"
    if m.kind == "CW-inside":
        return f"This component applies from {locs[0]} until {locs[1]}"
    return f"This component applies until {locs[0]} and from {locs[1]} onwards"


def describe(e: KernelExpr, posterior_slope_sign=None, unit: str = "years") -> str:
    """English description of one additive component.

    ``posterior_slope_sign`` decides between "increasing" and "decreasing"
    when the component is a pure linear function.
    """
    kinds = e.kinds()
    n_lin = kinds.count("LIN")
    ses = [b for b in e.factors if b.kind == "SE"]
    pers = [b for b in e.factors if b.kind == "PER"]
    amp = ""
    if n_lin == 1:
        amp = " with linearly varying amplitude"
    elif n_lin > 1:
        amp = f" with {_POLY.get(n_lin, 'polynomially')} varying amplitude"

    if "WN" in kinds:
        text = "uncorrelated noise" + amp
    elif pers:
        p = pers[0]
        lead = "approximately periodic" if ses else "periodic"
        text = f"{lead} with a period of {format_duration(p.param('period'), unit)}" + amp
        if ses:
            text += (
                f". Across periods the shape of this function varies smoothly with a typical "
                f"lengthscale of {format_duration(ses[0].param('lengthscale'), unit)}"
            )
    elif ses:
        ell = min(b.param("lengthscale") for b in ses)
        text = f"a smooth function with a typical lengthscale of {format_duration(ell, unit)}" + amp
    elif n_lin == 1:
        if posterior_slope_sign is None or posterior_slope_sign == 0:
            text = "a linear function"
        else:
            text = "linearly increasing" if posterior_slope_sign > 0 else "linearly decreasing"
    elif n_lin > 1:
        text = f"a {_POLY[n_lin]} polynomial" if n_lin in _POLY else f"a polynomial of degree {n_lin}"
    else:
        text = "constant"
    sentences = [f"This component is {text}"]
    sentences += [_mask_phrase(m, unit) for m in e.masks]
    return ". ".join(sentences) + "."
