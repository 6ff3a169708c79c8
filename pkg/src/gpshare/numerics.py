"""
PSD linear algebra helpers shared by the model modules.

Every determinant and inverse in the models goes through :func:`cholesky`,
which escalates diagonal jitter relative to the mean diagonal until the
factorization succeeds. A process-wide counter records how many
factorizations were performed so callers can verify cost claims.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from gpshare.errors import NonFinite, NotPsd

# A pivot this small relative to the mean diagonal is treated as a failed
# factorization, so exactly singular inputs always receive jitter.
_MIN_PIVOT = 1e-13


@dataclass(frozen=True)
class JitterPolicy:
    """Relative jitter schedule: ``initial * mean(diag)`` growing by ``growth``."""

    initial: float = 1e-8
    growth: float = 10.0
    max: float = 1e-4

    def __post_init__(self):
        if not (0 < self.initial < self.max):
            raise ValueError("need 0 < initial < max")
        if self.growth <= 1:
            raise ValueError("growth must exceed 1")

    def schedule(self, scale: float):
        """Yield absolute jitter values, starting with zero."""
        yield 0.0
        j = self.initial
        while j <= self.max * (1 + 1e-12):
            yield j * scale
            j *= self.growth


DEFAULT_POLICY = JitterPolicy()


class _Counter(threading.local):
    def __init__(self):
        self.stack = []


_counter = _Counter()


@contextlib.contextmanager
def count_factorizations():
    """Count :func:`cholesky` calls made inside the ``with`` block.

    >>> with count_factorizations() as c:
    ...     _ = cholesky(np.eye(2))
    >>> c.count
    1
    """
    box = _FactorCount()
    _counter.stack.append(box)
    try:
        yield box
    finally:
        _counter.stack.remove(box)


class _FactorCount:
    def __init__(self):
        self.count = 0


def _as_square(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky(m, policy: JitterPolicy = DEFAULT_POLICY):
    """Lower Cholesky factor of ``m + jitter * I``.

    Returns
    -------
    L : ndarray
        Lower-triangular factor.
    jitter : float
        Absolute jitter that was added to the diagonal (0 if none).
    """
    m = _as_square(m)
    for box in _counter.stack:
        box.count += 1
    if not np.all(np.isfinite(m)):
        raise NotPsd("matrix has non-finite entries")
    d = np.diag(m)
    scale = float(np.mean(np.abs(d))) if d.size else 1.0
    if scale <= 0:
        scale = 1.0
    eye = np.eye(m.shape[0])
    for jitter in policy.schedule(scale):
        a = m + jitter * eye if jitter else m
        try:
            L = linalg.cholesky(a, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.min(np.diag(L)) ** 2 < _MIN_PIVOT * scale:
            continue
        return L, jitter
    raise NotPsd(f"cholesky failed at maximum jitter {policy.max * scale:.3g}")


def logdet_from_chol(L) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def logdet(m, policy: JitterPolicy = DEFAULT_POLICY) -> float:
    """log|m| via Cholesky; equals ``2 * sum(log(diag(L)))``."""
    L, _ = cholesky(m, policy)
    return logdet_from_chol(L)


def chol_solve(L, b):
    return linalg.cho_solve((L, True), b, check_finite=False)


def solve_psd(m, b, policy: JitterPolicy = DEFAULT_POLICY):
    """Solve ``m x = b`` for symmetric PSD ``m`` (vector or matrix ``b``)."""
    m = _as_square(m)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != m.shape[0]:
        raise ValueError(f"shape mismatch: {m.shape} vs {b.shape}")
    L, _ = cholesky(m, policy)
    return chol_solve(L, b)


def chol_inverse(L):
    return chol_solve(L, np.eye(L.shape[0]))


def check_gradient(f: Callable, grad: Callable, point, h: float = 1e-5) -> float:
    """Max relative error between ``grad(point)`` and central differences of ``f``.

    The error per coordinate is ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    x = np.array(point, dtype=float)
    analytic = np.asarray(grad(x), dtype=float).ravel()
    if analytic.size != x.size:
        raise ValueError("gradient has the wrong length")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / (abs(numeric) + 1e-12))
    return worst


def additive_conditional(mats, weights, x, noise_var, policy: JitterPolicy = DEFAULT_POLICY):
    """Posterior of each weighted additive part given their noisy sum.

    With ``x = sum_k f_k + eps``, ``f_k ~ N(0, w_k K_k)`` and
    ``eps ~ N(0, noise_var I)``, returns arrays ``means`` (K, D) and
    ``variances`` (K, D) of ``f_k | x``. The means add up to the posterior
    mean of the full signal.
    """
    x = np.asarray(x, dtype=float)
    D = x.size
    total = noise_var * np.eye(D)
    for w, K in zip(weights, mats):
        if w:
            total = total + w * K
    L, _ = cholesky(total, policy)
    alpha = chol_solve(L, x)
    means = np.zeros((len(mats), D))
    variances = np.zeros((len(mats), D))
    for k, (w, K) in enumerate(zip(weights, mats)):
        if not w:
            continue
        Kw = w * K
        means[k] = Kw @ alpha
        V = linalg.solve_triangular(L, Kw, lower=True, check_finite=False)
        variances[k] = np.maximum(np.diag(Kw) - np.sum(V * V, axis=0), 0.0)
    return means, variances
