"""
Finite Beta-Bernoulli treatment of the Indian Buffet Process prior.

With ``K`` columns, ``pi_k ~ Beta(alpha/K, 1)`` and ``z_nk ~ Bernoulli(pi_k)``.
The variational family is ``q(pi_k) = Beta(tau_k1, tau_k2)`` and
``q(z_nk) = Bernoulli(nu_nk)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

NU_MIN = 1e-6
NU_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class IbpConfig:
    alpha: float = 1.0
    K: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.K < 1:
            raise ValueError("K must be at least 1")


def clamp_nu(nu):
    return np.clip(np.asarray(nu, dtype=float), NU_MIN, NU_MAX)


@dataclass(frozen=True)
class FeatureAssignment:
    """Variational Bernoulli means for the N x K assignment matrix."""

    nu: np.ndarray

    def __post_init__(self):
        nu = np.atleast_2d(np.asarray(self.nu, dtype=float))
        object.__setattr__(self, "nu", clamp_nu(nu))

    @property
    def hard(self) -> np.ndarray:
        return (self.nu >= 0.5).astype(int)

    @property
    def shape(self):
        return self.nu.shape


def _nu(fa):
    return fa.nu if isinstance(fa, FeatureAssignment) else clamp_nu(np.atleast_2d(fa))


def expected_log_pi(tau):
    """``E[log pi_k]`` and ``E[log(1 - pi_k)]`` under ``Beta(tau_k1, tau_k2)``."""
    tau = np.asarray(tau, dtype=float)
    a, b = tau[:, 0], tau[:, 1]
    dsum = special.digamma(a + b)
    return special.digamma(a) - dsum, special.digamma(b) - dsum


def expected_log_prior(cfg: IbpConfig, fa, tau) -> float:
    """``E_q[log p(pi)] + E_q[log p(Z | pi)]``."""
    nu = _nu(fa)
    r = cfg.alpha / cfg.K
    elog, elog1m = expected_log_pi(tau)
    prior_pi = np.sum(np.log(r) + (r - 1.0) * elog)
    prior_z = np.sum(nu * elog[None, :] + (1.0 - nu) * elog1m[None, :])
    return float(prior_pi + prior_z)


def update_beta_params(cfg: IbpConfig, fa) -> np.ndarray:
    """Conjugate coordinate update for ``q(pi)``; returns a (K, 2) array."""
    nu = _nu(fa)
    r = cfg.alpha / cfg.K
    return np.column_stack([r + nu.sum(axis=0), 1.0 + (1.0 - nu).sum(axis=0)])


def beta_entropy(tau) -> float:
    tau = np.asarray(tau, dtype=float)
    a, b = tau[:, 0], tau[:, 1]
    h = (
        special.betaln(a, b)
        - (a - 1.0) * special.digamma(a)
        - (b - 1.0) * special.digamma(b)
        + (a + b - 2.0) * special.digamma(a + b)
    )
    return float(np.sum(h))


def bernoulli_entropy(fa, tau=None) -> float:
    """Entropy of ``q(Z)``; adds the Beta entropies of ``q(pi)`` when ``tau`` is given."""
    nu = _nu(fa)
    h = float(np.sum(-special.xlogy(nu, nu) - special.xlogy(1.0 - nu, 1.0 - nu)))
    if tau is not None:
        h += beta_entropy(tau)
    return h


def nu_prior_entropy_grad(tau, nu):
    """d/d nu of prior + Bernoulli entropy with ``tau`` fixed (before the data term)."""
    elog, elog1m = expected_log_pi(tau)
    nu = np.asarray(nu, dtype=float)
    return (elog - elog1m)[None, :] - np.log(nu) + np.log1p(-nu)
