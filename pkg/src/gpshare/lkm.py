"""
Latent kernel model.

Each series is a GP draw whose kernel is a binary sum of shared kernels,
``x_n ~ N(0, D(z_n))`` with ``D(z_n) = sum_k z_nk C_k + sigma_n^2 I``.
The expected log-likelihood under ``q(Z)`` needs ``2^K`` solves per series,
so it is replaced by a lower bound with ``K + 1`` factorizations per series:

* data fit: ``-1/2 sum_k w_nk^2 a_nk`` with weights ``w_nk ∝ 1/a_nk`` and
  ``a_nk = nu x^T (C_k + s_nk I)^-1 x + (1 - nu) ||x||^2 / s_nk``;
* complexity: ``-1/2 log|2 pi (sum_k nu_nk C_k + sigma_n^2 I)|``.

The noise shares ``s_nk`` sum to ``sigma_n^2``. The default ``"weighted"``
split uses ``s_nk = sigma_n^2 nu_nk / sum_j nu_nj``; ``"uniform"`` uses
``sigma_n^2 / K_n`` with ``K_n`` the number of columns with ``nu_nk > 0``.
Under the uniform split two identical columns that are both switched on
score better than one, so shared structure gets duplicated; the weighted
split removes that incentive. Exactly-zero columns drop out either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.special import expit

from gpshare import ibp
from gpshare._parallel import child_seeds, pmap
from gpshare.errors import NonFinite, NotPsd
from gpshare.gplfm import Decomposition, FitResult
from gpshare.kernels import AdditiveKernelSet
from gpshare.numerics import (
    additive_conditional,
    chol_inverse,
    chol_solve,
    cholesky,
    logdet_from_chol,
)

LOG_2PI = math.log(2 * math.pi)
XI_BOUND = 13.8  # keeps sigmoid(xi) inside the IBP clamp [1e-6, 1 - 1e-6]
SIGMA_BOUNDS = (math.log(1e-3), math.log(10.0))


@dataclass
class LkmState:
    xi: np.ndarray  # (N, K) logits
    tau: np.ndarray  # (K, 2)
    sigma: np.ndarray  # (N,)
    kernels: AdditiveKernelSet
    t: np.ndarray  # (D,) training inputs
    X: np.ndarray  # (N, D) training data
    alpha: float = 1.0
    noise_split: str = "weighted"

    @property
    def nu(self) -> np.ndarray:
        return expit(self.xi)

    @property
    def N(self):
        return self.xi.shape[0]

    @property
    def K(self):
        return self.xi.shape[1]

    @property
    def D(self):
        return self.t.size

    @property
    def hard(self) -> np.ndarray:
        return (self.nu >= 0.5).astype(int)

    @property
    def ibp_config(self) -> ibp.IbpConfig:
        return ibp.IbpConfig(self.alpha, self.K)

    def to_dict(self) -> dict:
        return {
            "kernels": self.kernels.to_list(),
            "xi": self.xi.tolist(),
            "nu": self.nu.tolist(),
            "tau": self.tau.tolist(),
            "sigma": self.sigma.tolist(),
            "t": self.t.tolist(),
            "X": self.X.tolist(),
            "alpha": self.alpha,
            "noise_split": self.noise_split,
        }

    @classmethod
    def from_dict(cls, d) -> "LkmState":
        return cls(
            xi=np.array(d["xi"], dtype=float),
            tau=np.array(d["tau"], dtype=float),
            sigma=np.array(d["sigma"], dtype=float),
            kernels=AdditiveKernelSet.from_list(d["kernels"]),
            t=np.array(d["t"], dtype=float),
            X=np.array(d["X"], dtype=float),
            alpha=float(d.get("alpha", 1.0)),
            noise_split=d.get("noise_split", "weighted"),
        )


@dataclass(frozen=True)
class DataFitWeights:
    w: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class LkmBound:
    prior_z: float
    entropy: float
    data_fit: float
    complexity: float

    @property
    def likelihood(self) -> float:
        return self.data_fit + self.complexity

    @property
    def total(self) -> float:
        return self.prior_z + self.entropy + self.data_fit + self.complexity

    def to_dict(self) -> dict:
        return {
            "prior_z": self.prior_z,
            "entropy": self.entropy,
            "data_fit": self.data_fit,
            "complexity": self.complexity,
            "total": self.total,
        }


@dataclass
class LkmConfig:
    alpha: float = 1.0
    restarts: int = 5
    max_outer: int = 8
    warmup: int = 50
    maxiter: int = 150
    tol: float = 1e-5
    init_sigma: float | None = None
    xi_scale: float = 0.5
    perturb: float = 0.5
    learn_hyper: bool = True
    noise_split: str = "weighted"
    jobs: int = 1


def optimal_weights(a) -> np.ndarray:
    """Minimizer of ``sum_k a_k w_k^2`` on the simplex: ``w ∝ 1/a``."""
    inv = 1.0 / np.asarray(a, dtype=float)
    return inv / inv.sum(axis=-1, keepdims=True)


def _active_count(nu_row) -> int:
    return max(int(np.count_nonzero(nu_row > 0)), 1)


def noise_shares(nu_row, sigma2: float, split: str = "weighted"):
    """Per-column shares ``s_k`` of ``sigma^2`` (they sum to ``sigma^2``) and
    the Jacobian ``ds_k / dnu_j``. Columns with ``nu = 0`` get no share.

    ``uniform`` gives every column ``sigma^2 / K_n``. ``weighted`` gives
    ``sigma^2 nu_k / sum(nu)``, which equals ``sigma^2 / K_active`` for hard
    assignments and keeps the bound exact when a series uses one column.
    """
    nu_row = np.asarray(nu_row, dtype=float)
    on = nu_row > 0
    K = nu_row.size
    s = np.zeros(K)
    jac = np.zeros((K, K))
    if split == "uniform":
        s[on] = sigma2 / _active_count(nu_row)
    elif split == "weighted":
        total = nu_row[on].sum()
        if total > 0:
            s[on] = sigma2 * nu_row[on] / total
            idx = np.flatnonzero(on)
            jac[np.ix_(idx, idx)] = -s[idx][:, None] / total
            jac[idx, idx] += sigma2 / total
    else:
        raise ValueError(f"unknown noise split {split!r}")
    return s, jac


def compute_a(state: LkmState, X=None, t=None) -> np.ndarray:
    """``a_nk = nu x^T (C_k + s_nk I)^-1 x + (1 - nu) ||x||^2 / s_nk``; NaN where ``nu = 0``."""
    X = state.X if X is None else np.asarray(X, dtype=float)
    t = state.t if t is None else t
    grams = state.kernels.grams(t)
    nu = state.nu
    a = np.full(nu.shape, np.nan)
    D = X.shape[1]
    for n in range(state.N):
        s, _ = noise_shares(nu[n], state.sigma[n] ** 2, state.noise_split)
        xx = X[n] @ X[n]
        for k in range(state.K):
            if nu[n, k] <= 0:
                continue
            L, _ = cholesky(grams[k] + s[k] * np.eye(D))
            q = X[n] @ chol_solve(L, X[n])
            a[n, k] = nu[n, k] * q + (1 - nu[n, k]) * xx / s[k]
    return a


def data_fit_weights(state: LkmState, X=None, t=None) -> DataFitWeights:
    a = compute_a(state, X, t)
    w = np.zeros_like(a)
    for n in range(a.shape[0]):
        ok = np.isfinite(a[n])
        w[n, ok] = optimal_weights(a[n, ok])
    return DataFitWeights(w, a)


def _evaluate(state: LkmState, X, t, grad: bool):
    """Bound and (optionally) its gradient w.r.t. ``[xi, kernel free, log sigma]``."""
    X = np.asarray(X, dtype=float)
    N, D = X.shape
    K = state.K
    nu = state.nu
    eye = np.eye(D)
    if grad:
        gd = [e.gram_gradient(t) for e in state.kernels]
        grams = [g[0] for g in gd]
        dgrams = [g[1] for g in gd]
    else:
        grams = state.kernels.grams(t)
    slices = state.kernels.slices()
    g_nu = np.zeros((N, K))
    g_theta = np.zeros(state.kernels.n_params)
    g_logsig = np.zeros(N)
    fit_total = 0.0
    comp_total = 0.0
    for n in range(N):
        x = X[n]
        xx = x @ x
        s2 = state.sigma[n] ** 2
        s, jac = noise_shares(nu[n], s2, state.noise_split)
        cols = [k for k in range(K) if nu[n, k] > 0]
        a = np.empty(len(cols))
        qs, alphas = [], []
        for j, k in enumerate(cols):
            L, _ = cholesky(grams[k] + s[k] * eye)
            al = chol_solve(L, x)
            q = x @ al
            qs.append(q)
            alphas.append(al)
            a[j] = nu[n, k] * q + (1 - nu[n, k]) * xx / s[k]
        w = optimal_weights(a)
        fit_total += -0.5 * np.sum(w**2 * a)
        E = s2 * eye
        for k in cols:
            E = E + nu[n, k] * grams[k]
        LE, _ = cholesky(E)
        comp_total += -0.5 * (D * LOG_2PI + logdet_from_chol(LE))
        if not grad:
            continue
        Einv = chol_inverse(LE)
        c = -0.5 * w**2  # dfit/da, exact because w is optimal for a
        da_ds = np.zeros(K)
        for j, k in enumerate(cols):
            al = alphas[j]
            da_ds[k] = -nu[n, k] * (al @ al) - (1 - nu[n, k]) * xx / s[k] ** 2
            g_nu[n, k] += c[j] * (qs[j] - xx / s[k]) - 0.5 * np.sum(Einv * grams[k])
            for p, dK in zip(range(slices[k].start, slices[k].stop), dgrams[k]):
                g_theta[p] += c[j] * nu[n, k] * -(al @ dK @ al)
                g_theta[p] += -0.5 * nu[n, k] * np.sum(Einv * dK)
        cb = np.zeros(K)
        cb[cols] = c * da_ds[cols]
        g_nu[n] += cb @ jac
        g_logsig[n] += 2.0 * np.sum(cb * s) - s2 * np.trace(Einv)
    nu_c = ibp.clamp_nu(nu)
    prior_z = ibp.expected_log_prior(state.ibp_config, nu_c, state.tau)
    entropy = ibp.bernoulli_entropy(nu_c, state.tau)
    bound = LkmBound(float(prior_z), float(entropy), float(fit_total), float(comp_total))
    if not math.isfinite(bound.total):
        raise NonFinite("LKM bound is not finite")
    if not grad:
        return bound, None
    g_nu += ibp.nu_prior_entropy_grad(state.tau, nu_c)
    g_xi = g_nu * nu * (1 - nu)
    return bound, np.concatenate([g_xi.ravel(), g_theta, g_logsig])


def bounded_elbo(state: LkmState, X=None, t=None) -> LkmBound:
    """Lower bound on the LKM evidence; issues ``N*K + N`` factorizations."""
    X = state.X if X is None else X
    t = state.t if t is None else t
    return _evaluate(state, X, t, grad=False)[0]


def bounded_elbo_gradient(state: LkmState, X=None, t=None) -> np.ndarray:
    """Gradient of :func:`bounded_elbo` w.r.t. :func:`pack`, ``tau`` fixed.

    The weights are held at their optimum for the current ``a``; since they
    minimize the data-fit term, this is also the total derivative.
    """
    X = state.X if X is None else X
    t = state.t if t is None else t
    return _evaluate(state, X, t, grad=True)[1]


def pack(state: LkmState) -> np.ndarray:
    return np.concatenate([state.xi.ravel(), state.kernels.free(), np.log(state.sigma)])


def unpack(state: LkmState, v) -> LkmState:
    v = np.asarray(v, dtype=float)
    N, K = state.xi.shape
    P = state.kernels.n_params
    xi = v[:N * K].reshape(N, K)
    kernels = state.kernels.with_free(v[N * K:N * K + P])
    sigma = np.exp(v[N * K + P:])
    return replace(state, xi=xi, kernels=kernels, sigma=sigma)


def update_tau(state: LkmState) -> LkmState:
    return replace(state, tau=ibp.update_beta_params(state.ibp_config, ibp.clamp_nu(state.nu)))


def _bounds(state: LkmState):
    NK = state.xi.size
    kb = state.kernels.bounds(state.t)
    return [(-XI_BOUND, XI_BOUND)] * NK + kb + [SIGMA_BOUNDS] * state.N


def optimize_state(state: LkmState, maxiter: int = 150, learn_hyper: bool = True) -> LkmState:
    """L-BFGS-B ascent of the bound over logits, hyperparameters and noise."""
    bounds = _bounds(state)
    lo, hi = np.array(bounds).T
    x0 = np.clip(pack(state), lo, hi)
    if not learn_hyper:
        NK = state.xi.size
        P = state.kernels.n_params
        fixed = x0[NK:NK + P].copy()
        for i in range(NK, NK + P):
            bounds[i] = (fixed[i - NK], fixed[i - NK])

    def obj(v):
        try:
            b, g = _evaluate(unpack(state, v), state.X, state.t, grad=True)
        except (NotPsd, NonFinite, ValueError):
            return 1e30, np.zeros_like(v)
        return -b.total, -g

    res = optimize.minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter})
    f0 = obj(x0)[0]
    return unpack(state, res.x) if res.fun <= f0 else unpack(state, x0)


def init_state(
    X, t, kernels: AdditiveKernelSet, rng, alpha=1.0, sigma=None, xi_scale=0.5, noise_split="weighted"
) -> LkmState:
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    K = len(kernels)
    xi = rng.normal(0.0, xi_scale, size=(N, K))
    if sigma is None:
        sigma = 0.5 * np.maximum(np.std(X, axis=1), 1e-3)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (N,)).copy()
    nu = ibp.clamp_nu(expit(xi))
    tau = ibp.update_beta_params(ibp.IbpConfig(alpha, K), nu)
    return LkmState(xi, tau, sigma, kernels, np.asarray(t, dtype=float), X, alpha, noise_split)


def _run(state: LkmState, cfg: LkmConfig):
    trace = []
    state = update_tau(state)
    if cfg.warmup and cfg.learn_hyper:
        # settle assignments and noise before the hyperparameters move
        state = update_tau(optimize_state(state, cfg.warmup, learn_hyper=False))
    prev = bounded_elbo(state).total
    for i in range(cfg.max_outer):
        state = optimize_state(state, cfg.maxiter, cfg.learn_hyper)
        state = update_tau(state)
        value = bounded_elbo(state).total
        trace.append({"iteration": i, "objective": value})
        if abs(value - prev) < cfg.tol * (1 + abs(value)):
            break
        prev = value
    return state, trace


def _fit_one(args):
    X, t, kernels, cfg, seed, restart = args
    rng = np.random.default_rng(seed)
    if restart > 0 and cfg.perturb > 0:
        kernels = kernels.perturbed(rng, t, cfg.perturb)
    try:
        state = init_state(X, t, kernels, rng, cfg.alpha, cfg.init_sigma, cfg.xi_scale, cfg.noise_split)
        state, trace = _run(state, cfg)
        return FitResult(state, bounded_elbo(state), trace)
    except (NonFinite, NotPsd) as err:
        return err


def fit(X, t, kernels: AdditiveKernelSet, config: LkmConfig | None = None, seed=0) -> FitResult:
    """Best-of-restarts fit of the bound. Restart 0 keeps the given
    hyperparameters; later restarts jitter them."""
    cfg = config or LkmConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=float)
    if X.shape[1] != t.size:
        raise ValueError(f"X must be (N, {t.size}), got {X.shape}")
    seeds = child_seeds(seed, cfg.restarts)
    results = pmap(_fit_one, [(X, t, kernels, cfg, s, r) for r, s in enumerate(seeds)], cfg.jobs)
    good = [r for r in results if isinstance(r, FitResult)]
    if not good:
        raise results[-1]
    best = max(good, key=lambda r: r.objective)
    return FitResult(best.state, best.breakdown, best.trace, results)


def refit_assignments(state: LkmState, maxiter: int = 100) -> FitResult:
    """Re-optimize logits and noise with kernel hyperparameters frozen."""
    state = update_tau(state)
    state = optimize_state(state, maxiter, learn_hyper=False)
    state = update_tau(state)
    return FitResult(state, bounded_elbo(state), [])


def expected_kernel(state: LkmState, n: int, t1=None, t2=None, hard: bool = False) -> np.ndarray:
    t1 = state.t if t1 is None else t1
    weights = state.hard[n] if hard else state.nu[n]
    out = None
    for w, e in zip(weights, state.kernels):
        if w > 0:
            G = w * e.gram(t1, t2)
            out = G if out is None else out + G
    if out is None:
        out = np.zeros((np.size(t1), np.size(t1 if t2 is None else t2)))
    return out


def predict(state: LkmState, t_star, n: int, hard: bool = False):
    """GP prediction for series ``n`` under the expected kernel ``sum_k nu_nk C_k``."""
    t_star = np.asarray(t_star, dtype=float)
    s2 = state.sigma[n] ** 2
    Kn = expected_kernel(state, n, hard=hard)
    if not Kn.any():
        return np.zeros(t_star.size), np.full(t_star.size, s2)
    Ks = expected_kernel(state, n, t_star, state.t, hard=hard)
    kss = np.diag(expected_kernel(state, n, t_star, t_star, hard=hard))
    L, _ = cholesky(Kn + s2 * np.eye(state.D))
    mean = Ks @ chol_solve(L, state.X[n])
    var = kss - np.sum(Ks.T * chol_solve(L, Ks.T), axis=0) + s2
    return mean, np.maximum(var, 1e-12)


def decompose(state: LkmState, n: int, hard: bool = False) -> Decomposition:
    """Posterior of each additive part ``nu_nk C_k`` given ``x_n`` (all columns)."""
    weights = state.hard[n] if hard else state.nu[n]
    mats = state.kernels.grams(state.t)
    means, variances = additive_conditional(mats, list(weights), state.X[n], state.sigma[n] ** 2)
    return Decomposition(list(range(state.K)), means, variances)
