"""
Latent GP feature model.

Each series is a binary combination of shared GP feature draws plus noise,
``x_n = sum_k z_nk f_k + eps_n`` with ``f_k ~ GP(0, C_k)``. Inference is
mean-field: ``q(Z) q(pi) prod_k N(f_k; m_k, S_k)``, fitted by closed-form
coordinate ascent, with kernel hyperparameters and noise levels updated
between sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, logit

from gpshare import ibp
from gpshare._parallel import child_seeds, pmap
from gpshare.errors import NoActiveComponent, NonFinite, NotPsd
from gpshare.kernels import AdditiveKernelSet
from gpshare.numerics import (
    additive_conditional,
    chol_inverse,
    chol_solve,
    cholesky,
    logdet_from_chol,
)

LOG_2PI = math.log(2 * math.pi)


@dataclass
class GplfmState:
    nu: np.ndarray  # (N, K)
    tau: np.ndarray  # (K, 2)
    m: np.ndarray  # (K, D)
    S: np.ndarray  # (K, D, D)
    sigma: np.ndarray  # (N,)
    kernels: AdditiveKernelSet
    t: np.ndarray  # (D,) training inputs
    alpha: float = 1.0
    # log|S_k|, recorded when S_k is built; recomputed by Cholesky when absent.
    # S_k inherits the near-singularity of C_k, so a fresh factorization of
    # S_k would need jitter that the matching log|C_k| does not get.
    logdet_S: np.ndarray | None = None

    @property
    def N(self):
        return self.nu.shape[0]

    @property
    def K(self):
        return self.nu.shape[1]

    @property
    def D(self):
        return self.t.size

    @property
    def fa(self) -> ibp.FeatureAssignment:
        return ibp.FeatureAssignment(self.nu)

    @property
    def hard(self) -> np.ndarray:
        return self.fa.hard

    @property
    def ibp_config(self) -> ibp.IbpConfig:
        return ibp.IbpConfig(self.alpha, self.K)

    def to_dict(self) -> dict:
        return {
            "kernels": self.kernels.to_list(),
            "nu": self.nu.tolist(),
            "tau": self.tau.tolist(),
            "m": self.m.tolist(),
            "S": self.S.tolist(),
            "logdet_S": None if self.logdet_S is None else self.logdet_S.tolist(),
            "sigma": self.sigma.tolist(),
            "t": self.t.tolist(),
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d) -> "GplfmState":
        return cls(
            nu=np.array(d["nu"], dtype=float),
            tau=np.array(d["tau"], dtype=float),
            m=np.array(d["m"], dtype=float),
            S=np.array(d["S"], dtype=float),
            sigma=np.array(d["sigma"], dtype=float),
            kernels=AdditiveKernelSet.from_list(d["kernels"]),
            t=np.array(d["t"], dtype=float),
            alpha=float(d.get("alpha", 1.0)),
            logdet_S=None if d.get("logdet_S") is None else np.array(d["logdet_S"], dtype=float),
        )


@dataclass(frozen=True)
class ElboBreakdown:
    prior_z: float
    prior_f: float
    likelihood: float
    entropy: float

    @property
    def total(self) -> float:
        return self.prior_z + self.prior_f + self.likelihood + self.entropy

    def to_dict(self) -> dict:
        return {
            "prior_z": self.prior_z,
            "prior_f": self.prior_f,
            "likelihood": self.likelihood,
            "entropy": self.entropy,
            "total": self.total,
        }


@dataclass
class GplfmConfig:
    alpha: float = 1.0
    max_sweeps: int = 150
    tol: float = 1e-5
    restarts: int = 5
    hyper_every: int = 3
    hyper_maxiter: int = 15
    learn_hyper: bool = True
    learn_noise: bool = True
    init_sigma: float | None = None
    perturb: float = 0.5
    matched_init: bool = True  # restart 0 seeds features by matched_order
    jobs: int = 1


# Feature priors use C_k = K_k + FEATURE_JITTER * mean(diag K_k) * I. Periodic
# and linear grams are numerically low rank; without a floor the terms in
# C_k^-1 lose enough digits to break the monotone coordinate ascent.
FEATURE_JITTER = 1e-6


def _diag_scale(G) -> float:
    return float(np.mean(np.abs(np.diag(G)))) if G.size else 0.0


def prior_covariance(G):
    """Floored feature covariance and its Cholesky factor (extra jitter folded in)."""
    D = G.shape[0]
    C = G + FEATURE_JITTER * _diag_scale(G) * np.eye(D)
    L, jitter = cholesky(C)
    return (C + jitter * np.eye(D) if jitter else C), L


def _prior_covariance_grads(expr, t):
    G, dG = expr.gram_gradient(t)
    C, L = prior_covariance(G)
    eye = np.eye(G.shape[0])
    # the floor scales with the diagonal, so it moves with the parameters
    dC = [d + FEATURE_JITTER * float(np.mean(np.diag(d) * np.sign(np.diag(G)))) * eye for d in dG]
    return C, L, dC


class Covariances:
    """Floored training covariances ``C_k`` and their Cholesky factors."""

    def __init__(self, kernels: AdditiveKernelSet, t):
        self.C, self.L = [], []
        for e in kernels:
            C, L = prior_covariance(e.gram(t))
            self.C.append(C)
            self.L.append(L)


def _noise_quadratic(state: GplfmState, X):
    """Per-series expected squared residual ``E||x_n - z_n F||^2``."""
    nu, m = state.nu, state.m
    MM = m @ m.T
    cross = X @ m.T  # (N, K)
    trS = np.trace(state.S, axis1=1, axis2=2)
    diag = np.diag(MM)
    pair = np.einsum("nk,kl,nl->n", nu, MM, nu) - np.sum(nu**2 * diag, axis=1)
    return np.sum(X**2, axis=1) - 2 * np.sum(nu * cross, axis=1) + pair + nu @ (trS + diag)


def elbo(state: GplfmState, X, t=None, cov: Covariances | None = None) -> ElboBreakdown:
    X = np.asarray(X, dtype=float)
    t = state.t if t is None else t
    cov = Covariances(state.kernels, t) if cov is None else cov
    D = X.shape[1]
    prior_z = ibp.expected_log_prior(state.ibp_config, state.nu, state.tau)
    prior_f = 0.0
    ent_f = 0.0
    for k in range(state.K):
        L = cov.L[k]
        Sk, mk = state.S[k], state.m[k]
        CinvS = chol_solve(L, Sk)
        Cinvm = chol_solve(L, mk)
        prior_f += -0.5 * (D * LOG_2PI + logdet_from_chol(L) + np.trace(CinvS) + mk @ Cinvm)
        if state.logdet_S is not None:
            logdet_S = state.logdet_S[k]
        else:
            logdet_S = logdet_from_chol(cholesky(Sk)[0])
        ent_f += 0.5 * (D * (LOG_2PI + 1.0) + logdet_S)
    s2 = state.sigma**2
    Q = _noise_quadratic(state, X)
    lik = float(np.sum(-0.5 * D * (LOG_2PI + np.log(s2)) - 0.5 * Q / s2))
    ent = ibp.bernoulli_entropy(state.nu, state.tau) + ent_f
    out = ElboBreakdown(prior_z, float(prior_f), lik, float(ent))
    if not math.isfinite(out.total):
        raise NonFinite("gpLFM ELBO is not finite")
    return out


def _feature_stats(nu, m, s2, X, k):
    """Precision scale and linear term of the ``f_k`` block given the others."""
    w = nu[:, k] / s2
    others = nu @ m - np.outer(nu[:, k], m[k])  # (N, D): sum_{l != k} nu_nl m_l
    return float(np.sum(w)), w @ (X - others)


def _feature_posterior(L, prec, rhs):
    """Mean, covariance and log-determinant of ``q(f_k)``.

    ``S = (C^-1 + prec I)^-1 = L (I + prec L^T L)^-1 L^T``, kept PSD by
    construction, with ``log|S| = log|C| - log|I + prec L^T L|``.
    """
    D = L.shape[0]
    R, _ = cholesky(np.eye(D) + prec * (L.T @ L))
    A = linalg.solve_triangular(R, L.T, lower=True, check_finite=False)
    return A.T @ (A @ rhs), A.T @ A, logdet_from_chol(L) - logdet_from_chol(R)


def _logdets(state: GplfmState) -> np.ndarray:
    if state.logdet_S is not None:
        return state.logdet_S.copy()
    return np.array([logdet_from_chol(cholesky(Sk)[0]) for Sk in state.S])


def update_features(state: GplfmState, X, t=None, cov: Covariances | None = None) -> GplfmState:
    """Closed-form Gauss-Seidel update of every ``(m_k, S_k)``."""
    X = np.asarray(X, dtype=float)
    t = state.t if t is None else t
    cov = Covariances(state.kernels, t) if cov is None else cov
    nu, s2 = state.nu, state.sigma**2
    m, S = state.m.copy(), state.S.copy()
    ld = np.zeros(state.K)
    for k in range(state.K):
        prec, rhs = _feature_stats(nu, m, s2, X, k)
        m[k], S[k], ld[k] = _feature_posterior(cov.L[k], prec, rhs)
    return replace(state, m=m, S=S, logdet_S=ld)


def update_nu(state: GplfmState, X, t=None) -> GplfmState:
    X = np.asarray(X, dtype=float)
    nu = state.nu.copy()
    m, s2 = state.m, state.sigma**2
    elog, elog1m = ibp.expected_log_pi(state.tau)
    prior = elog - elog1m
    MM = m @ m.T
    cross = X @ m.T
    self_term = 0.5 * (np.trace(state.S, axis1=1, axis2=2) + np.diag(MM))
    for n in range(state.N):
        for k in range(state.K):
            other = nu[n] @ MM[:, k] - nu[n, k] * MM[k, k]
            z = prior[k] + (cross[n, k] - other - self_term[k]) / s2[n]
            nu[n, k] = expit(z)
        nu[n] = ibp.clamp_nu(nu[n])
    return replace(state, nu=nu)


def update_tau(state: GplfmState) -> GplfmState:
    return replace(state, tau=ibp.update_beta_params(state.ibp_config, state.nu))


def update_sigma(state: GplfmState, X, floor: float = 1e-3) -> GplfmState:
    """Exact maximizer ``sigma_n^2 = E||x_n - z_n F||^2 / D``."""
    Q = _noise_quadratic(state, np.asarray(X, dtype=float))
    D = state.D
    return replace(state, sigma=np.sqrt(np.maximum(Q / D, floor**2)))


def sweep(state: GplfmState, X, cov: Covariances | None = None) -> GplfmState:
    """One coordinate-ascent pass: features, assignments, Beta parameters."""
    cov = Covariances(state.kernels, state.t) if cov is None else cov
    state = update_features(state, X, cov=cov)
    state = update_nu(state, X)
    return update_tau(state)


def _prior_f_and_grad(expr, t, m, S, free):
    e = expr.with_free(free)
    _, L, dG = _prior_covariance_grads(e, t)
    D = t.size
    Cinv = chol_inverse(L)
    P = S + np.outer(m, m)
    CinvP = chol_solve(L, P)
    val = -0.5 * (D * LOG_2PI + logdet_from_chol(L) + np.trace(CinvP))
    W = 0.5 * (CinvP @ Cinv - Cinv)
    grad = np.array([np.sum(W * d) for d in dG])
    return val, grad


def _collapsed_f_and_grad(expr, t, prec, rhs, free):
    """``max_q`` of the ``f_k`` block as a function of the kernel parameters:
    ``1/2 r^T C (I + p C)^-1 r - 1/2 log|I + p C|``, with its gradient."""
    e = expr.with_free(free)
    C, _, dG = _prior_covariance_grads(e, t)
    D = t.size
    B = np.eye(D) + prec * C
    LB, _ = cholesky(B)
    beta = chol_solve(LB, rhs)
    val = 0.5 * (rhs @ rhs - rhs @ beta) / prec - 0.5 * logdet_from_chol(LB)
    Binv = chol_inverse(LB)
    grad = np.array([0.5 * (beta @ d @ beta) - 0.5 * prec * np.sum(Binv * d) for d in dG])
    return val, grad


def update_hyper(state: GplfmState, X, maxiter: int = 15) -> GplfmState:
    """Block update of each kernel's hyperparameters together with ``q(f_k)``.

    ``q(f_k)`` is maximized out analytically, so L-BFGS-B runs on the
    collapsed block objective and the ELBO cannot decrease. Unused features
    (zero precision) keep their hyperparameters.
    """
    X = np.asarray(X, dtype=float)
    t = state.t
    nu, s2 = state.nu, state.sigma**2
    m, S = state.m.copy(), state.S.copy()
    ld = _logdets(state)
    kernels = list(state.kernels)
    for k, e in enumerate(kernels):
        prec, rhs = _feature_stats(nu, m, s2, X, k)
        if prec < 1e-8:
            continue
        bounds = e.bounds(t)
        lo, hi = np.array(bounds).T
        x0 = np.clip(e.free(), lo, hi)

        def obj(v, e=e):
            try:
                val, g = _collapsed_f_and_grad(e, t, prec, rhs, v)
            except NotPsd:
                return 1e30, np.zeros_like(v)
            if not np.isfinite(val):
                return 1e30, np.zeros_like(v)
            return -val, -g

        f_old = obj(e.free())[0]
        res = optimize.minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter})
        if res.fun < f_old:
            kernels[k] = e.with_free(res.x)
        _, L = prior_covariance(kernels[k].gram(t))
        m[k], S[k], ld[k] = _feature_posterior(L, prec, rhs)
    return replace(state, kernels=AdditiveKernelSet(tuple(kernels)), m=m, S=S, logdet_S=ld)


# ---------------------------------------------------------------------------
# Gradients (used for verification; the fit loop uses closed forms)
# ---------------------------------------------------------------------------


def pack(state: GplfmState) -> np.ndarray:
    """Free vector ``[kernel free params, log sigma, logit nu]``."""
    return np.concatenate([state.kernels.free(), np.log(state.sigma), logit(state.nu).ravel()])


def unpack(state: GplfmState, v) -> GplfmState:
    P = state.kernels.n_params
    N, K = state.nu.shape
    kernels = state.kernels.with_free(v[:P])
    sigma = np.exp(v[P:P + N])
    nu = expit(np.asarray(v[P + N:]).reshape(N, K))
    return replace(state, kernels=kernels, sigma=sigma, nu=nu)


def elbo_gradient(state: GplfmState, X) -> np.ndarray:
    """Gradient of the ELBO with respect to :func:`pack` (m, S, tau held fixed)."""
    X = np.asarray(X, dtype=float)
    t = state.t
    grads = []
    for k, e in enumerate(state.kernels):
        _, g = _prior_f_and_grad(e, t, state.m[k], state.S[k], e.free())
        grads.append(g)
    s2 = state.sigma**2
    Q = _noise_quadratic(state, X)
    g_sigma = -state.D + Q / s2
    nu, m = state.nu, state.m
    MM = m @ m.T
    others = nu @ MM - nu * np.diag(MM)[None, :]
    data = (X @ m.T - others - 0.5 * (np.trace(state.S, axis1=1, axis2=2) + np.diag(MM))[None, :]) / s2[:, None]
    g_nu = ibp.nu_prior_entropy_grad(state.tau, nu) + data
    g_xi = g_nu * nu * (1 - nu)
    return np.concatenate(grads + [g_sigma, g_xi.ravel()])


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    state: object
    breakdown: object
    trace: list = field(default_factory=list)
    restarts: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.breakdown.total


def matched_order(X, t, kernels: AdditiveKernelSet, sigma) -> np.ndarray:
    """Series that seeds each feature: the assignment maximizing the summed
    single-series GP evidence, distinct series while they last."""
    X = np.asarray(X, dtype=float)
    N, D = X.shape
    cov = Covariances(kernels, t)
    K = len(kernels)
    score = np.empty((N, K))
    for k in range(K):
        for n in range(N):
            L, _ = cholesky(cov.C[k] + sigma[n] ** 2 * np.eye(D))
            a = chol_solve(L, X[n])
            score[n, k] = -0.5 * (X[n] @ a) - 0.5 * logdet_from_chol(L)
    order = np.empty(K, dtype=int)
    free = list(range(K))
    while free:
        # each round hands out at most N features, one per series
        rows, cols = optimize.linear_sum_assignment(-score[:, free])
        for r, c in zip(rows, cols):
            order[free[c]] = r
        free = [k for i, k in enumerate(free) if i not in set(cols)]
    return order


def init_state(X, t, kernels: AdditiveKernelSet, rng, alpha=1.0, sigma=None, matched=False) -> GplfmState:
    """Seed each feature with the GP posterior of one series, then set ``nu``
    from those features.

    Series are distinct while they last: chosen at random, or by
    :func:`matched_order` when ``matched``. Starting every feature from the
    data mean, as a flat ``nu`` would, tends to strand series whose
    realization differs from the mean.
    """
    X = np.asarray(X, dtype=float)
    N, D = X.shape
    K = len(kernels)
    if sigma is None:
        sigma = 0.5 * np.maximum(np.std(X, axis=1), 1e-3)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (N,)).copy()
    cov = Covariances(kernels, t)
    if matched:
        order = matched_order(X, t, kernels, sigma)
    else:
        order = np.concatenate([rng.permutation(N) for _ in range(K // N + 1)])[:K]
    m = np.zeros((K, D))
    S = np.zeros((K, D, D))
    ld = np.zeros(K)
    for k, n in enumerate(order):
        s2 = sigma[n] ** 2
        m[k], S[k], ld[k] = _feature_posterior(cov.L[k], 1.0 / s2, X[n] / s2)
    nu = ibp.clamp_nu(np.full((N, K), 0.5))
    state = GplfmState(
        nu=nu,
        tau=ibp.update_beta_params(ibp.IbpConfig(alpha, K), nu),
        m=m,
        S=S,
        sigma=sigma,
        kernels=kernels,
        t=np.asarray(t, dtype=float),
        alpha=alpha,
        logdet_S=ld,
    )
    return update_tau(update_nu(state, X))


def _fit_one(args):
    X, t, kernels, cfg, seed, restart = args
    rng = np.random.default_rng(seed)
    if restart > 0 and cfg.perturb > 0:
        kernels = kernels.perturbed(rng, t, cfg.perturb)
    try:
        state = init_state(X, t, kernels, rng, cfg.alpha, cfg.init_sigma, matched=restart == 0 and cfg.matched_init)
        cov = Covariances(state.kernels, t)
        trace = []
        last = elbo(state, X, cov=cov).total
        cycle_start = last
        for i in range(cfg.max_sweeps):
            state = sweep(state, X, cov=cov)
            value = elbo(state, X, cov=cov).total
            trace.append({"sweep": i, "step": "sweep", "elbo": value})
            if (i + 1) % cfg.hyper_every == 0:
                if cfg.learn_noise:
                    state = update_sigma(state, X)
                if cfg.learn_hyper:
                    state = update_hyper(state, X, cfg.hyper_maxiter)
                    cov = Covariances(state.kernels, t)
                if cfg.learn_noise or cfg.learn_hyper:
                    value = elbo(state, X, cov=cov).total
                    trace.append({"sweep": i, "step": "hyper", "elbo": value})
                if abs(value - cycle_start) < cfg.tol:
                    break
                cycle_start = value
            elif not (cfg.learn_hyper or cfg.learn_noise) and abs(value - last) < cfg.tol:
                break
            last = value
        return FitResult(state, elbo(state, X, cov=cov), trace)
    except (NonFinite, NotPsd) as err:
        return err


def fit(X, t, kernels: AdditiveKernelSet, config: GplfmConfig | None = None, seed=0) -> FitResult:
    """Best-of-restarts variational fit. Restart 0 starts from the given
    hyperparameters; later restarts jitter them."""
    cfg = config or GplfmConfig()
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    if X.ndim != 2 or X.shape[1] != t.size:
        raise ValueError(f"X must be (N, {t.size}), got {X.shape}")
    if X.shape[1] < 2:
        raise ValueError("need at least two time points")
    seeds = child_seeds(seed, cfg.restarts)
    results = pmap(_fit_one, [(X, t, kernels, cfg, s, r) for r, s in enumerate(seeds)], cfg.jobs)
    good = [r for r in results if isinstance(r, FitResult)]
    if not good:
        raise results[-1]
    best = max(good, key=lambda r: r.objective)
    return FitResult(best.state, best.breakdown, best.trace, results)


def refit_assignments(state: GplfmState, X, sweeps: int = 30) -> FitResult:
    """Coordinate sweeps with hyperparameters frozen (used after pruning)."""
    cov = Covariances(state.kernels, state.t)
    state = update_tau(update_features(state, X, cov=cov))
    trace = []
    for i in range(sweeps):
        state = sweep(state, X, cov=cov)
        trace.append({"sweep": i, "step": "sweep", "elbo": elbo(state, X, cov=cov).total})
    return FitResult(state, elbo(state, X, cov=cov), trace)


# ---------------------------------------------------------------------------
# Exact likelihood, prediction, decomposition
# ---------------------------------------------------------------------------


def exact_log_likelihood(Z, X, t, kernels: AdditiveKernelSet, sigma: float) -> float:
    """``log p(X | Z)`` with the features integrated out, for a shared noise level.

    Evaluated through the ``KD x KD`` precision
    ``Z^T Z (x) I + sigma^2 (+)_k C_k^-1``; intended for small K and D.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, D = X.shape
    K = Z.shape[1]
    cov = Covariances(kernels, t)
    s2 = float(sigma) ** 2
    Cinv = np.zeros((K * D, K * D))
    logdet_C = 0.0
    for k in range(K):
        Cinv[k * D:(k + 1) * D, k * D:(k + 1) * D] = chol_inverse(cov.L[k])
        logdet_C += logdet_from_chol(cov.L[k])
    M = np.kron(Z.T @ Z, np.eye(D)) + s2 * Cinv
    LM, _ = cholesky(0.5 * (M + M.T))
    v = (X.T @ Z).T.ravel()  # vec(X^T Z): column k is sum_n z_nk x_n
    quad = v @ chol_solve(LM, v)
    return float(
        -0.5 * N * D * LOG_2PI
        + (K * D - N * D) * 0.5 * math.log(s2)
        - 0.5 * (logdet_from_chol(LM) + logdet_C)
        + (quad - np.sum(X**2)) / (2 * s2)
    )


def predict(state: GplfmState, t_star, n: int):
    """Predictive mean and variance of series ``n`` at ``t_star``."""
    t_star = np.asarray(t_star, dtype=float)
    cov = Covariances(state.kernels, state.t)
    mean = np.zeros(t_star.size)
    var = np.full(t_star.size, state.sigma[n] ** 2)
    for k, e in enumerate(state.kernels):
        w = state.nu[n, k]
        Ks = e.gram(t_star, state.t)
        kss = np.diag(e.gram(t_star))
        L = cov.L[k]
        B = chol_solve(L, Ks.T)  # C^-1 K(T, *)
        mean += w * (B.T @ state.m[k])
        reduction = np.sum(Ks.T * B, axis=0)
        spread = np.sum(B * (state.S[k] @ B), axis=0)
        var += w * (kss - reduction + spread)
    return mean, np.maximum(var, 1e-12)


@dataclass
class Decomposition:
    columns: list
    means: np.ndarray
    variances: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.means.sum(axis=0)


def decompose(state: GplfmState, X, n: int) -> Decomposition:
    """Posterior of each active feature of series ``n`` given ``x_n``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    active = [k for k in range(state.K) if state.hard[n, k]]
    if not active:
        raise NoActiveComponent(f"series {n} has no active column")
    mats = [state.kernels[k].gram(state.t) for k in active]
    means, variances = additive_conditional(mats, [1.0] * len(active), X[n], state.sigma[n] ** 2)
    return Decomposition(active, means, variances)
