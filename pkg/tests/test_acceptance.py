"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest
from scipy import stats

from gpshare import gplfm, ibp, lkm, report, search
from gpshare.data import benchmark_data, periodic_toy
from gpshare.kernels import KINDS, AdditiveKernelSet, BaseKernel, ChangeMask, KernelExpr
from gpshare.numerics import check_gradient, count_factorizations
from gpshare.pipeline import holdout, prepare, white_noise_baseline

RESULTS = []


def verdict(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared helpers and independent oracles
# ---------------------------------------------------------------------------


def floored(G):
    return G + 1e-6 * np.mean(np.diag(G)) * np.eye(G.shape[0])


def random_base(rng, kind, span):
    u = lambda a, b: float(np.exp(rng.uniform(np.log(a), np.log(b))))
    if kind == "SE":
        return BaseKernel("SE", (u(0.3, 2), u(0.2, 1.5)))
    if kind == "PER":
        return BaseKernel("PER", (u(0.3, 2), u(0.5, 2), u(0.2, 0.8) * span))
    return BaseKernel("LIN", (u(0.1, 1), rng.uniform(-1, 0)))


def random_set(rng, K, span, kinds=("SE", "PER", "LIN")):
    return AdditiveKernelSet(tuple(KernelExpr((random_base(rng, kinds[rng.integers(len(kinds))], span),)) for _ in range(K)))


def joint_gaussian_loglik(Z, X, t, kernels, sigma):
    """log N(vec X; 0, Sigma) with Sigma built block by block from the feature priors."""
    N, D = X.shape
    Cs = [floored(e.gram(t)) for e in kernels]
    cov = np.zeros((N * D, N * D))
    for n, m in itertools.product(range(N), repeat=2):
        block = sum(Z[n, k] * Z[m, k] * Cs[k] for k in range(len(Cs)))
        if n == m:
            block = block + sigma**2 * np.eye(D)
        cov[n * D:(n + 1) * D, m * D:(m + 1) * D] = block
    return stats.multivariate_normal(np.zeros(N * D), cov).logpdf(X.ravel())


def lkm_state(X, t, ks, nu, sigma):
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore"):
        xi = np.log(nu) - np.log1p(-nu)
    K = nu.shape[1]
    tau = ibp.update_beta_params(ibp.IbpConfig(1.0, K), ibp.clamp_nu(nu))
    return lkm.LkmState(xi, tau, np.asarray(sigma, float), ks, t, X)


def random_lkm(rng, N, K, D):
    t = np.sort(rng.uniform(0, 2, D))
    X = rng.standard_normal((N, D))
    return lkm_state(X, t, random_set(rng, K, 2.0), rng.uniform(0.05, 0.95, (N, K)), rng.uniform(0.3, 1.2, N))


def enumerated_likelihood(state):
    grams = state.kernels.grams(state.t)
    total = 0.0
    for n in range(state.N):
        for z in itertools.product((0, 1), repeat=state.K):
            p = np.prod([v if zk else 1 - v for v, zk in zip(state.nu[n], z)])
            cov = state.sigma[n] ** 2 * np.eye(state.D) + sum(zk * G for zk, G in zip(z, grams))
            total += p * stats.multivariate_normal(np.zeros(state.D), cov).logpdf(state.X[n])
    return total


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_c01_exact_likelihood_matches_joint_gaussian():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        N, K, D = rng.integers(1, 5), rng.integers(1, 4), rng.integers(2, 9)
        t = np.sort(rng.uniform(0, 3, D))
        X = rng.standard_normal((N, D))
        ks = random_set(rng, K, 3.0)
        Z = rng.integers(0, 2, (N, K))
        sigma = rng.uniform(0.3, 1.5)
        worst = max(worst, rel(gplfm.exact_log_likelihood(Z, X, t, ks, sigma), joint_gaussian_loglik(Z, X, t, ks, sigma)))
    secs = time.perf_counter() - start
    verdict(1, worst < 1e-8 and secs < 30, f"max rel err {worst:.2e} over 100 instances in {secs:.1f}s")


def test_c02_padding_and_permutation():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        N, K, D = rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 7)
        t = np.sort(rng.uniform(0, 2, D))
        X = rng.standard_normal((N, D))
        ks = random_set(rng, K, 2.0)
        extra = random_set(rng, 1, 2.0)
        perm = list(rng.permutation(K))
        Z = rng.integers(0, 2, (N, K))
        sigma = rng.uniform(0.3, 1.2)
        base = gplfm.exact_log_likelihood(Z, X, t, ks, sigma)
        padded = gplfm.exact_log_likelihood(np.hstack([Z, np.zeros((N, 1), int)]), X, t, AdditiveKernelSet(tuple(ks) + tuple(extra)), sigma)
        permuted = gplfm.exact_log_likelihood(Z[:, perm], X, t, ks.subset(perm), sigma)
        worst = max(worst, rel(padded, base), rel(permuted, base))

        nu = rng.uniform(0.05, 0.95, (N, K))
        sig = rng.uniform(0.3, 1.2, N)
        s = lkm_state(X, t, ks, nu, sig)
        b = lkm.bounded_elbo(s)
        # a column with nu = 0 contributes nothing to the likelihood bound
        sp = lkm_state(X, t, AdditiveKernelSet(tuple(ks) + tuple(extra)), np.hstack([nu, np.zeros((N, 1))]), sig)
        sq = lkm.replace(s, xi=s.xi[:, perm], tau=s.tau[perm], kernels=ks.subset(perm))
        worst = max(worst, rel(lkm.bounded_elbo(sp).likelihood, b.likelihood), rel(lkm.bounded_elbo(sq).total, b.total))
    verdict(2, worst < 1e-8, f"max rel change {worst:.2e} over 50 instances, both models")


def test_c03_lkm_bound_below_enumeration():
    rng = np.random.default_rng(303)
    worst = -np.inf
    for _ in range(50):
        s = random_lkm(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 8)))
        worst = max(worst, lkm.bounded_elbo(s).likelihood - enumerated_likelihood(s))
    verdict(3, worst <= 1e-8, f"max (bound - exact) {worst:.3e} over 50 instances")


def test_c04_optimal_weights():
    rng = np.random.default_rng(404)
    worst = np.inf
    for _ in range(100):
        K = int(rng.integers(2, 7))
        a = np.exp(rng.uniform(-3, 3, K))
        w = lkm.optimal_weights(a)
        pts = rng.dirichlet(np.ones(K), 10_000)
        worst = min(worst, float(np.min(pts**2 @ a - np.sum(a * w**2))))
    verdict(4, worst >= -1e-9, f"min margin {worst:.3e} over 100 vectors x 1e4 simplex points")


def test_c05_factorization_count():
    rng = np.random.default_rng(505)
    rows = []
    for K in range(2, 7):
        N = 3
        s = random_lkm(rng, N, K, 6)
        with count_factorizations() as c:
            lkm.bounded_elbo(s)
        rows.append((K, c.count, N * K + N))
    ok = all(got == want for _, got, want in rows)
    verdict(5, ok, "counts " + ", ".join(f"K={K}: {got} (N*K+N={want}, N*2^K={3 * 2**K})" for K, got, want in rows))


def test_c06_coordinate_ascent_monotone():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(20):
        N, K, D = rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 10)
        t = np.sort(rng.uniform(0, 3, D))
        X = rng.standard_normal((N, D))
        ks = random_set(rng, K, 3.0)
        s = gplfm.init_state(X, t, ks, rng)
        cov = gplfm.Covariances(ks, t)
        last = gplfm.elbo(s, X, cov=cov).total
        for _ in range(100):
            s = gplfm.sweep(s, X, cov=cov)
            value = gplfm.elbo(s, X, cov=cov).total
            worst = max(worst, last - value)
            last = value
    verdict(6, worst <= 1e-8, f"largest per-sweep decrease {worst:.2e} over 20 instances x 100 sweeps")


def test_c07_periodic_toy():
    ts = periodic_toy(0)
    ks = AdditiveKernelSet((KernelExpr.of("PER", t=ts.t),) * 2)
    start = time.perf_counter()
    shared = distinct = 0
    for seed in range(10):
        nu = lkm.fit(ts.X, ts.t, ks, seed=seed).state.nu
        shared += any((nu[:, k] > 0.9).all() and (nu[:, 1 - k] < 0.1).all() for k in range(2))
        h = gplfm.fit(ts.X, ts.t, ks, seed=seed).state.hard
        distinct += bool(h[0].sum() == 1 and h[1].sum() == 1 and (h[0] != h[1]).any())
    secs = time.perf_counter() - start
    verdict(7, shared >= 8 and distinct >= 6 and secs < 300, f"LKM shared column {shared}/10, gpLFM distinct rows {distinct}/10, {secs:.0f}s")


POOL = [("SE",), ("PER",), ("WN",), ("C", "SE"), ("LIN", "SE"), ("SE", "PER"),
        ("SE", "CP-left"), ("SE", "CP-right"), ("SE", "CW-inside"), ("SE", "CW-outside")]


def _grad_base(kind, rng, t):
    span = t[-1] - t[0]
    u = lambda a, b: float(np.exp(rng.uniform(np.log(a), np.log(b))))
    if kind == "WN":
        return BaseKernel("WN", (u(0.1, 1),))
    if kind == "C":
        return BaseKernel("C", (u(0.3, 2),))
    if kind == "LIN":
        return BaseKernel("LIN", (u(0.05, 0.5), float(t[0] - rng.uniform(0.5, 2))))
    if kind == "SE":
        return BaseKernel("SE", (u(0.3, 2), u(0.8, 2.0)))
    return BaseKernel("PER", (u(0.3, 2), u(0.5, 2), u(0.3 * span, 0.8 * span)))


def _grad_mask(kind, rng, t):
    lo, span = t[0], t[-1] - t[0]
    s = rng.uniform(0.4, 0.8) * span
    if kind.startswith("CP"):
        return ChangeMask(kind, (lo + rng.uniform(0.3, 0.7) * span,), s)
    a = lo + rng.uniform(0.2, 0.4) * span
    return ChangeMask(kind, (a, a + rng.uniform(0.2, 0.4) * span), s)


def _grad_instance(seed, K=3, N=2, D=6):
    """Random point with lengthscales and mask slopes kept comparable to the spacing of ``t``."""
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.5, 1.0, D))
    elements = []
    for _ in range(K):
        p = POOL[rng.integers(len(POOL))]
        fs = tuple(_grad_base(k, rng, t) for k in p if "-" not in k)
        ms = tuple(_grad_mask(k, rng, t) for k in p if "-" in k)
        elements.append(KernelExpr(fs, ms))
    return rng, t, AdditiveKernelSet(tuple(elements)), rng.normal(size=(N, D)) * 1.5


def test_c08_gradients():
    worst = [0.0, 0.0]
    for seed in range(20):
        rng, t, ks, X = _grad_instance(seed)
        s = gplfm.sweep(gplfm.init_state(X, t, ks, rng), X)
        s = gplfm.unpack(s, np.concatenate([ks.free(), np.log(rng.uniform(0.3, 1, 2)), rng.normal(size=6)]))
        f = lambda v: gplfm.elbo(gplfm.unpack(s, v), X).total
        g = lambda v: gplfm.elbo_gradient(gplfm.unpack(s, v), X)
        worst[0] = max(worst[0], check_gradient(f, g, gplfm.pack(s)))
        ls = lkm.init_state(X, t, ks, rng, sigma=rng.uniform(0.3, 1, 2), xi_scale=1.0)
        f = lambda v: lkm.bounded_elbo(lkm.unpack(ls, v)).total
        g = lambda v: lkm.bounded_elbo_gradient(lkm.unpack(ls, v))
        worst[1] = max(worst[1], check_gradient(f, g, lkm.pack(ls)))
    verdict(8, max(worst) < 1e-4, f"max rel err gpLFM {worst[0]:.2e}, LKM {worst[1]:.2e} at 20 points each")


def test_c09_synthetic_benchmark():
    ts = benchmark_data(0)
    train, test, scale = prepare(ts)
    cfg = search.SearchConfig(model="gplfm", max_depth=2, alphabet=("SE", "LIN", "PER"), seed=0)
    start = time.perf_counter()
    node, trace = search.run_search(train.X, train.t, cfg)
    found = holdout(node.fitted, test, scale)
    base = white_noise_baseline(train, test, scale, model="gplfm")
    secs = time.perf_counter() - start
    init_bic = trace.records[0]["bic"]
    better = [a < b for a, b in zip(found.rmse, base.rmse)]
    detail = (
        f"RMSE {np.round(found.rmse, 3).tolist()} vs WN {np.round(base.rmse, 3).tolist()}; "
        f"BIC {node.bic:.1f} vs initial {init_bic:.1f}; {secs:.0f}s"
    )
    verdict(9, all(better) and node.bic < init_bic and secs < 900, detail)


def test_c10_candidate_counts():
    t = np.linspace(0, 1, 11)
    # one block per (rule, subset): times and replace give |A|, sum gives 2|A|,
    # cp and cw give their two halves; |A| = 5 and there are 2^L subsets
    hand = {1: 2 * (5 + 5 + 10 + 2 + 2), 2: 4 * (5 + 5 + 10 + 2 + 2)}
    cfg = search.SearchConfig(alphabet=KINDS, rules=search.RULES)
    got = {}
    for L, kinds in ((1, ("SE",)), (2, ("SE", "PER"))):
        got[L] = len(search.expand_element(KernelExpr.of(*kinds, t=t), cfg, t, dedup=False))
    verdict(10, got == hand, f"L=1: {got[1]} (hand {hand[1]}), L=2: {got[2]} (hand {hand[2]})")


def test_c11_report_determinism():
    ts = periodic_toy(0)
    ks = AdditiveKernelSet((KernelExpr.of("PER", t=ts.t), KernelExpr.of("SE", t=ts.t)))
    texts, worst = [], 0.0
    for _ in range(2):
        state = gplfm.fit(ts.X, ts.t, ks, gplfm.GplfmConfig(restarts=2), seed=3).state
        texts.append(report.render_markdown(report.build_components(state, ts)).encode())
        recs = report.export_plot_data(state, ts)
        for n, name in enumerate(ts.names):
            active = [k for k in range(state.K) if state.hard[n, k]]
            if not active:
                continue
            G = sum(state.kernels[k].gram(ts.t) for k in active)
            posterior = G @ np.linalg.solve(G + state.sigma[n] ** 2 * np.eye(ts.D), ts.X[n])
            worst = max(worst, float(np.max(np.abs(report.total_fit(recs, name) - posterior))))
    lstate = lkm.fit(ts.X, ts.t, ks, lkm.LkmConfig(restarts=2), seed=3).state
    recs = report.export_plot_data(lstate, ts)
    for n, name in enumerate(ts.names):
        mean, _ = lkm.predict(lstate, ts.t, n, hard=True)
        worst = max(worst, float(np.max(np.abs(report.total_fit(recs, name) - mean))))
    verdict(11, texts[0] == texts[1] and worst < 1e-6, f"identical bytes: {texts[0] == texts[1]}; max |sum - fit| {worst:.2e}")
