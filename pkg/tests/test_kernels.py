import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special

from gpshare.kernels import (
    KINDS,
    MASK_KINDS,
    AdditiveKernelSet,
    BaseKernel,
    ChangeMask,
    KernelExpr,
    canonicalize,
    default_base,
    default_mask,
    describe,
    kernel_from_json,
    parse_sum,
)
from gpshare.numerics import check_gradient, cholesky


def per_oracle(x, y, var, ell, period):
    """Textbook form, evaluated without the scaled Bessel helpers."""
    b = 1 / ell**2
    num = np.exp(b * np.cos(2 * np.pi * (x - y) / period)) - special.i0(b)
    return var * num / (np.exp(b) - special.i0(b))


def test_base_values():
    assert BaseKernel("SE", (1.0, 1.0)).value(0.3, 0.3) == 1.0
    assert BaseKernel("C", (2.5,)).value(-4.0, 11.0) == 2.5
    assert BaseKernel("WN", (0.7,)).value(1.0, 1.0) == 0.7
    assert BaseKernel("WN", (0.7,)).value(1.0, 1.5) == 0.0
    assert BaseKernel("LIN", (2.0, 1.0)).value(3.0, 4.0) == pytest.approx(12.0)


@pytest.mark.parametrize("var,ell,period", [(1.0, 1.0, 1.0), (0.3, 0.4, 2.5), (4.0, 3.0, 0.7)])
def test_per_zero_lag_equals_variance(var, ell, period):
    k = BaseKernel("PER", (var, ell, period))
    assert k.value(1.2, 1.2) == pytest.approx(var, rel=1e-12)


def test_per_matches_unscaled_formula(rng):
    x, y = rng.uniform(0, 3, 20), rng.uniform(0, 3, 20)
    for var, ell, period in [(1.0, 1.0, 1.0), (0.5, 0.6, 0.8), (2.0, 2.0, 3.0)]:
        k = BaseKernel("PER", (var, ell, period))
        got = [k.value(a, b) for a, b in zip(x, y)]
        np.testing.assert_allclose(got, per_oracle(x, y, var, ell, period), rtol=1e-10, atol=1e-12)


def test_parameters_validated():
    with pytest.raises(ValueError):
        BaseKernel("SE", (-1.0, 1.0))
    with pytest.raises(ValueError):
        BaseKernel("SE", (1.0,))
    with pytest.raises(ValueError):
        BaseKernel("RQ", (1.0,))
    with pytest.raises(ValueError):
        ChangeMask("CW-inside", (2.0, 1.0), 0.1)


def test_mask_values():
    s = 0.3
    assert ChangeMask("CP-left", (1.0,), s).value(1.0, 1.0) == pytest.approx(0.25)
    assert ChangeMask("CP-left", (1.0,), s).value(1 - 10 * s, 1 - 10 * s) == pytest.approx(1.0, abs=1e-8)
    assert ChangeMask("CP-right", (1.0,), s).value(1 + 10 * s, 1 + 10 * s) == pytest.approx(1.0, abs=1e-8)
    inside = ChangeMask("CW-inside", (0.0, 10.0), 0.1)
    assert inside.value(5.0, 5.0) == pytest.approx(1.0, abs=1e-8)
    outside = ChangeMask("CW-outside", (0.0, 10.0), 0.1)
    assert outside.value(5.0, 5.0) == pytest.approx(0.0, abs=1e-8)
    assert outside.value(-3.0, 12.0) == pytest.approx(1.0, abs=1e-8)


def test_mask_range(rng):
    x = rng.uniform(-5, 5, 10_000)
    y = rng.uniform(-5, 5, 10_000)
    for kind in MASK_KINDS:
        m = default_mask(kind, np.linspace(-2, 2, 5))
        vals = np.diag(m.matrix(x[:100], y[:100]))
        assert np.all((vals >= 0) & (vals <= 1))
        g = m.profile(np.concatenate([x, y]))[0]
        assert np.all((g >= 0) & (g <= 1))


def test_gram_examples():
    t = np.array([0.0, 0.4, 1.3])
    np.testing.assert_array_equal(KernelExpr((BaseKernel("WN", (1.0,)),)).gram(t), np.eye(3))
    se = BaseKernel("SE", (1.0, 0.7))
    prod = KernelExpr((se, BaseKernel("C", (3.0,))))
    np.testing.assert_allclose(prod.gram(t), 3 * se.matrix(t))
    lin = BaseKernel("LIN", (1.0, 0.0))
    got = KernelExpr((lin, lin)).gram(np.array([0.0, 1.0, 2.0]))
    np.testing.assert_allclose(got, [[0, 0, 0], [0, 1, 4], [0, 4, 16]])


def test_gram_is_product_of_factor_grams(rng):
    t = np.sort(rng.uniform(0, 4, 9))
    e = KernelExpr(
        (BaseKernel("LIN", (0.5, 1.0)), BaseKernel("PER", (1.0, 0.8, 1.3)), BaseKernel("SE", (2.0, 1.1))),
        (ChangeMask("CP-right", (2.0,), 0.3),),
    )
    expected = np.ones((9, 9))
    for part in e.factors + e.masks:
        expected = expected * part.matrix(t)
    np.testing.assert_array_equal(e.gram(t), expected)


def test_gradient_simple_cases():
    t = np.linspace(0, 1, 4)
    K, (dK,) = KernelExpr((BaseKernel("C", (2.0,)),)).gram_gradient(t)
    np.testing.assert_allclose(dK, K)
    _, (dW,) = KernelExpr((BaseKernel("WN", (0.3,)),)).gram_gradient(t)
    np.testing.assert_allclose(dW, 0.3 * np.eye(4))


def _fd_gram_error(e, t):
    v0 = e.free()
    _, grads = e.gram_gradient(t)
    worst = 0.0
    h = 1e-6
    for j in range(v0.size):
        vp, vm = v0.copy(), v0.copy()
        vp[j] += h
        vm[j] -= h
        fd = (e.with_free(vp).gram(t) - e.with_free(vm).gram(t)) / (2 * h)
        worst = max(worst, np.linalg.norm(grads[j] - fd) / (np.linalg.norm(fd) + 1e-10))
    return worst


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_every_base_kind(kind, rng):
    t = np.sort(rng.uniform(0, 3, 6))
    e = KernelExpr((default_base(kind, t),))
    assert _fd_gram_error(e, t) < 1e-4


@pytest.mark.parametrize("kind", MASK_KINDS)
def test_gradient_every_mask(kind, rng):
    t = np.sort(rng.uniform(0, 3, 8))
    e = KernelExpr((BaseKernel("SE", (1.0, 0.8)),), (default_mask(kind, t),))
    assert _fd_gram_error(e, t) < 1e-4


def test_se_gradient_with_check_gradient(rng):
    t = rng.uniform(0, 2, 6)
    w = rng.standard_normal((6, 6))
    e = KernelExpr((BaseKernel("SE", (1.3, 0.6)),))

    def f(v):
        return float(np.sum(w * e.with_free(v).gram(t)))

    def g(v):
        _, grads = e.with_free(v).gram_gradient(t)
        return [np.sum(w * d) for d in grads]

    assert check_gradient(f, g, e.free()) < 1e-4


def test_canonical_order():
    se, per = BaseKernel("SE", (1.0, 1.0)), BaseKernel("PER", (1.0, 1.0, 1.0))
    assert str(KernelExpr((per, se))) == "SE×PER"
    assert canonicalize(KernelExpr((per, se))).factors == (se, per)
    short, long = BaseKernel("SE", (1.0, 0.5)), BaseKernel("SE", (1.0, 2.0))
    assert canonicalize(KernelExpr((long, short))).factors == (short, long)


def test_describe_phrases():
    assert "lengthscale of 1.8 years" in describe(KernelExpr((BaseKernel("SE", (1.0, 1.8)),)))
    assert "uncorrelated noise" in describe(KernelExpr((BaseKernel("WN", (1.0,)),)))
    lin = KernelExpr((BaseKernel("LIN", (1.0, 0.0)),))
    assert "linearly decreasing" in describe(lin, -1)
    assert "linearly increasing" in describe(lin, 1)
    assert "constant" in describe(KernelExpr((BaseKernel("C", (1.0,)),)))
    assert "period of 1 year." in describe(KernelExpr((BaseKernel("PER", (1.0, 1.0, 1.0)),)))
    masked = KernelExpr((BaseKernel("SE", (1.0, 1.0)),), (ChangeMask("CW-outside", (2006.75, 2008.5), 0.1),))
    assert "applies until Oct 2006 and from Jul 2008 onwards" in describe(masked)
    assert describe(masked) == describe(masked)


def test_parse_and_json_roundtrip():
    t = np.linspace(2000, 2010, 30)
    ks = parse_sum("LIN + LIN*SE + PER", t)
    assert [str(e) for e in ks] == ["LIN", "LIN×SE", "PER"]
    explicit = parse_sum("SE(2, 1e+1) × PER(1, 0.5, 0.25) + WN(0.3)")
    assert explicit[0].factors[0] == BaseKernel("SE", (2.0, 10.0))
    assert explicit[0].factors[1].params == (1.0, 0.5, 0.25)
    assert explicit[1].factors[0] == BaseKernel("WN", (0.3,))
    with pytest.raises(ValueError):
        parse_sum("SE(1, x)")
    masked = KernelExpr((BaseKernel("SE", (1 / 3, math.pi)),), (ChangeMask("CP-left", (2004.123456789,), 0.1),))
    text = json.dumps(masked.to_dict())
    back = KernelExpr.from_dict(json.loads(text))
    assert back == masked
    assert kernel_from_json([masked.to_dict(), "SE"], t)[0] == masked


def test_dedup_and_subset():
    t = np.linspace(0, 1, 5)
    ks = AdditiveKernelSet((KernelExpr.of("SE", t=t), KernelExpr.of("SE", "PER", t=t), KernelExpr.of("PER", "SE", t=t)))
    assert len(ks.deduplicated()) == 2
    assert [str(e) for e in ks.subset([2])] == ["SE×PER"]
    assert ks.with_free(ks.free()).free() == pytest.approx(ks.free())


factor_st = st.builds(
    lambda kind, a, b, c: BaseKernel(kind, (a, b, c)[: {"WN": 1, "C": 1, "LIN": 2, "SE": 2, "PER": 3}[kind]]),
    st.sampled_from(KINDS),
    st.floats(0.1, 3.0),
    st.floats(0.2, 3.0),
    st.floats(0.3, 3.0),
)
mask_st = st.builds(
    lambda kind, l1, w, s: ChangeMask(kind, (l1,) if kind.startswith("CP") else (l1, l1 + w), s),
    st.sampled_from(MASK_KINDS),
    st.floats(-1, 3),
    st.floats(0.1, 2),
    st.floats(0.05, 1),
)
expr_st = st.builds(KernelExpr, st.lists(factor_st, min_size=1, max_size=3).map(tuple), st.lists(mask_st, max_size=2).map(tuple))


@given(expr_st)
def test_canonicalize_idempotent(e):
    c = canonicalize(e)
    assert canonicalize(c) == c
    assert c.structure() == e.structure()


@given(expr_st, st.integers(2, 50), st.integers(0, 2**31 - 1))
def test_gram_psd(e, d, seed):
    t = np.sort(np.random.default_rng(seed).uniform(-1, 3, d))
    K = e.gram(t)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    cholesky(K)


@given(expr_st)
def test_json_roundtrip_exact(e):
    assert KernelExpr.from_dict(json.loads(json.dumps(e.to_dict()))) == e
