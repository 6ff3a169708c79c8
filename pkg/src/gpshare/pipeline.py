"""
Model-agnostic glue: fitting, prediction, decomposition and held-out scoring.

Both models expose the same operations with slightly different signatures;
the helpers here dispatch on the state type so callers need not care.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gpshare import gplfm, lkm
from gpshare.data import TimeSeriesSet, destandardize, mnlp, rmse, standardize, trailing_split
from gpshare.kernels import AdditiveKernelSet, KernelExpr

MODELS = ("gplfm", "lkm")


def model_name(state) -> str:
    return "lkm" if isinstance(state, lkm.LkmState) else "gplfm"


def make_config(model: str, **opts):
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    return lkm.LkmConfig(**opts) if model == "lkm" else gplfm.GplfmConfig(**opts)


def fit_model(model: str, X, t, kernels: AdditiveKernelSet, seed=0, **opts):
    cfg = make_config(model, **opts)
    fit = lkm.fit if model == "lkm" else gplfm.fit
    return fit(X, t, kernels, cfg, seed=seed)


def predict(state, t_star, X=None):
    """Predictive means and variances, ``(N, len(t_star))`` each, standardized units."""
    t_star = np.asarray(t_star, dtype=float)
    means, variances = [], []
    for n in range(state.N):
        m, v = lkm.predict(state, t_star, n) if isinstance(state, lkm.LkmState) else gplfm.predict(state, t_star, n)
        means.append(m)
        variances.append(v)
    return np.array(means), np.array(variances)


def decompose(state, X, n: int):
    """Per-column posterior of series ``n``: hard active columns for gpLFM, all for LKM."""
    if isinstance(state, lkm.LkmState):
        return lkm.decompose(state, n, hard=True)
    return gplfm.decompose(state, X, n)


def save_state(state, path, extra=None):
    payload = {"model": model_name(state), "state": state.to_dict()}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_state(path):
    with open(path) as fh:
        payload = json.load(fh)
    cls = lkm.LkmState if payload["model"] == "lkm" else gplfm.GplfmState
    return cls.from_dict(payload["state"]), payload


@dataclass
class HoldoutResult:
    names: list
    t_test: np.ndarray
    truth: np.ndarray  # (N, T) original units
    mean: np.ndarray
    var: np.ndarray

    @property
    def rmse(self) -> list:
        return [rmse(m, y) for m, y in zip(self.mean, self.truth)]

    @property
    def mnlp(self) -> list:
        return [mnlp(m, v, y) for m, v, y in zip(self.mean, self.var, self.truth)]

    def to_dict(self) -> dict:
        return {"names": self.names, "rmse": self.rmse, "mnlp": self.mnlp}


def prepare(ts: TimeSeriesSet, test_fraction: float = 0.1):
    """Split off the trailing window and standardize using training statistics."""
    split = trailing_split(ts.D, test_fraction)
    train = ts.subset(np.flatnonzero(split.train_mask))
    train_std, scale = standardize(train)
    return train_std, ts.subset(np.flatnonzero(split.test_mask)), scale


def holdout(state, test: TimeSeriesSet, scale) -> HoldoutResult:
    """Score a fitted state (trained on standardized data) on raw test points."""
    mean, var = predict(state, test.t)
    return HoldoutResult(
        test.names,
        test.t,
        test.X,
        destandardize(mean, scale),
        destandardize(var, scale, variance=True),
    )


def white_noise_baseline(train_std: TimeSeriesSet, test: TimeSeriesSet, scale, model="lkm", seed=0) -> HoldoutResult:
    ks = AdditiveKernelSet((KernelExpr.of("WN", t=train_std.t),))
    res = fit_model(model, train_std.X, train_std.t, ks, seed=seed, restarts=1)
    return holdout(res.state, test, scale)
