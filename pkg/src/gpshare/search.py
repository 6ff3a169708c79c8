"""
Grammar-driven structure search over additive kernel sets.

Every element of the current set can be rewritten by a few grammar rules.
A rule acts on a sub-product ``T`` of the element's factors (all ``2^L``
subsets of its ``L`` factors), with ``P`` the remaining factors:

* ``times-base``    ``T -> T x B``           gives ``e x B``
* ``replace-base``  ``T -> B``               gives ``P x B``
* ``sum-base``      ``T -> T + B``           gives ``e`` and ``P x B`` as separate elements
* ``cp``            ``T -> CP(T, T)``        gives ``e`` masked left and right of a changepoint
* ``cw``            ``T -> CW(T, T)``        gives ``e`` masked inside and outside a window

Partial expansion (PE) rewrites one element at a time and refits the whole
set, which the latent models then thin out through their assignments. The
step is kept only when BIC improves.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from gpshare import gplfm, lkm
from gpshare.errors import AllPruned, NonFinite, NotPsd
from gpshare.kernels import (
    KINDS,
    AdditiveKernelSet,
    KernelExpr,
    default_base,
    default_mask,
)

RULES = ("times-base", "replace-base", "sum-base", "cp", "cw")
DEFAULT_RULES = ("times-base", "replace-base", "cp", "cw")
ACTIVE_THRESHOLD = 0.5


@dataclass
class SearchConfig:
    model: str = "lkm"
    max_depth: int = 4
    alphabet: tuple = KINDS
    rules: tuple = DEFAULT_RULES
    mode: str = "pe"  # or "fe"
    restarts: int = 5
    seed: int = 0
    jobs: int = 1
    max_set_size: int = 24
    prune_sweeps: int = 30
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        self.alphabet = tuple(k.upper() for k in self.alphabet)
        if not self.alphabet:
            raise ValueError("alphabet must be non-empty")
        bad = [k for k in self.alphabet if k not in KINDS]
        if bad:
            raise ValueError(f"unknown base kernels {bad}")
        self.rules = tuple(self.rules)
        bad = [r for r in self.rules if r not in RULES]
        if bad:
            raise ValueError(f"unknown rules {bad}; choose from {RULES}")
        if self.model not in ("gplfm", "lkm"):
            raise ValueError("model must be 'gplfm' or 'lkm'")
        if self.mode not in ("pe", "fe"):
            raise ValueError("mode must be 'pe' or 'fe'")

    def model_config(self):
        opts = dict(self.model_options)
        opts.setdefault("restarts", self.restarts)
        opts.setdefault("jobs", self.jobs)
        return gplfm.GplfmConfig(**opts) if self.model == "gplfm" else lkm.LkmConfig(**opts)


@dataclass
class SearchNode:
    kernel_set: AdditiveKernelSet
    fitted: object  # GplfmState or LkmState
    objective: float
    bic: float
    depth: int = 0
    parent: "SearchNode | None" = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "kernel_set": [str(e) for e in self.kernel_set],
            "objective": self.objective,
            "bic": self.bic,
            "depth": self.depth,
            "state": self.fitted.to_dict(),
        }


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------


def _product(factors, masks) -> KernelExpr:
    return KernelExpr(tuple(factors), tuple(masks))


def _per_subset(e: KernelExpr, rule: str, alphabet, t, rest) -> list:
    if rule == "times-base":
        return [_product(e.factors + (default_base(b, t),), e.masks) for b in alphabet]
    if rule == "replace-base":
        return [_product(rest + (default_base(b, t),), e.masks) for b in alphabet]
    if rule == "sum-base":
        out = []
        for b in alphabet:
            out += [e, _product(rest + (default_base(b, t),), e.masks)]
        return out
    if rule == "cp":
        return [_product(e.factors, e.masks + (default_mask(k, t),)) for k in ("CP-left", "CP-right")]
    if rule == "cw":
        return [_product(e.factors, e.masks + (default_mask(k, t),)) for k in ("CW-inside", "CW-outside")]
    raise ValueError(f"unknown rule {rule!r}")


def expand_element(e: KernelExpr, cfg: SearchConfig, t=None, dedup: bool = True) -> list:
    """Candidate elements produced by rewriting ``e``.

    With ``dedup=False`` the raw list is returned, one block per (rule,
    sub-product) pair. Otherwise candidates are canonicalized, duplicates
    (by structure) dropped, and ``e`` itself removed unless a sum rule keeps
    it as one of its separate terms.
    """
    t = np.linspace(0.0, 1.0, 11) if t is None else np.asarray(t, dtype=float)
    L = len(e.factors)
    raw = []
    for rule in cfg.rules:
        for r in range(L + 1):
            for chosen in itertools.combinations(range(L), r):
                rest = tuple(f for i, f in enumerate(e.factors) if i not in chosen)
                raw += _per_subset(e, rule, cfg.alphabet, t, rest)
    if not dedup:
        return raw
    keep_self = "sum-base" in cfg.rules
    seen = set() if keep_self else {e.structure()}
    out = []
    for c in raw:
        c = c.canonical()
        s = c.structure()
        if s not in seen:
            seen.add(s)
            out.append(c)
    return out


def elements_per_subset(rule: str, n_alphabet: int) -> int:
    return {"times-base": n_alphabet, "replace-base": n_alphabet, "sum-base": 2 * n_alphabet, "cp": 2, "cw": 2}[rule]


def candidate_count(n_factors: int, cfg: SearchConfig) -> int:
    """Size of ``expand_element(..., dedup=False)`` for an ``L``-factor element."""
    per = sum(elements_per_subset(r, len(cfg.alphabet)) for r in cfg.rules)
    return 2**n_factors * per


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def n_params(fitted) -> int:
    return fitted.kernels.n_params + fitted.N


def bic(objective: float, p: int, N: int, D: int) -> float:
    """``-2 objective + p log(N D)``; lower is better."""
    if not math.isfinite(objective):
        return math.inf
    return -2.0 * objective + p * math.log(N * D) if N * D > 0 else -2.0 * objective


def _fit(cfg: SearchConfig, X, t, kernels: AdditiveKernelSet, seed):
    mc = cfg.model_config()
    if cfg.model == "gplfm":
        return gplfm.fit(X, t, kernels, mc, seed=seed)
    return lkm.fit(X, t, kernels, mc, seed=seed)


def fit_node(cfg: SearchConfig, X, t, kernels: AdditiveKernelSet, seed, depth=0, parent=None) -> SearchNode:
    """Fit a kernel set; a failed fit yields a node with BIC = +inf."""
    try:
        res = _fit(cfg, X, t, kernels, seed)
    except (NonFinite, NotPsd, FloatingPointError, np.linalg.LinAlgError):
        return SearchNode(kernels, None, -math.inf, math.inf, depth, parent)
    N, D = X.shape
    return SearchNode(res.state.kernels, res.state, res.objective, bic(res.objective, n_params(res.state), N, D), depth, parent)


def _fallback(cfg, X, t, seed, depth, parent):
    return fit_node(cfg, X, t, AdditiveKernelSet((KernelExpr.of("WN", t=t),)), seed, depth, parent)


def prune_inactive(node: SearchNode, X, cfg: SearchConfig, threshold: float = ACTIVE_THRESHOLD) -> SearchNode:
    """Drop columns with ``max_n nu_nk < threshold`` and refit the assignments.

    Raises :class:`AllPruned` when nothing survives; its ``fallback``
    attribute carries a fitted single-WN node.
    """
    state = node.fitted
    nu = state.nu
    keep = [k for k in range(state.K) if nu[:, k].max() >= threshold]
    if len(keep) == state.K:
        return node
    t = state.t
    if not keep:
        err = AllPruned("every column fell below the activity threshold")
        err.fallback = _fallback(cfg, X, t, cfg.seed, node.depth, node.parent)
        raise err
    kernels = state.kernels.subset(keep)
    if cfg.model == "gplfm":
        sub = replace(
            state,
            nu=state.nu[:, keep],
            tau=state.tau[keep],
            m=state.m[keep],
            S=state.S[keep],
            kernels=kernels,
            logdet_S=None if state.logdet_S is None else state.logdet_S[keep],
        )
        res = gplfm.refit_assignments(sub, X, cfg.prune_sweeps)
    else:
        sub = replace(state, xi=state.xi[:, keep], tau=state.tau[keep], kernels=kernels)
        res = lkm.refit_assignments(sub)
    N, D = X.shape
    return SearchNode(kernels, res.state, res.objective, bic(res.objective, n_params(res.state), N, D), node.depth, node.parent)


def _prune(node, X, cfg):
    if node.fitted is None:
        return node
    try:
        return prune_inactive(node, X, cfg)
    except AllPruned as err:
        return err.fallback


class Trace:
    """JSON-lines search log: one record per scored candidate set."""

    def __init__(self):
        self.records = []

    def add(self, depth, element_index, kernel_set, bic_value, accepted):
        self.records.append(
            {
                "depth": depth,
                "element_index": element_index,
                "kernel_set": [str(e) for e in kernel_set],
                "bic": bic_value if math.isfinite(bic_value) else None,
                "accepted": bool(accepted),
            }
        )

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def _grow(base, extra, cfg) -> AdditiveKernelSet:
    merged = AdditiveKernelSet(tuple(base) + tuple(extra)).deduplicated()
    if len(merged) > cfg.max_set_size:
        merged = merged.subset(range(cfg.max_set_size))
    return merged


def partial_expansion_step(node: SearchNode, i: int, cfg: SearchConfig, X, t, seed=None, trace: Trace | None = None):
    """Replace element ``i`` by its expansions, refit, keep only if BIC drops.

    The candidate is pruned before scoring, so inactive columns do not pay a
    parameter penalty. Returns the new node, or ``node`` itself on rollback.
    """
    ks = node.kernel_set
    if not 0 <= i < len(ks):
        raise IndexError(f"element index {i} out of range for a set of {len(ks)}")
    others = [e for j, e in enumerate(ks) if j != i]
    cands = expand_element(ks[i], cfg, t)
    if not others and not cands:
        return node
    new_set = _grow(others, cands, cfg)
    seed = cfg.seed if seed is None else seed
    child = _prune(fit_node(cfg, X, t, new_set, seed, node.depth + 1, node), X, cfg)
    accepted = child.bic < node.bic
    if trace is not None:
        trace.add(node.depth + 1, i, new_set, child.bic, accepted)
    return child if accepted else node


def initial_node(X, t, cfg: SearchConfig) -> SearchNode:
    ks = AdditiveKernelSet(tuple(KernelExpr.of(k, t=t) for k in cfg.alphabet))
    node = fit_node(cfg, X, t, ks, cfg.seed)
    if node.fitted is None:
        return _fallback(cfg, X, t, cfg.seed, 0, None)
    return _prune(node, X, cfg)


def run_search(X, t, cfg: SearchConfig):
    """Returns ``(best node, trace)``. Deterministic for a fixed ``cfg.seed``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=float)
    trace = Trace()
    node = initial_node(X, t, cfg)
    trace.add(0, None, node.kernel_set, node.bic, True)
    rng = np.random.SeedSequence(cfg.seed)
    step_seeds = iter(int(s.generate_state(1)[0]) for s in rng.spawn(10_000))
    if cfg.mode == "fe":
        return _run_fe(node, X, t, cfg, trace, step_seeds)
    for depth in range(1, cfg.max_depth + 1):
        improved = False
        for structure in [e.structure() for e in node.kernel_set]:
            current = [e.structure() for e in node.kernel_set]
            if structure not in current:
                continue  # pruned away earlier in this round
            new = partial_expansion_step(node, current.index(structure), cfg, X, t, next(step_seeds), trace)
            if new is not node:
                improved = True
                node = replace(new, depth=depth)
        if not improved:
            break
    return node, trace


def _run_fe(node, X, t, cfg, trace, step_seeds):
    best = node
    for depth in range(1, cfg.max_depth + 1):
        cands = []
        for e in node.kernel_set:
            cands += expand_element(e, cfg, t)
        new_set = _grow(node.kernel_set, cands, cfg)
        child = fit_node(cfg, X, t, new_set, next(step_seeds), depth, node)
        if child.fitted is None:
            trace.add(depth, None, new_set, child.bic, False)
            break
        node = _prune(child, X, cfg)
        accepted = node.bic < best.bic
        trace.add(depth, None, new_set, node.bic, accepted)
        if accepted:
            best = node
    return best, trace
