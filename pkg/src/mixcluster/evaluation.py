"""Likelihoods, information criteria, partition agreement and convergence checks."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import linalg
from scipy.special import logit, logsumexp
from sklearn.metrics import adjusted_rand_score
from sklearn.metrics.cluster import contingency_matrix

from .data import MixedDataset
from .model import Structure, category_codes, log_component_densities


class DiagnosticError(ArithmeticError):
    pass


class MixtureParams(Protocol):
    structure: Structure
    tau: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    theta: list


@dataclass
class Params:
    """Plain parameter bundle for likelihood evaluation."""

    structure: Structure
    tau: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    theta: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# likelihoods


def _log_joint(ds: MixedDataset, params: MixtureParams, x=None) -> np.ndarray:
    """log(tau_g f_g(x_i)), shape (n, G)."""
    x = np.asarray(ds.continuous if x is None else x, dtype=float)
    with np.errstate(divide="ignore"):
        log_tau = np.log(np.asarray(params.tau, dtype=float))
    return log_tau + log_component_densities(
        params.structure, x, category_codes(ds), np.asarray(params.mu), params.sigma, params.theta
    )


def observed_loglik(ds: MixedDataset, params: MixtureParams, x=None) -> float:
    """sum_i log sum_g tau_g f_g(x_i).

    ``x`` is the continuous block to evaluate (e.g. with posterior-mean
    imputations); by default censored cells sit at their bounds.
    """
    return float(logsumexp(_log_joint(ds, params, x), axis=1).sum())


def complete_loglik(ds: MixedDataset, params: MixtureParams, z, x=None) -> float:
    """sum_i log(tau_{z_i} f_{z_i}(x_i)) for hard labels ``z`` (0-based)."""
    lj = _log_joint(ds, params, x)
    z = np.asarray(z, dtype=np.int64)
    return float(lj[np.arange(lj.shape[0]), z].sum())


def degrees_of_freedom(structure, G: int, q: int, levels: Sequence[int]) -> int:
    """Free-parameter count of a G-cluster mixture."""
    structure = Structure.parse(structure)
    cat = sum(int(lm) - 1 for lm in levels)
    if structure is Structure.EEI:
        return (G - 1) + q + G * (q + cat)
    if structure is Structure.EEE:
        return (G - 1) + q * (q + 1) // 2 + G * (q + cat)
    return (G - 1) + G * (q + q * (q + 1) // 2 + cat)


def entropy_term(prob) -> float:
    """-sum_ig p_ig log p_ig, with 0 log 0 = 0."""
    prob = np.asarray(prob, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(prob > 0, prob * np.log(prob), 0.0)
    return float(-terms.sum())


def bic(loglik_observed: float, dof: int, n: int) -> float:
    return -2.0 * loglik_observed + dof * math.log(n)


def icl(bic_value: float, prob) -> float:
    return bic_value + entropy_term(prob)


@dataclass
class ModelScore:
    G: int
    structure: Structure
    loglik_observed: float
    loglik_complete: float
    dof: int
    bic: float
    icl: float
    entropy_term: float
    failed: bool = False
    failure: str = ""


def score_model(ds: MixedDataset, result, *, x=None) -> ModelScore:
    """BIC/ICL of a summarized fit (``result`` needs params, posterior_probs, z_hat)."""
    x = getattr(result, "x_plugin", None) if x is None else x
    ll = observed_loglik(ds, result, x)
    lc = complete_loglik(ds, result, result.z_hat, x)
    G = int(np.asarray(result.tau).size)
    dof = degrees_of_freedom(result.structure, G, ds.q, ds.levels)
    b = bic(ll, dof, ds.n)
    ent = entropy_term(result.posterior_probs)
    return ModelScore(
        G=G, structure=Structure.parse(result.structure), loglik_observed=ll, loglik_complete=lc,
        dof=dof, bic=b, icl=b + ent, entropy_term=ent,
    )


def failed_score(G: int, structure, cause: str) -> ModelScore:
    nan = float("nan")
    return ModelScore(G=G, structure=Structure.parse(structure), loglik_observed=nan, loglik_complete=nan,
                      dof=0, bic=nan, icl=nan, entropy_term=nan, failed=True, failure=cause)


# ---------------------------------------------------------------------------
# partition agreement


def adjusted_rand_index(labels_a, labels_b) -> float:
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    return float(adjusted_rand_score(a, b))


def confusion(labels_a, labels_b) -> np.ndarray:
    return contingency_matrix(np.asarray(labels_a), np.asarray(labels_b))


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceReport:
    mpsrf: float
    n_iter: int
    n_chains: int
    within: np.ndarray       # W
    between: np.ndarray      # B / n_iter
    chain_means: np.ndarray  # (m, p)


def mpsrf(chains) -> ConvergenceReport:
    """Brooks-Gelman multivariate potential scale reduction factor.

    ``chains`` is a sequence of (n_iter, p) arrays of monitored parameters.
    """
    arr = [np.asarray(c, dtype=float) for c in chains]
    if len(arr) < 2:
        raise ValueError("at least two chains are required")
    arr = [c[:, None] if c.ndim == 1 else c for c in arr]
    shapes = {c.shape for c in arr}
    if len(shapes) != 1:
        raise ValueError(f"chains differ in shape: {sorted(shapes)}")
    stack = np.stack(arr)
    m, n, p = stack.shape
    if n < 2:
        raise ValueError("each chain needs at least two retained iterations")
    means = stack.mean(axis=1)
    dev = stack - means[:, None, :]
    within = np.einsum("mti,mtj->ij", dev, dev) / (m * (n - 1))
    # between-chain covariance of the chain means from pairwise differences,
    # so identical chains give exactly zero
    between = np.zeros((p, p))
    for a in range(m):
        d = means[a] - means[a + 1:]
        between += d.T @ d
    between /= m * (m - 1)
    if not between.any():
        lam = 0.0
    else:
        lam = _largest_generalized_eig(between, within)
    value = (n - 1) / n + (m + 1) / m * lam
    return ConvergenceReport(mpsrf=float(value), n_iter=n, n_chains=m, within=within, between=between, chain_means=means)


def _largest_generalized_eig(b: np.ndarray, w: np.ndarray) -> float:
    try:
        return float(linalg.eigh(b, w, eigvals_only=True)[-1])
    except linalg.LinAlgError:
        pass
    ridge = 1e-10 * np.trace(w) / w.shape[0]
    try:
        return float(linalg.eigh(b, w + ridge * np.eye(w.shape[0]), eigvals_only=True)[-1])
    except linalg.LinAlgError:
        raise DiagnosticError("within-chain covariance is singular; MPSRF undefined") from None


def monitored_parameters(trace) -> np.ndarray:
    """Per-iteration monitored vector: means, log-scales and logit mixing weights."""
    T = len(trace)
    parts = [trace.mu.reshape(T, -1)]
    structure = trace.structure
    if structure is Structure.EEI:
        parts.append(np.log(trace.sigma))
    elif structure is Structure.EEE:
        parts.append(np.log(np.diagonal(trace.sigma, axis1=1, axis2=2)))
    else:
        parts.append(np.log(np.diagonal(trace.sigma, axis1=2, axis2=3)).reshape(T, -1))
    if trace.G > 1:
        parts.append(logit(np.clip(trace.tau, 1e-12, 1 - 1e-12)))
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# model selection


def model_select(ds: MixedDataset, G_grid, structures, config=None) -> list:
    """Fit every (G, structure) cell; return outcomes ranked by ICL then BIC.

    Failed cells are kept, flagged, and ranked last.
    """
    from .fitting import FitConfig, fit

    base = config or FitConfig()
    outcomes = []
    for structure in structures:
        for G in G_grid:
            cfg = base.replace(G=int(G), structure=Structure.parse(structure))
            outcomes.append(fit(ds, cfg))
    return rank_outcomes(outcomes)


def rank_outcomes(outcomes) -> list:
    def key(o):
        s = o.score
        return (s.failed, s.icl if not s.failed else math.inf, s.bic if not s.failed else math.inf)

    return sorted(outcomes, key=key)
