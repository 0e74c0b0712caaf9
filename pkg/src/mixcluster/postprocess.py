"""Label-switching correction, posterior summaries and chain pooling.

Permutations are stored as integer arrays ``perm`` of length G with the
convention ``relabeled[..., b] = original[..., perm[b]]``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import Censor, MixedDataset
from .evaluation import adjusted_rand_index
from .gibbs import ChainTrace, SamplerData
from .model import Structure, category_codes, log_component_densities

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
EXHAUSTIVE_MAX_G = 7
RELABEL_TOL = 1e-8
RELABEL_MAX_PASSES = 100


class RelabelError(ValueError):
    pass


@dataclass
class RelabelResult:
    perms: np.ndarray          # (T, G)
    objective: list[float]     # KL objective after each outer pass
    passes: int


def _check_simplex(P: np.ndarray) -> None:
    if P.ndim != 3:
        raise RelabelError("membership traces must have shape (T, n, G)")
    if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-8):
        raise RelabelError("membership probability rows must lie on the simplex")


def _relabeled(P: np.ndarray, perms: np.ndarray) -> np.ndarray:
    return np.take_along_axis(P, perms[:, None, :], axis=2)


def _kl_objective(P_rel: np.ndarray, log_q: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P_rel > 0, P_rel * np.log(P_rel), 0.0)
    return float(plogp.sum() - np.einsum("tib,ib->", P_rel, log_q))


def kl_relabel(P) -> RelabelResult:
    """Per-iteration permutations minimizing KL divergence to the averaged memberships.

    Coordinate descent: average the relabeled memberships, then choose each
    iteration's permutation against that average; repeat until the objective
    stops improving.
    """
    P = np.asarray(P, dtype=float)
    _check_simplex(P)
    T, _, G = P.shape
    perms = np.tile(np.arange(G), (T, 1))
    all_perms = np.array(list(itertools.permutations(range(G)))) if G <= EXHAUSTIVE_MAX_G else None
    history: list[float] = []
    passes = 0
    for passes in range(1, RELABEL_MAX_PASSES + 1):
        log_q = np.log(np.maximum(_relabeled(P, perms).mean(axis=0), PROB_FLOOR))
        # cost[t, a, b]: assigning original column a to new label b
        cost = -np.einsum("tia,ib->tab", P, log_q)
        if all_perms is not None:
            totals = cost[:, all_perms, np.arange(G)].sum(axis=2)
            new = all_perms[np.argmin(totals, axis=1)]
        else:
            new = np.empty_like(perms)
            for t in range(T):
                rows, cols = linear_sum_assignment(cost[t])
                new[t, cols] = rows
        # keep the current permutation unless the new one is strictly better
        cur_cost = cost[np.arange(T)[:, None], perms, np.arange(G)].sum(axis=1)
        new_cost = cost[np.arange(T)[:, None], new, np.arange(G)].sum(axis=1)
        better = new_cost < cur_cost - 1e-12
        perms = np.where(better[:, None], new, perms)
        P_rel = _relabeled(P, perms)
        log_q = np.log(np.maximum(P_rel.mean(axis=0), PROB_FLOOR))
        history.append(_kl_objective(P_rel, log_q))
        if not better.any():
            break
        if len(history) > 1 and history[-2] - history[-1] < RELABEL_TOL:
            break
    return RelabelResult(perms=perms, objective=history, passes=passes)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def apply_relabel(trace: ChainTrace, perms) -> ChainTrace:
    """Permute every cluster-indexed array of ``trace`` by the per-iteration ``perms``."""
    perms = np.asarray(perms)
    if perms.shape != (len(trace), trace.G):
        raise RelabelError(f"expected permutations of shape {(len(trace), trace.G)}, got {perms.shape}")

    def along(arr, axis):
        shape = [1] * arr.ndim
        shape[0], shape[axis] = perms.shape
        return np.take_along_axis(arr, perms.reshape(shape), axis=axis)

    sigma = trace.sigma
    if trace.structure is Structure.VVV:
        idx = perms[:, :, None, None]
        sigma = np.take_along_axis(sigma, np.broadcast_to(idx, sigma.shape), axis=1)
    z = trace.z
    if z is not None:
        inv = np.stack([inverse_permutation(p) for p in perms])
        z = np.take_along_axis(inv, z.astype(np.int64), axis=1).astype(trace.z.dtype)
    return replace(
        trace,
        tau=along(trace.tau, 1),
        mu=along(trace.mu, 2),
        sigma=sigma,
        theta=[along(th, 1) for th in trace.theta],
        delta=along(trace.delta, 2),
        P=along(trace.P, 2),
        z=z,
    )


# ---------------------------------------------------------------------------
# summaries


@dataclass
class FitResult:
    structure: Structure
    tau: np.ndarray
    mu: np.ndarray                 # (q, G)
    sigma: np.ndarray              # structure payload
    theta: list[np.ndarray]
    z_hat: np.ndarray              # 0-based hard labels
    posterior_probs: np.ndarray    # (n, G)
    importance: np.ndarray         # (M,)
    x_plugin: np.ndarray           # continuous block with posterior-mean imputations
    diagnostics: dict = field(default_factory=dict)

    @property
    def G(self) -> int:
        return self.tau.size


def plugin_probabilities(structure, x, codes, tau, mu, sigma, theta) -> np.ndarray:
    """Membership probabilities at fixed parameter values."""
    with np.errstate(divide="ignore"):
        logw = np.log(tau) + log_component_densities(structure, x, codes, mu, sigma, theta)
    logw -= logw.max(axis=1, keepdims=True)
    prob = np.exp(logw)
    return prob / prob.sum(axis=1, keepdims=True)


def plugin_continuous(ds: MixedDataset, imputed_mean) -> np.ndarray:
    x = np.array(ds.continuous, dtype=float)
    mask = np.asarray(ds.censor) != 0
    if mask.any():
        x[mask] = imputed_mean
    return x


def _finish(structure, ds, tau, mu, sigma, theta, importance, x, diagnostics, codes=None) -> FitResult:
    codes = category_codes(ds) if codes is None else codes
    tau = tau / tau.sum()
    theta = [th / th.sum(axis=1, keepdims=True) for th in theta]
    prob = plugin_probabilities(structure, x, codes, tau, mu, sigma, theta)
    return FitResult(
        structure=structure, tau=tau, mu=mu, sigma=sigma, theta=theta,
        z_hat=np.argmax(prob, axis=1), posterior_probs=prob,
        importance=np.clip(importance, 0.0, 1.0), x_plugin=x, diagnostics=diagnostics,
    )


def summarize(trace: ChainTrace, ds: MixedDataset | SamplerData) -> FitResult:
    """Posterior means of a (relabeled) trace and the plug-in MAP assignment."""
    if isinstance(ds, SamplerData):
        codes, ds = ds.codes, ds.ds
    else:
        codes = None
    x = plugin_continuous(ds, trace.imputed.mean(axis=0))
    diagnostics = {"retained_iterations": len(trace), "bound_violations": bound_violations(trace, ds)}
    return _finish(
        trace.structure, ds,
        tau=trace.tau.mean(axis=0),
        mu=trace.mu.mean(axis=0),
        sigma=trace.sigma.mean(axis=0),
        theta=[th.mean(axis=0) for th in trace.theta],
        importance=trace.delta.mean(axis=(0, 2)),
        x=x,
        diagnostics=diagnostics,
        codes=codes,
    )


def bound_violations(trace: ChainTrace, ds: MixedDataset) -> int:
    """Retained imputations on the wrong side of their detection bound."""
    mask = np.asarray(ds.censor) != 0
    if not mask.any():
        return 0
    bounds = np.asarray(ds.bounds)[mask]
    left = np.asarray(ds.censor)[mask] == Censor.LEFT
    bad = np.where(left, trace.imputed >= bounds, trace.imputed <= bounds)
    return int(bad.sum())


def permute_result(result: FitResult, perm) -> FitResult:
    """Relabel a single summary: new cluster b is old cluster ``perm[b]``."""
    perm = np.asarray(perm)
    sigma = result.sigma[perm] if result.structure is Structure.VVV else result.sigma
    return replace(
        result,
        tau=result.tau[perm],
        mu=result.mu[:, perm],
        sigma=sigma,
        theta=[th[perm] for th in result.theta],
        z_hat=inverse_permutation(perm)[result.z_hat],
        posterior_probs=result.posterior_probs[:, perm],
    )


def alignment_permutation(labels, reference, G: int) -> np.ndarray:
    """Permutation maximizing agreement of ``labels`` with ``reference``."""
    conf = np.zeros((G, G))
    np.add.at(conf, (np.asarray(reference), np.asarray(labels)), 1)
    rows, cols = linear_sum_assignment(-conf)
    perm = np.empty(G, dtype=np.int64)
    perm[rows] = cols
    return perm


def pool_chains(results: list[FitResult], ds: MixedDataset, reference: FitResult | None = None) -> FitResult:
    """Align chains to ``reference`` (default: the first) and average them.

    A chain whose aligned hard labels have negative ARI against the
    reference is excluded and recorded in the diagnostics.
    """
    if not results:
        raise ValueError("no chain results to pool")
    reference = results[0] if reference is None else reference
    G, structure = reference.G, reference.structure
    kept, excluded = [], []
    for c, res in enumerate(results):
        if res.G != G or res.structure is not structure:
            raise ValueError("pooled chains must share G and covariance structure")
        aligned = permute_result(res, alignment_permutation(res.z_hat, reference.z_hat, G))
        ari = adjusted_rand_index(aligned.z_hat, reference.z_hat)
        if ari < 0:
            log.warning("chain %d disagrees with the reference (ARI %.3f); excluded from pooling", c, ari)
            excluded.append({"chain": c, "ari": ari})
            continue
        kept.append(aligned)
    if not kept:
        raise ValueError("every chain was excluded from pooling")
    if len(kept) == 1 and not excluded and len(results) == 1:
        return results[0]

    def avg(get):
        return np.mean([get(r) for r in kept], axis=0)

    diagnostics = {
        "pooled_chains": len(kept),
        "excluded_chains": excluded,
        "bound_violations": sum(r.diagnostics.get("bound_violations", 0) for r in results),
    }
    return _finish(
        structure, ds,
        tau=avg(lambda r: r.tau),
        mu=avg(lambda r: r.mu),
        sigma=avg(lambda r: r.sigma),
        theta=[np.mean([r.theta[j] for r in kept], axis=0) for j in range(len(reference.theta))],
        importance=avg(lambda r: r.importance),
        x=avg(lambda r: r.x_plugin),
        diagnostics=diagnostics,
    )


__all__ = [
    "FitResult",
    "RelabelError",
    "RelabelResult",
    "alignment_permutation",
    "apply_relabel",
    "bound_violations",
    "inverse_permutation",
    "kl_relabel",
    "permute_result",
    "plugin_probabilities",
    "pool_chains",
    "summarize",
]
