"""Gibbs sampler for the spike-and-slab mixed-data mixture.

Each ``update_*`` function draws one block from its full conditional and
returns the new value without touching ``state``; :func:`run_chain` applies
them in a fixed order.  Every block has its own random stream so that
skipping a block (e.g. imputation on uncensored data) leaves the draws of
the others unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import expit

from . import kernels
from .data import Censor, MixedDataset
from .kernels import (
    draw_dirichlet,
    draw_inverse_gamma,
    draw_inverse_wishart,
    draw_truncated_normal,
    logpdf_dirichlet,
)
from .model import (
    Hyperparameters,
    InitResult,
    ModelState,
    Structure,
    category_codes,
    cluster_precisions,
    initial_state,
    log_component_densities,
)

PURPOSES = ("impute", "covariance", "means", "theta", "delta", "spike", "inclusion", "tau", "z")

_NUMERIC_FAILURES = (
    np.linalg.LinAlgError,
    kernels.NumericUnderflowError,
    kernels.DegenerateWeightsError,
    kernels.ParameterError,
    FloatingPointError,
)


@dataclass
class ChainConfig:
    T: int = 500
    t_star: int = 200
    seed: int = 0
    chain_id: int = 0
    store_traces: bool = False  # keep per-iteration hard labels
    impute: bool = True

    def __post_init__(self):
        if not 0 <= self.t_star < self.T:
            raise ValueError(f"need 0 <= t_star < T, got t_star={self.t_star}, T={self.T}")


class ChainFailure(RuntimeError):
    def __init__(self, chain_id: int, iteration: int, cause: str):
        super().__init__(f"chain {chain_id} failed at iteration {iteration}: {cause}")
        self.chain_id = chain_id
        self.iteration = iteration
        self.cause = cause


@dataclass
class ChainTrace:
    """Retained (post burn-in) draws, one leading axis entry per iteration."""

    structure: Structure
    tau: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    theta: list[np.ndarray]
    delta: np.ndarray
    sigma2_delta0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    P: np.ndarray
    imputed: np.ndarray
    z: np.ndarray | None = None
    config: ChainConfig | None = None

    def __len__(self) -> int:
        return self.tau.shape[0]

    @property
    def G(self) -> int:
        return self.tau.shape[1]


class SamplerData:
    """Per-dataset quantities the updates reuse every iteration."""

    def __init__(self, ds: MixedDataset):
        self.ds = ds
        self.n, self.q = ds.n, ds.q
        self.codes = category_codes(ds)
        self.levels = ds.levels
        self.center = np.asarray(ds.column_means, dtype=float)
        self.censor = np.asarray(ds.censor)
        self.bounds = np.asarray(ds.bounds)
        self.censored_mask = self.censor != Censor.OBSERVED
        self.censored_vars = [m for m in range(ds.q) if self.censored_mask[:, m].any()]
        self.censored_rows = {m: np.flatnonzero(self.censored_mask[:, m]) for m in self.censored_vars}

    def category_counts(self, z: np.ndarray, G: int, j: int) -> np.ndarray:
        lm = self.levels[j]
        return np.bincount(z * lm + self.codes[:, j], minlength=G * lm).reshape(G, lm).astype(float)


def _as_data(data) -> SamplerData:
    return data if isinstance(data, SamplerData) else SamplerData(data)


# ---------------------------------------------------------------------------
# censored-cell imputation


def conditional_moments(state: ModelState, i: int, m: int) -> tuple[float, float]:
    """Mean and variance of x_im given the row's other continuous values."""
    g = int(state.z[i])
    cov = state.covariances()[g]
    mu = state.mu[:, g]
    q = mu.size
    if q == 1:
        return float(mu[0]), float(cov[0, 0])
    rest = np.array([p for p in range(q) if p != m])
    s_rest = cov[np.ix_(rest, rest)]
    s_cross = cov[m, rest]
    chol = kernels.cholesky_pd(s_rest, f"covariance of cluster {g + 1}")
    w = linalg.cho_solve((chol, True), s_cross, check_finite=False)
    mean = mu[m] + w @ (state.x[i, rest] - mu[rest])
    var = cov[m, m] - s_cross @ w
    return float(mean), float(var)


def impute_censored(data, state: ModelState, rng: np.random.Generator) -> np.ndarray:
    """Redraw every censored cell from its truncated conditional normal.

    Variables are visited in order and each uses the freshest values of the
    others.  Returns a new continuous block; observed cells are copied.
    """
    data = _as_data(data)
    x = state.x.copy()
    if not data.censored_vars:
        return x
    prec = cluster_precisions(state.structure, state.sigma, state.G)
    for m in data.censored_vars:
        rows = data.censored_rows[m]
        g = state.z[rows]
        dev = x[rows] - state.mu[:, g].T
        lam_row = prec[g, m, :]
        lam_mm = lam_row[:, m]
        cross = (lam_row * dev).sum(axis=1) - lam_mm * dev[:, m]
        cmean = state.mu[m, g] - cross / lam_mm
        csd = np.sqrt(1.0 / lam_mm)
        below = data.censor[rows, m] == Censor.LEFT
        x[rows, m] = draw_truncated_normal(cmean, csd, data.bounds[rows, m], below, rng)
    return x


# ---------------------------------------------------------------------------
# continuous block


def update_covariance(structure, data, state: ModelState, hyper: Hyperparameters, rng) -> np.ndarray:
    structure = Structure.parse(structure)
    data = _as_data(data)
    x = state.x
    resid = x - state.mu.T[state.z]
    if structure is Structure.EEI:
        shape = hyper.a_tilde + data.n / 2.0
        rate = hyper.b_tilde + 0.5 * (resid**2).sum(axis=0)
        return draw_inverse_gamma(shape, rate, rng)
    if structure is Structure.EEE:
        scale = hyper.S0 + resid.T @ resid
        return draw_inverse_wishart(hyper.nu0 + data.n, scale, rng, role="shared covariance posterior scale")
    out = np.empty((state.G, data.q, data.q))
    for g in range(state.G):
        rg = resid[state.z == g]
        scale = hyper.S[g] + rg.T @ rg
        out[g] = draw_inverse_wishart(
            hyper.nu[g] + rg.shape[0], scale, rng, role=f"cluster {g + 1} covariance posterior scale"
        )
    return out


def _prior_scale(state: ModelState, hyper: Hyperparameters, q: int) -> np.ndarray:
    return np.where(state.delta[:q] == 1, hyper.omega, 1.0) * state.sigma2_delta0


def mean_posteriors(structure, data, state: ModelState, hyper: Hyperparameters, m: int, mu=None, _cache=None):
    """Normal full-conditional (mean, variance) of mu_{m,.} across clusters.

    ``mu`` supplies the current values of the other coordinates (defaults to
    ``state.mu``); only the EEE/VVV cross terms use it.
    """
    structure = Structure.parse(structure)
    data = _as_data(data)
    mu = state.mu if mu is None else mu
    n_g, sums, prec = _cache or _mean_stats(structure, state)
    v = _prior_scale(state, hyper, data.q)[m]
    if structure is Structure.EEI:
        return _eei_mean_posterior(data.center[m], v, state.sigma[m], n_g, sums[m])
    return _coordinate_posterior(m, data.center[m], v, n_g, sums, prec, mu)


def _eei_mean_posterior(xbar, v, s2, n_g, sums):
    denom = s2 + n_g * v
    return (xbar * s2 + v * sums) / denom, v * s2 / denom


def _coordinate_posterior(m, xbar, v, n_g, sums, prec, mu):
    lam_mm = prec[:, m, m]
    others = sums - n_g * mu  # sum_i z_ig (x_ip - mu_pg)
    w = np.einsum("gp,pg->g", prec[:, m, :], others) - lam_mm * others[m]
    denom = 1.0 + n_g * lam_mm * v
    return (xbar + v * (lam_mm * sums[m] + w)) / denom, v / denom


def _mean_stats(structure, state: ModelState):
    n_g = state.counts.astype(float)
    sums = state.x.T @ np.eye(state.G)[state.z]
    prec = None if structure is Structure.EEI else cluster_precisions(structure, state.sigma, state.G)
    return n_g, sums, prec


def update_means(structure, data, state: ModelState, hyper: Hyperparameters, rng) -> np.ndarray:
    """Coordinates are drawn in turn, each given the freshest values of the others."""
    structure = Structure.parse(structure)
    data = _as_data(data)
    n_g, sums, prec = _mean_stats(structure, state)
    v = _prior_scale(state, hyper, data.q)
    center = data.center
    if structure is Structure.EEI:
        mean, var = _eei_mean_posterior(center[:, None], v, state.sigma[:, None], n_g, sums)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    mu = state.mu.copy()
    noise = rng.standard_normal(mu.shape)
    for m in range(data.q):
        mean, var = _coordinate_posterior(m, center[m], v[m], n_g, sums, prec, mu)
        mu[m] = mean + np.sqrt(var) * noise[m]
    return mu


# ---------------------------------------------------------------------------
# categorical block and selection indicators


def theta_posteriors(data, state: ModelState, hyper: Hyperparameters) -> list[np.ndarray]:
    data = _as_data(data)
    q = data.q
    out = []
    for j in range(len(data.levels)):
        slab = state.delta[q + j][:, None] == 1
        prior = np.where(slab, hyper.alpha_slab[j][None, :], hyper.alpha_spike[j][None, :])
        out.append(prior + data.category_counts(state.z, state.G, j))
    return out


def update_theta(data, state: ModelState, hyper: Hyperparameters, rng) -> list[np.ndarray]:
    return [draw_dirichlet(alpha, rng) for alpha in theta_posteriors(data, state, hyper)]


def inclusion_probabilities(data, state: ModelState, hyper: Hyperparameters) -> np.ndarray:
    """P(Delta_mg = 1 | rest), shape (M, G), from log-space density ratios."""
    data = _as_data(data)
    q = data.q
    d = state.mu - data.center[:, None]
    s = state.sigma2_delta0
    w = hyper.omega
    with np.errstate(divide="ignore"):
        log_p, log_1mp = np.log(state.p1)[:, None], np.log1p(-state.p1)[:, None]
        slab = log_p - 0.5 * np.log(w * s) - 0.5 * d**2 / (w * s)
        spike = log_1mp - 0.5 * np.log(s) - 0.5 * d**2 / s
    out = np.empty(state.delta.shape)
    out[:q] = expit(slab - spike)
    for j, th in enumerate(state.theta):
        with np.errstate(divide="ignore"):
            lp, l1p = np.log(state.p2[j]), np.log1p(-state.p2[j])
        a = lp + logpdf_dirichlet(th, hyper.alpha_slab[j])
        b = l1p + logpdf_dirichlet(th, hyper.alpha_spike[j])
        out[q + j] = expit(a - b)
    return out


def update_delta(data, state: ModelState, hyper: Hyperparameters, rng) -> np.ndarray:
    prob = inclusion_probabilities(data, state, hyper)
    return (rng.random(prob.shape) < prob).astype(np.int8)


def spike_variance_posterior(data, state: ModelState, hyper: Hyperparameters) -> tuple[float, float]:
    data = _as_data(data)
    q = data.q
    spike = 1 - state.delta[:q]
    dev2 = (state.mu - data.center[:, None]) ** 2
    shape = hyper.a_delta0 + 0.5 * spike.sum()
    rate_factor = 0.5 if hyper.halve_spike_rate else 1.0
    rate = hyper.b_delta0 + rate_factor * (spike * dev2).sum()
    return float(shape), float(rate)


def update_spike_variance(data, state: ModelState, hyper: Hyperparameters, rng) -> float:
    shape, rate = spike_variance_posterior(data, state, hyper)
    return float(draw_inverse_gamma(shape, rate, rng))


def update_inclusion_probs(data, state: ModelState, hyper: Hyperparameters, rng) -> tuple[np.ndarray, np.ndarray]:
    data = _as_data(data)
    q = data.q
    on = state.delta.sum(axis=1).astype(float)
    off = state.G - on
    p1 = rng.beta(hyper.a_p1 + on[:q], hyper.b_p1 + off[:q])
    p2 = rng.beta(hyper.a_p2 + on[q:], hyper.b_p2 + off[q:])
    return p1, p2


# ---------------------------------------------------------------------------
# mixing weights and memberships


def update_tau(state: ModelState, hyper: Hyperparameters, rng) -> np.ndarray:
    return draw_dirichlet(hyper.delta_dirichlet + state.counts, rng)


def membership_log_weights(data, state: ModelState) -> np.ndarray:
    data = _as_data(data)
    with np.errstate(divide="ignore"):
        log_tau = np.log(state.tau)
    return log_tau + log_component_densities(
        state.structure, state.x, data.codes, state.mu, state.sigma, state.theta
    )


def update_z(data, state: ModelState, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw memberships; also returns the membership probability matrix."""
    logw = membership_log_weights(data, state)
    return kernels.draw_categorical_log(logw, rng)


# ---------------------------------------------------------------------------
# chain driver


def chain_streams(seed: int, chain_id: int) -> dict[str, np.random.Generator]:
    return {name: kernels.stream(seed, chain_id, k) for k, name in enumerate(PURPOSES)}


def gibbs_sweep(data: SamplerData, state: ModelState, hyper: Hyperparameters, rngs, impute: bool = True) -> np.ndarray:
    """One full iteration, in place.  Returns the membership probabilities."""
    structure = state.structure
    if impute and data.censored_vars:
        state.x = impute_censored(data, state, rngs["impute"])
    state.sigma = update_covariance(structure, data, state, hyper, rngs["covariance"])
    state.mu = update_means(structure, data, state, hyper, rngs["means"])
    state.theta = update_theta(data, state, hyper, rngs["theta"])
    state.delta = update_delta(data, state, hyper, rngs["delta"])
    state.sigma2_delta0 = update_spike_variance(data, state, hyper, rngs["spike"])
    state.p1, state.p2 = update_inclusion_probs(data, state, hyper, rngs["inclusion"])
    state.tau = update_tau(state, hyper, rngs["tau"])
    state.z, prob = update_z(data, state, rngs["z"])
    return prob


def run_chain(
    ds: MixedDataset | SamplerData,
    structure,
    hyper: Hyperparameters,
    config: ChainConfig,
    init: InitResult | ModelState,
) -> ChainTrace:
    """Run one chain from ``init``; raises :class:`ChainFailure` on numeric breakdown."""
    data = _as_data(ds)
    structure = Structure.parse(structure)
    if isinstance(init, ModelState):
        state = init.copy()
    else:
        state = initial_state(data.ds, structure, init, hyper)
    rngs = chain_streams(config.seed, config.chain_id)
    keep = config.T - config.t_star
    G, q, M, n = state.G, data.q, data.ds.M, data.n
    tau = np.empty((keep, G))
    mu = np.empty((keep, q, G))
    sigma = np.empty((keep,) + state.sigma.shape)
    theta = [np.empty((keep, G, lm)) for lm in data.levels]
    delta = np.empty((keep, M, G), dtype=np.int8)
    s2 = np.empty(keep)
    p1 = np.empty((keep, q))
    p2 = np.empty((keep, M - q))
    P = np.empty((keep, n, G))
    imputed = np.empty((keep, int(data.censored_mask.sum())))
    zs = np.empty((keep, n), dtype=np.int16) if config.store_traces else None
    with np.errstate(over="ignore", under="ignore"):
        for t in range(1, config.T + 1):
            try:
                prob = gibbs_sweep(data, state, hyper, rngs, impute=config.impute)
            except _NUMERIC_FAILURES as exc:
                raise ChainFailure(config.chain_id, t, f"{type(exc).__name__}: {exc}") from exc
            if t <= config.t_star:
                continue
            k = t - config.t_star - 1
            tau[k], mu[k], sigma[k], s2[k] = state.tau, state.mu, state.sigma, state.sigma2_delta0
            for j, th in enumerate(state.theta):
                theta[j][k] = th
            delta[k], p1[k], p2[k], P[k] = state.delta, state.p1, state.p2, prob
            imputed[k] = state.x[data.censored_mask]
            if zs is not None:
                zs[k] = state.z
    return ChainTrace(
        structure=structure, tau=tau, mu=mu, sigma=sigma, theta=theta, delta=delta,
        sigma2_delta0=s2, p1=p1, p2=p2, P=P, imputed=imputed, z=zs, config=config,
    )


# ---------------------------------------------------------------------------
# trace persistence


def save_trace(trace: ChainTrace, directory, *, dataset_digest: str = "", extra: dict | None = None) -> Path:
    """Write one chain as a compressed columnar ``.npz`` plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cid = trace.config.chain_id if trace.config else 0
    path = directory / f"chain{cid}.npz"
    cols = {"tau": trace.tau, "mu": trace.mu, "sigma": trace.sigma, "delta": trace.delta,
                "sigma2_delta0": trace.sigma2_delta0, "p1": trace.p1, "p2": trace.p2, "imputed": trace.imputed}
    for j, th in enumerate(trace.theta):
        cols[f"theta{j}"] = th
    np.savez_compressed(path, **cols)
    manifest = dict(
        structure=trace.structure.value,
        config=asdict(trace.config) if trace.config else None,
        dataset=dataset_digest,
        columns=sorted(cols),
        **(extra or {}),
    )
    (directory / f"chain{cid}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
