"""Parameter containers, prior defaults and chain initialization."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace

import numpy as np
from sklearn.cluster import KMeans

from .data import DataValidationError, MixedDataset
from .kernels import LOG_2PI, cholesky_stack

log = logging.getLogger(__name__)

MAX_CLUSTERS = 12


class Structure(str, enum.Enum):
    """Covariance parameterization of the continuous block."""

    EEI = "EEI"  # shared diagonal
    EEE = "EEE"  # shared full matrix
    VVV = "VVV"  # one full matrix per cluster

    @classmethod
    def parse(cls, value) -> Structure:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown covariance structure {value!r}; expected EEI, EEE or VVV") from None


def cluster_covariances(structure: Structure, sigma: np.ndarray, G: int) -> np.ndarray:
    """Expand a structure payload to a (G, q, q) stack."""
    structure = Structure.parse(structure)
    if structure is Structure.EEI:
        return np.broadcast_to(np.diag(sigma), (G, sigma.size, sigma.size)).copy()
    if structure is Structure.EEE:
        return np.broadcast_to(sigma, (G,) + sigma.shape).copy()
    return np.array(sigma, copy=True)


def _roles(G: int) -> list[str]:
    return [f"covariance of cluster {g + 1}" for g in range(G)]


def cluster_precisions(structure: Structure, sigma: np.ndarray, G: int) -> np.ndarray:
    structure = Structure.parse(structure)
    if structure is Structure.EEI:
        return cluster_covariances(structure, 1.0 / sigma, G)
    chol = cholesky_stack(cluster_covariances(structure, sigma, G), _roles(G))
    inv_chol = np.linalg.inv(chol)
    return np.transpose(inv_chol, (0, 2, 1)) @ inv_chol


@dataclass
class Hyperparameters:
    G: int
    delta_dirichlet: np.ndarray
    omega: float
    k_percentile: int
    a_delta0: float
    b_delta0: float
    a_p1: float
    b_p1: float
    a_p2: float
    b_p2: float
    alpha_slab: list[np.ndarray]
    alpha_spike: list[np.ndarray]
    spike_concentration: float
    a_tilde: float
    b_tilde: float
    nu0: float
    S0: np.ndarray
    nu: np.ndarray
    S: np.ndarray
    halve_spike_rate: bool = True

    def __post_init__(self):
        q = self.S0.shape[0]
        if not self.omega > 1:
            raise ValueError(f"omega must exceed 1, got {self.omega}")
        if not 60 <= self.k_percentile <= 90:
            raise ValueError(f"k percentile must lie in [60, 90], got {self.k_percentile}")
        positives = {
            "a_delta0": self.a_delta0, "b_delta0": self.b_delta0, "a_p1": self.a_p1, "b_p1": self.b_p1,
            "a_p2": self.a_p2, "b_p2": self.b_p2, "a_tilde": self.a_tilde, "b_tilde": self.b_tilde,
            "spike_concentration": self.spike_concentration,
        }
        for name, value in positives.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if np.any(np.asarray(self.delta_dirichlet) <= 0):
            raise ValueError("Dirichlet concentrations for the mixing weights must be positive")
        for a in list(self.alpha_slab) + list(self.alpha_spike):
            if np.any(a <= 0):
                raise ValueError("categorical Dirichlet concentrations must be positive")
        if not self.nu0 > q + 1 or np.any(np.asarray(self.nu) <= q + 1):
            raise ValueError(f"inverse-Wishart degrees of freedom must exceed q + 1 = {q + 1}")

    def with_overrides(self, **kw) -> Hyperparameters:
        return replace(self, **kw)


@dataclass
class InitResult:
    z: np.ndarray          # (n,) labels 0..G-1
    mu: np.ndarray         # (q, G)
    sigma: dict            # structure tag -> payload
    theta: list[np.ndarray]
    tau: np.ndarray
    within_ss: float = float("nan")


@dataclass
class ModelState:
    """One Gibbs iteration's parameters and latent quantities.

    ``sigma`` is the structure payload: (q,) variances for EEI, a (q, q)
    matrix for EEE, a (G, q, q) stack for VVV.  ``x`` is the continuous
    block with current imputations in the censored cells.
    """

    structure: Structure
    tau: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    theta: list[np.ndarray]
    z: np.ndarray
    delta: np.ndarray
    sigma2_delta0: float
    p1: np.ndarray
    p2: np.ndarray
    x: np.ndarray

    @property
    def G(self) -> int:
        return self.tau.size

    @property
    def z_onehot(self) -> np.ndarray:
        return np.eye(self.G, dtype=np.int8)[self.z]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.G)

    def covariances(self) -> np.ndarray:
        return cluster_covariances(self.structure, self.sigma, self.G)

    def copy(self) -> ModelState:
        return replace(
            self,
            tau=self.tau.copy(), mu=self.mu.copy(), sigma=self.sigma.copy(),
            theta=[t.copy() for t in self.theta], z=self.z.copy(), delta=self.delta.copy(),
            p1=self.p1.copy(), p2=self.p2.copy(), x=self.x.copy(),
        )

    def check(self, atol: float = 1e-10) -> None:
        """Raise AssertionError if any state invariant is violated."""
        assert abs(self.tau.sum() - 1) < atol and np.all(self.tau >= 0)
        assert self.z.min() >= 0 and self.z.max() < self.G
        for th in self.theta:
            assert np.allclose(th.sum(axis=1), 1, atol=atol) and np.all(th >= 0)
        assert set(np.unique(self.delta)) <= {0, 1}
        for g, cov in enumerate(self.covariances()):
            np.linalg.cholesky(cov)


# ---------------------------------------------------------------------------
# densities shared by the sampler, the summaries and the criteria


def category_codes(ds: MixedDataset) -> np.ndarray:
    """Zero-based categorical codes."""
    return np.asarray(ds.categorical, dtype=np.int64) - 1


def log_component_densities(structure, x, codes, mu, sigma, theta) -> np.ndarray:
    """log f_g(x_i) for every row and cluster, shape (n, G)."""
    structure = Structure.parse(structure)
    n, q = x.shape
    G = mu.shape[1]
    out = np.empty((n, G))
    if structure is Structure.EEI:
        var = np.asarray(sigma)
        const = -0.5 * (q * LOG_2PI + np.log(var).sum())
        for g in range(G):
            out[:, g] = const - 0.5 * (((x - mu[:, g]) ** 2) / var).sum(axis=1)
    else:
        chol = cholesky_stack(cluster_covariances(structure, sigma, G), _roles(G))
        inv_chol = np.linalg.inv(chol)
        log_det = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        for g in range(G):
            sol = (x - mu[:, g]) @ inv_chol[g].T
            out[:, g] = -0.5 * (q * LOG_2PI + np.einsum("ij,ij->i", sol, sol)) - log_det[g]
    for j, th in enumerate(theta):
        out += np.log(np.maximum(th, 1e-300)).T[codes[:, j]]
    return out


# ---------------------------------------------------------------------------
# prior defaults


def compute_omega(mu0, k_percentile: int) -> float:
    """Slab-to-spike variance ratio from the initial cluster means.

    Squared ratio between the mean magnitude of entries at or above the k-th
    percentile and the mean magnitude of entries at or below the 25th.
    """
    a = np.abs(np.asarray(mu0, dtype=float)).ravel()
    hi = a[a >= np.percentile(a, k_percentile)].mean()
    lo = a[a <= np.percentile(a, 25)].mean()
    with np.errstate(over="ignore", divide="ignore"):
        omega = float((hi / lo) ** 2) if lo > 0 else np.inf
    if not np.isfinite(omega):
        log.warning("lower-quartile initial mean magnitude is zero; falling back to omega = 100")
        return 100.0
    return max(omega, 1.0001)


def default_hyperparameters(
    ds: MixedDataset,
    G: int,
    k_percentile: int = 75,
    init: InitResult | None = None,
    *,
    spike_concentration: float = 1000.0,
    omega: float | None = None,
) -> Hyperparameters:
    if not 1 <= G <= MAX_CLUSTERS:
        raise DataValidationError(f"G must lie in 1..{MAX_CLUSTERS}, got {G}")
    if G > ds.n:
        raise DataValidationError(f"G = {G} exceeds the number of observations ({ds.n})")
    if not 60 <= k_percentile <= 90:
        raise DataValidationError(f"k percentile must lie in [60, 90], got {k_percentile}")
    q = ds.q
    if omega is None:
        if init is None:
            raise ValueError("either an initialization or an explicit omega is required")
        omega = compute_omega(init.mu, k_percentile)
    emp = np.atleast_2d(np.cov(ds.continuous, rowvar=False, ddof=1))
    S = emp / G ** (2.0 / q)
    nu = float(q + 2)
    codes = category_codes(ds)
    counts = [np.bincount(codes[:, j], minlength=lm).astype(float) for j, lm in enumerate(ds.levels)]
    return Hyperparameters(
        G=G,
        delta_dirichlet=np.full(G, 1.0 / G),
        omega=float(omega),
        k_percentile=int(k_percentile),
        a_delta0=2.0,
        b_delta0=0.005,
        a_p1=1.0,
        b_p1=1.0,
        a_p2=1.0,
        b_p2=1.0,
        alpha_slab=[np.ones(lm) for lm in ds.levels],
        alpha_spike=[spike_concentration / ds.n * c for c in counts],
        spike_concentration=float(spike_concentration),
        a_tilde=2.0,
        b_tilde=1.0,
        nu0=nu,
        S0=S.copy(),
        nu=np.full(G, nu),
        S=np.broadcast_to(S, (G, q, q)).copy(),
    )


# ---------------------------------------------------------------------------
# initialization


def _assign(x, centers):
    d2 = ((x[:, None, :] - centers.T[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def _initial_covariances(x, z, mu, G):
    n, q = x.shape
    resid = x - mu.T[z]
    pooled = resid.T @ resid / max(n - G, 1)
    ridge = 1e-6 * np.eye(q)
    per = np.empty((G, q, q))
    for g in range(G):
        rg = resid[z == g]
        per[g] = rg.T @ rg / (rg.shape[0] - 1) + ridge if rg.shape[0] > q + 1 else pooled + ridge
        try:
            np.linalg.cholesky(per[g])
        except np.linalg.LinAlgError:
            per[g] = pooled + ridge
    return {
        Structure.EEI: np.maximum(np.diag(pooled), 1e-6),
        Structure.EEE: pooled + ridge,
        Structure.VVV: per,
    }


def bootstrap_kmeans_init(ds: MixedDataset, G: int, rng: np.random.Generator, B: int = 50) -> InitResult:
    """K-means on ``B`` bootstrap resamples of the continuous block.

    The centroid set with the lowest within-cluster sum of squares on the
    full data wins; every row is then assigned to its nearest centroid.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    if not 1 <= G <= ds.n:
        raise DataValidationError(f"G must lie in 1..n, got {G}")
    x = np.asarray(ds.continuous)
    n = ds.n
    best, best_ss = None, np.inf
    for _ in range(B):
        rows = rng.integers(0, n, n)
        sample = x[rows]
        k = min(G, np.unique(sample, axis=0).shape[0])
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100,
                    random_state=int(rng.integers(2**31 - 1))).fit(sample)
        centers = km.cluster_centers_.T
        if k < G:
            continue
        _, d2 = _assign(x, centers)
        ss = d2.min(axis=1).sum()
        if ss < best_ss:
            best, best_ss = centers, ss
    if best is None:
        raise DataValidationError(f"could not find {G} distinct centroids")
    centers = best.copy()
    z, d2 = _assign(x, centers)
    counts = np.bincount(z, minlength=G)
    if np.any(counts == 0):
        far = d2[np.arange(n), z].argsort()[::-1]
        for slot, g in enumerate(np.flatnonzero(counts == 0)):
            centers[:, g] = x[far[slot]]
        z, d2 = _assign(x, centers)
        counts = np.bincount(z, minlength=G)
        if np.any(counts == 0):
            raise DataValidationError("bootstrap K-means left a cluster empty after re-seeding")
    # the winning centroids themselves seed the means (and omega)
    mu = centers
    codes = category_codes(ds)
    theta = []
    for j, lm in enumerate(ds.levels):
        tab = np.zeros((G, lm))
        np.add.at(tab, (z, codes[:, j]), 1.0)
        theta.append((tab + 1.0) / (tab.sum(axis=1, keepdims=True) + lm))
    return InitResult(
        z=z,
        mu=mu,
        sigma=_initial_covariances(x, z, mu, G),
        theta=theta,
        tau=counts / n,
        within_ss=float(d2[np.arange(n), z].sum()),
    )


def initial_state(ds: MixedDataset, structure, init: InitResult, hyper: Hyperparameters) -> ModelState:
    """Chain starting point: the initialization plus neutral selection state.

    Every indicator starts in the slab, inclusion probabilities at 1/2 and
    the spike variance at its prior mean.
    """
    structure = Structure.parse(structure)
    G = init.tau.size
    return ModelState(
        structure=structure,
        tau=init.tau.astype(float).copy(),
        mu=init.mu.copy(),
        sigma=np.array(init.sigma[structure], copy=True),
        theta=[t.copy() for t in init.theta],
        z=init.z.copy(),
        delta=np.ones((ds.M, G), dtype=np.int8),
        sigma2_delta0=hyper.b_delta0 / (hyper.a_delta0 - 1.0) if hyper.a_delta0 > 1 else hyper.b_delta0,
        p1=np.full(ds.q, 0.5),
        p2=np.full(ds.M - ds.q, 0.5),
        x=np.array(ds.continuous, copy=True),
    )
