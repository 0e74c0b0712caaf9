"""Random-variate generators and log-densities used by the Gibbs sampler.

All draws take an explicit ``numpy.random.Generator``.  Use :func:`stream` to
build one per (seed, chain, purpose) so that chains and update steps never
share generator state.
"""

from __future__ import annotations

import enum
import functools

import numpy as np
from scipy import linalg
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

LOG_2PI = np.log(2.0 * np.pi)
_TAIL_SWITCH = 4.0
_MIN_LOG_MASS = np.log(1e-300)


class ParameterError(ValueError):
    """Invalid distribution parameters."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed to factorize."""

    def __init__(self, role: str):
        super().__init__(f"{role} is not positive definite")
        self.role = role


class NumericUnderflowError(ArithmeticError):
    """Truncation region carries (numerically) zero probability mass."""


class DegenerateWeightsError(ValueError):
    pass


class Side(enum.Enum):
    BELOW_BOUND = "below_bound"
    ABOVE_BOUND = "above_bound"


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``seed`` and an integer spawn key.

    Distinct keys give statistically independent streams; the same
    (seed, key) always reproduces the same sequence.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def cholesky_pd(mat, role: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, retrying once with a small diagonal jitter."""
    mat = np.asarray(mat, dtype=float)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    d = mat.shape[0]
    jitter = 1e-8 * max(np.trace(mat) / d, 1e-300)
    try:
        return np.linalg.cholesky(mat + jitter * np.eye(d))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(role) from None


def cholesky_stack(mats, roles) -> np.ndarray:
    """Lower Cholesky factors of a (k, d, d) stack; ``roles[i]`` names matrix i on failure."""
    mats = np.asarray(mats, dtype=float)
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        return np.stack([cholesky_pd(m, r) for m, r in zip(mats, roles)])


def draw_mvn(mean, cov, rng: np.random.Generator, role: str = "covariance") -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (mean.size, mean.size):
        raise ParameterError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
    chol = cholesky_pd(cov, role)
    return mean + chol @ rng.standard_normal(mean.size)


@functools.cache
def _lower_indices(d: int):
    return np.tril_indices(d, -1)


def draw_inverse_wishart(df: float, scale, rng: np.random.Generator, role: str = "inverse-Wishart scale") -> np.ndarray:
    """Inverse-Wishart draw with E[draw] = scale / (df - dim - 1).

    Bartlett factor of the Wishart on the inverse scale, then inverted:
    with scale = C C^T, the draw is (C A^{-T})(C A^{-T})^T.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = scale.shape[0]
    if not df > d - 1:
        raise ParameterError(f"degrees of freedom {df} must exceed dim - 1 = {d - 1}")
    chol = cholesky_pd(scale, role)
    a = np.diag(np.sqrt(rng.chisquare(df - np.arange(d))))
    a[_lower_indices(d)] = rng.standard_normal(d * (d - 1) // 2)
    factor = chol @ np.linalg.inv(a).T
    out = factor @ factor.T
    return 0.5 * (out + out.T)


def draw_inverse_gamma(a, b, rng: np.random.Generator, size=None):
    """Inverse-gamma with shape ``a`` and scale ``b`` (mean b/(a-1))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ParameterError("inverse-gamma parameters must be positive")
    return b / rng.gamma(a, 1.0, size=size)


def draw_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw; ``alpha`` may be 2-D, one distribution per row."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ParameterError("Dirichlet concentrations must be positive")
    g = rng.gamma(alpha)
    total = g.sum(axis=-1, keepdims=True)
    bad = total <= 0
    if np.any(bad):
        # every component underflowed (tiny concentrations): fall back to a
        # log-space draw, log G = log U / a + log Gamma(a + 1)
        lg = np.log(rng.random(alpha.shape)) / alpha + np.log(rng.gamma(alpha + 1.0))
        lg -= lg.max(axis=-1, keepdims=True)
        alt = np.exp(lg)
        g = np.where(bad, alt, g)
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def _lower_tail_std(a, rng):
    """Standard normal truncated to (a, inf), a > 0, by exponential rejection."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    todo = np.arange(a.size)
    flat_a = a.ravel()
    flat_out = out.ravel()
    while todo.size:
        aa = flat_a[todo]
        lam = 0.5 * (aa + np.sqrt(aa * aa + 4.0))
        z = aa + rng.exponential(1.0 / lam)
        accept = rng.random(todo.size) <= np.exp(-0.5 * (z - lam) ** 2)
        flat_out[todo[accept]] = z[accept]
        todo = todo[~accept]
    return flat_out.reshape(a.shape)


def draw_truncated_normal(mu, sigma, bound, side, rng: np.random.Generator):
    """Normal(mu, sigma^2) restricted to one side of ``bound``.

    Works elementwise on arrays.  ``side`` is a :class:`Side` or a boolean
    array that is True where the draw must fall below its bound.
    """
    mu, sigma, bound = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float), np.asarray(bound, dtype=float)
    )
    if np.any(sigma <= 0):
        raise ParameterError("truncated normal sigma must be positive")
    if isinstance(side, Side):
        below = np.full(mu.shape, side is Side.BELOW_BOUND)
    else:
        below = np.broadcast_to(np.asarray(side, dtype=bool), mu.shape)
    # reflect "below" draws so every case becomes "standard normal above a"
    a = (bound - mu) / sigma
    a = np.where(below, -a, a)
    if np.any(log_ndtr(-a) < _MIN_LOG_MASS):
        raise NumericUnderflowError(
            "truncation bound lies too far in the tail (mass < 1e-300); rescale the variable"
        )
    std = np.empty(a.shape)
    tail = a > _TAIL_SWITCH
    if np.any(tail):
        std[tail] = _lower_tail_std(a[tail], rng)
    body = ~tail
    if np.any(body):
        # P(Z > a) = Phi(-a); draw Z = -Phi^{-1}(U Phi(-a))
        mass = ndtr(-a[body])
        u = rng.random(mass.shape)
        std[body] = -ndtri(u * mass)
        # guard against u == 0 style endpoints
        std[body] = np.maximum(std[body], a[body])
    std = np.where(below, -std, std)
    out = mu + sigma * std
    return out if out.ndim else float(out)


def logpdf_mvn(x, mean, cov, role: str = "covariance"):
    """Log-density of N(mean, cov) at x; x may be (n, d) for n points."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = mean.size
    if cov.shape != (d, d) or x.shape[-1] != d:
        raise ParameterError("dimension mismatch in logpdf_mvn")
    chol = cholesky_pd(cov, role)
    dev = np.atleast_2d(x - mean)
    sol = linalg.solve_triangular(chol, dev.T, lower=True)
    maha = np.sum(sol * sol, axis=0)
    out = -0.5 * (d * LOG_2PI + maha) - np.sum(np.log(np.diag(chol)))
    return out if x.ndim > 1 else float(out[0])


def logpdf_dirichlet(theta, alpha):
    """Log Dirichlet density, vectorized over leading axes."""
    theta = np.asarray(theta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    logt = np.log(np.maximum(theta, 1e-300))
    return gammaln(alpha.sum(axis=-1)) - gammaln(alpha).sum(axis=-1) + ((alpha - 1.0) * logt).sum(axis=-1)


def draw_categorical(weights, rng: np.random.Generator) -> int:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ParameterError("categorical weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("all categorical weights are zero")
    cum = np.cumsum(w)
    u = rng.random() * total
    return int(min(np.searchsorted(cum, u, side="right"), w.size - 1))


def draw_categorical_log(logw, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise categorical draws from unnormalized log-weights.

    Returns the drawn indices and the normalized probability matrix.
    """
    logw = np.asarray(logw, dtype=float)
    top = logw.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0])
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise DegenerateWeightsError(f"row {row}: every component has zero density")
    prob = np.exp(logw - top)
    prob /= prob.sum(axis=1, keepdims=True)
    cum = np.cumsum(prob, axis=1)
    u = rng.random(logw.shape[0])
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, logw.shape[1] - 1), prob
