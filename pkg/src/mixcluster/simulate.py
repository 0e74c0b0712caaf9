"""Three-cluster mixed-data scenarios with planted truth.

Seven continuous variables (X1-X7) are drawn from cluster-specific normals;
seven categorical variables (X8-X14) from cluster-specific multinomials,
two of them (X8, X11) through a logistic link on continuous columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .data import Censor, MixedDataset, from_raw, raw_continuous

TAU = np.array([0.5, 0.3, 0.2])
MEANS = np.array(
    [
        [5.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [5.0, 0.0, 7.0, -3.0, -0.5, -0.2, 0.0],
        [0.0, 6.0, 7.0, 3.0, 0.5, 0.2, 0.0],
    ]
)
J7 = np.ones((7, 7))
SIGMA_IND = np.diag([8.0, 4.0, 4.0, 4.0, 6.0, 6.0, 6.0])
SIGMA_COR1 = np.diag([3.0, 7.0, 3.0, 3.0, 5.0, 7.0, 7.0]) + 1.0 * J7
SIGMA_COR2 = np.diag([2.0, 2.0, 6.0, 2.0, 4.0, 6.0, 8.0]) + 2.0 * J7

COVARIANCES = {
    "EEI": (SIGMA_IND, SIGMA_IND, SIGMA_IND),
    "EEE": (SIGMA_COR2, SIGMA_COR2, SIGMA_COR2),
    "VVV": (SIGMA_COR2, SIGMA_IND, SIGMA_COR1),
}

# per-cluster level probabilities for the directly drawn categorical columns
CATEGORICAL = {
    "X9": [[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]],
    "X10": [[0.5, 0.3, 0.1, 0.1], [0.1, 0.5, 0.3, 0.1], [0.1, 0.1, 0.5, 0.3]],
    "X12": [[1 / 3] * 3] * 3,
    "X13": [[0.25] * 4] * 3,
    "X14": [[0.1, 0.2, 0.3, 0.4]] * 3,
}

NAMES = tuple(f"X{k}" for k in range(1, 15))
DOMINANT = ("X1", "X2", "X3", "X4", "X8", "X9", "X10")
WEAK = ("X5",)
NOISE = ("X6", "X7", "X11", "X12", "X13", "X14")
CENSORED_VARIABLES = ("X3", "X4", "X5")
CENSOR_PERCENTILES = {20: (10.0, 90.0), 40: (20.0, 80.0)}


@dataclass(frozen=True)
class ScenarioSpec:
    structure: str = "EEI"
    n: int = 1000
    censor_level: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "structure", str(self.structure).upper().removeprefix("DATA"))
        if self.structure not in COVARIANCES:
            raise ValueError(f"unknown scenario structure {self.structure!r}")
        if self.censor_level not in (0, 20, 40):
            raise ValueError(f"censor level must be 0, 20 or 40, got {self.censor_level}")
        if self.n < 3:
            raise ValueError("n must be at least 3")


@dataclass(frozen=True)
class PlantedTruth:
    labels: np.ndarray  # 0-based cluster labels
    tau: np.ndarray
    mu: np.ndarray      # (3, 7)
    sigma: tuple
    theta: dict
    roles: dict         # variable name -> dominant / weak / noise

    @property
    def dominant_mask(self) -> np.ndarray:
        return np.array([self.roles[name] == "dominant" for name in NAMES])


def variable_roles() -> dict[str, str]:
    roles = {name: "noise" for name in NOISE}
    roles.update({name: "dominant" for name in DOMINANT})
    roles.update({name: "weak" for name in WEAK})
    return {name: roles[name] for name in NAMES}


def _draw_raw(spec: ScenarioSpec):
    rng = kernels.stream(spec.seed, 0)
    n = spec.n
    labels = rng.choice(3, size=n, p=TAU)
    covs = COVARIANCES[spec.structure]
    cont = np.empty((n, 7))
    for g in range(3):
        rows = np.flatnonzero(labels == g)
        chol = np.linalg.cholesky(covs[g])
        cont[rows] = MEANS[g] + rng.standard_normal((rows.size, 7)) @ chol.T
    cat = np.empty((n, 7), dtype=np.int64)
    # Bernoulli columns are coded 1 (failure) / 2 (success)
    cat[:, 0] = 1 + (rng.random(n) < expit(0.1 * cont[:, 2] + 0.5 * cont[:, 3]))
    cat[:, 3] = 1 + (rng.random(n) < expit(0.1 * cont[:, 5] + 0.5 * cont[:, 6]))
    for col, name in ((1, "X9"), (2, "X10"), (4, "X12"), (5, "X13"), (6, "X14")):
        probs = np.asarray(CATEGORICAL[name])
        cum = np.cumsum(probs[labels], axis=1)
        u = rng.random(n)[:, None]
        cat[:, col] = 1 + np.minimum((cum < u).sum(axis=1), probs.shape[1] - 1)
    return labels, cont, cat


def censor_columns(raw: np.ndarray, columns, level: int):
    """Censor ``columns`` of ``raw`` below/above their own empirical percentiles.

    Returns (values with censored cells set to their bound, censor codes).
    """
    values = np.array(raw, dtype=float, copy=True)
    codes = np.zeros(values.shape, dtype=np.int8)
    if level == 0:
        return values, codes
    if level not in CENSOR_PERCENTILES:
        raise ValueError(f"censor level must be 0, 20 or 40, got {level}")
    lo_pct, hi_pct = CENSOR_PERCENTILES[level]
    n = values.shape[0]
    k = round(n * lo_pct / 100.0)
    for m in columns:
        col = raw[:, m]
        order = np.argsort(col, kind="stable")
        # bounds at the empirical percentiles; exactly k cells on each side
        lo, hi = np.percentile(col, [lo_pct, hi_pct])
        low_rows, high_rows = order[:k], order[n - k:]
        values[low_rows, m] = lo
        codes[low_rows, m] = Censor.LEFT
        values[high_rows, m] = hi
        codes[high_rows, m] = Censor.RIGHT
    return values, codes


def apply_censoring(ds: MixedDataset, level: int, variables=CENSORED_VARIABLES) -> MixedDataset:
    """Censor ``variables`` of an uncensored dataset at ``level`` percent."""
    if ds.n_censored:
        raise ValueError("dataset is already censored")
    cols = [ds.column_names.index(v) for v in variables]
    values, codes = censor_columns(raw_continuous(ds), cols, level)
    return from_raw(values, ds.categorical, ds.column_names, censor=codes, level_labels=ds.level_labels)


def generate(spec: ScenarioSpec) -> tuple[MixedDataset, PlantedTruth]:
    labels, cont, cat = _draw_raw(spec)
    cols = [NAMES.index(v) for v in CENSORED_VARIABLES]
    values, codes = censor_columns(cont, cols, spec.censor_level)
    ds = from_raw(
        values,
        cat,
        NAMES,
        censor=codes,
        level_labels=[("1", "2"), ("1", "2", "3"), ("1", "2", "3", "4"), ("1", "2"),
                      ("1", "2", "3"), ("1", "2", "3", "4"), ("1", "2", "3", "4")],
    )
    truth = PlantedTruth(
        labels=labels,
        tau=TAU.copy(),
        mu=MEANS.copy(),
        sigma=COVARIANCES[spec.structure],
        theta={k: np.asarray(v) for k, v in CATEGORICAL.items()},
        roles=variable_roles(),
    )
    return ds, truth
