import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def moment_zscores(samples, mean, var):
    """z-scores of the sample mean and sample variance against analytic values.

    The variance standard error uses the sample fourth central moment.
    """
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    m = x.mean(axis=0)
    v = x.var(axis=0, ddof=1)
    z_mean = (m - mean) / np.sqrt(var / n)
    m4 = ((x - m) ** 4).mean(axis=0)
    se_var = np.sqrt(np.maximum(m4 - v**2, 1e-300) / n)
    z_var = (v - var) / se_var
    return np.abs(z_mean), np.abs(z_var)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
