import numpy as np
import pytest
from scipy.stats import norm

from pavi import PerturbedQuadraticPotential, QuadraticPotential


@pytest.fixture
def gauss21():
    """Coupled quadratic with eigenvalues 1 and 3 (alpha=1, lip=3)."""
    return QuadraticPotential([[2.0, 1.0], [1.0, 2.0]], [1.0, -1.0])


@pytest.fixture
def gauss21_centered():
    return QuadraticPotential([[2.0, 1.0], [1.0, 2.0]], [0.0, 0.0])


@pytest.fixture
def perturbed2():
    """Non-Gaussian target used by the grid oracle criteria."""
    return PerturbedQuadraticPotential([[2.0, 0.5], [0.5, 2.0]], [0.0, 0.0], [1.0, 1.0])


def anderson_darling_normal(z):
    """A^2 statistic against a standard normal (all parameters known)."""
    z = np.sort(np.asarray(z, dtype=float))
    n = z.size
    u = np.clip(norm.cdf(z), 1e-300, 1 - 1e-16)
    i = np.arange(1, n + 1)
    return float(-n - np.mean((2 * i - 1) * (np.log(u) + np.log1p(-u[::-1]))))


# asymptotic critical value of A^2 at significance 1e-3, simple hypothesis
AD_CRIT_1E3 = 6.0
