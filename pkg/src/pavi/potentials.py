"""Strongly log-concave target potentials with analytic convexity constants.

A potential knows its scalar field ``V``, per-coordinate partial derivatives,
the full gradient, and the constants ``alpha <= lip`` sandwiching its Hessian
spectrum plus a bound ``third_bound`` on ``|d^3 V / dx_i^3|``.  The built-in
families keep all three constants exact so step-size guards downstream can
trust them; a ``check`` command re-validates them by sampling.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import (
    ConfigError,
    EvaluationError,
    UnsupportedCapabilityError,
    UsageError,
)

# sup_t |d^3/dt^3 log(cosh t)|; the exact supremum is 4/(3*sqrt(3)) ~= 0.76980
# and the declared bound rounds it up.
LOGCOSH_THIRD_SUP = 0.7699


def logcosh(t):
    """log(cosh(t)) computed without overflow for large |t|."""
    t = np.asarray(t, dtype=float)
    return np.abs(t) + np.log1p(np.exp(-2.0 * np.abs(t))) - np.log(2.0)


def _as_vector(x, m, what="x"):
    x = np.asarray(x, dtype=float)
    if x.shape != (m,):
        raise UsageError(f"{what} must be a length-{m} vector, got shape {x.shape}")
    return x


def _first_nonfinite(x):
    bad = np.flatnonzero(~np.isfinite(np.asarray(x, dtype=float)))
    return int(bad[0]) if bad.size else None


def _check_index(i, m):
    i = int(i)
    if not 0 <= i < m:
        raise UsageError(f"coordinate index {i} out of range for dimension {m}")
    return i


class Potential:
    """Base class for potentials with ``alpha I <= Hess V <= lip I``."""

    m: int
    alpha: float
    lip: float
    third_bound: float

    def _check_constants(self):
        if not (0.0 < self.alpha <= self.lip):
            raise ConfigError(
                "constants must satisfy 0 < alpha <= lip, "
                f"got alpha={self.alpha}, lip={self.lip}"
            )
        if self.third_bound < 0.0:
            raise ConfigError("third_bound must be nonnegative")

    # scalar interface -------------------------------------------------------
    def value(self, x) -> float:
        raise NotImplementedError

    def partial(self, i, x) -> float:
        # read off the gradient so the two closed forms can never disagree
        return float(self.gradient(x)[i])

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    # column-batched interface; ``cols`` has shape (m, K) --------------------
    def value_cols(self, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=float)
        return np.array([self.value(cols[:, k]) for k in range(cols.shape[1])])

    def partial_cols(self, i, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=float)
        return np.array([self.partial(i, cols[:, k]) for k in range(cols.shape[1])])

    def gradient_cols(self, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=float)
        return np.vstack([self.partial_cols(i, cols) for i in range(self.m)])

    # optional exact conditional mean gradient -------------------------------
    has_conditional_mean_gradient = False

    def conditional_mean_gradient(self, i, x_i, other_means):
        raise UnsupportedCapabilityError(
            "potential has no exact conditional mean gradient; fall back to "
            "exact_mean_field_grad at exhaustive scale or stochastic estimation"
        )

    def to_config(self) -> dict:
        raise NotImplementedError


class QuadraticPotential(Potential):
    """V(x) = 0.5 (x - mean)' A (x - mean) for symmetric positive definite A.

    alpha and lip are the extreme eigenvalues of A; third derivatives vanish.
    The optimal product approximation of exp(-V) is the Gaussian product with
    marginal means ``mean`` and variances ``1 / A_ii``.
    """

    family = "quadratic"

    def __init__(self, precision, mean=None):
        A = np.asarray(precision, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"precision matrix must be square, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ConfigError("precision matrix must be finite")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise ConfigError("precision matrix must be symmetric (within 1e-12)")
        A = 0.5 * (A + A.T)
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0.0:
            raise ConfigError(
                f"precision matrix must be positive definite, smallest eigenvalue {eig[0]}"
            )
        m = A.shape[0]
        self.precision = A
        self.mean = (
            np.zeros(m) if mean is None else _as_vector(mean, m, "mean").copy()
        )
        self.m = m
        self.alpha = float(eig[0])
        self.lip = float(eig[-1])
        self.third_bound = 0.0
        self._check_constants()

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.mean
        return float(0.5 * d @ (self.precision @ d))

    def gradient(self, x):
        return self.precision @ (np.asarray(x, dtype=float) - self.mean)

    def value_cols(self, cols):
        d = np.asarray(cols, dtype=float) - self.mean[:, None]
        return 0.5 * np.einsum("ik,ik->k", d, self.precision @ d)

    def partial_cols(self, i, cols):
        d = np.asarray(cols, dtype=float) - self.mean[:, None]
        return self.precision[i] @ d

    def gradient_cols(self, cols):
        d = np.asarray(cols, dtype=float) - self.mean[:, None]
        return self.precision @ d

    has_conditional_mean_gradient = True

    def conditional_mean_gradient(self, i, x_i, other_means):
        # partial_i V is affine in the other coordinates, so the expectation
        # under any product measure depends only on its coordinate means
        other_means = np.asarray(other_means, dtype=float)
        cross = float(np.delete(self.precision[i], i) @ (other_means - np.delete(self.mean, i)))
        return self.precision[i, i] * (np.asarray(x_i, dtype=float) - self.mean[i]) + cross

    def to_config(self):
        return {
            "family": self.family,
            "precision": self.precision.tolist(),
            "mean": self.mean.tolist(),
        }


class PerturbedQuadraticPotential(QuadraticPotential):
    """Quadratic potential plus per-coordinate logcosh bumps.

    V(x) = 0.5 (x - mean)' A (x - mean) + sum_i c_i logcosh(x_i) with c_i >= 0.
    Still strongly convex with alpha = lambda_min(A); the logcosh second
    derivative lies in (0, 1], so lip = lambda_max(A) + max_i c_i.  The optimal
    product approximation of exp(-V) is not Gaussian, which is what the grid
    oracle is for.
    """

    family = "perturbed_quadratic"

    def __init__(self, precision, mean=None, weights=None):
        super().__init__(precision, mean)
        if weights is None:
            raise ConfigError("perturbed quadratic potential requires weights")
        c = _as_vector(weights, self.m, "weights").copy()
        if np.any(c < 0.0):
            raise ConfigError("weights must be nonnegative")
        self.weights = c
        self.lip = float(self.lip + c.max())
        self.third_bound = float(c.max() * LOGCOSH_THIRD_SUP)
        self._check_constants()

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return super().value(x) + float(self.weights @ logcosh(x))

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return super().gradient(x) + self.weights * np.tanh(x)

    def value_cols(self, cols):
        cols = np.asarray(cols, dtype=float)
        return super().value_cols(cols) + self.weights @ logcosh(cols)

    def partial_cols(self, i, cols):
        cols = np.asarray(cols, dtype=float)
        return super().partial_cols(i, cols) + self.weights[i] * np.tanh(cols[i])

    def gradient_cols(self, cols):
        cols = np.asarray(cols, dtype=float)
        return super().gradient_cols(cols) + self.weights[:, None] * np.tanh(cols)

    def conditional_mean_gradient(self, i, x_i, other_means):
        # the coupling across coordinates is purely quadratic; the logcosh
        # term only touches coordinate i
        quad = super().conditional_mean_gradient(i, x_i, other_means)
        return quad + self.weights[i] * np.tanh(np.asarray(x_i, dtype=float))

    def to_config(self):
        doc = super().to_config()
        doc["weights"] = self.weights.tolist()
        return doc


class ClaimedConstants(Potential):
    """Delegating wrapper that replaces the declared convexity constants.

    Used by the ``check`` command to validate user-supplied constants against
    sampled finite differences.
    """

    def __init__(self, base, alpha=None, lip=None, third_bound=None):
        self.base = base
        self.m = base.m
        self.alpha = float(base.alpha if alpha is None else alpha)
        self.lip = float(base.lip if lip is None else lip)
        self.third_bound = float(base.third_bound if third_bound is None else third_bound)
        self._check_constants()

    def value(self, x):
        return self.base.value(x)

    def partial(self, i, x):
        return self.base.partial(i, x)

    def gradient(self, x):
        return self.base.gradient(x)

    def value_cols(self, cols):
        return self.base.value_cols(cols)

    def partial_cols(self, i, cols):
        return self.base.partial_cols(i, cols)

    def gradient_cols(self, cols):
        return self.base.gradient_cols(cols)

    @property
    def has_conditional_mean_gradient(self):
        return self.base.has_conditional_mean_gradient

    def conditional_mean_gradient(self, i, x_i, other_means):
        return self.base.conditional_mean_gradient(i, x_i, other_means)

    def to_config(self):
        doc = self.base.to_config()
        doc["claimed"] = {
            "alpha": self.alpha,
            "lip": self.lip,
            "third_bound": self.third_bound,
        }
        return doc


# operations -----------------------------------------------------------------


def eval_potential(pot, x) -> float:
    """Evaluate V(x), rejecting non-finite input or output."""
    x = _as_vector(x, pot.m)
    j = _first_nonfinite(x)
    if j is not None:
        raise EvaluationError(f"non-finite input at coordinate {j}")
    v = float(pot.value(x))
    if not np.isfinite(v):
        raise EvaluationError(f"potential evaluated to a non-finite value at x={x.tolist()}")
    return v


def partial_derivative(pot, i, x) -> float:
    """Evaluate the i-th partial derivative of V at x."""
    i = _check_index(i, pot.m)
    x = _as_vector(x, pot.m)
    j = _first_nonfinite(x)
    if j is not None:
        raise EvaluationError(f"non-finite input at coordinate {j}")
    g = float(pot.partial(i, x))
    if not np.isfinite(g):
        raise EvaluationError(
            f"partial derivative {i} evaluated to a non-finite value at x={x.tolist()}"
        )
    return g


def conditional_mean_gradient(pot, i, x_i, other_means) -> float:
    """Expected i-th partial when the other coordinates follow a product law.

    Exact for potentials whose ``partial(i, .)`` is affine in the other
    coordinates: the expectation then depends on the product law only through
    its coordinate means (length m-1, ascending coordinate order, skipping i).
    """
    i = _check_index(i, pot.m)
    if not pot.has_conditional_mean_gradient:
        # raise the capability error from the potential itself
        pot.conditional_mean_gradient(i, x_i, other_means)
    other_means = np.asarray(other_means, dtype=float)
    if other_means.shape != (pot.m - 1,):
        raise UsageError(
            f"other_means must have length {pot.m - 1}, got shape {other_means.shape}"
        )
    if not np.isfinite(x_i) or not np.all(np.isfinite(other_means)):
        raise EvaluationError("non-finite input to conditional mean gradient")
    return float(pot.conditional_mean_gradient(i, float(x_i), other_means))


def potential_from_config(doc) -> Potential:
    """Build a potential from a config mapping.

    Expected keys: ``family`` (quadratic | perturbed_quadratic), ``precision``
    (nested rows or a flat row-major list), optional ``mean``, ``weights`` for
    the perturbed family, and an optional ``claimed`` section overriding the
    declared constants (validated by the ``check`` command).
    """
    if not isinstance(doc, dict):
        raise ConfigError("potential config must be a mapping")
    try:
        family = doc["family"]
        raw = doc["precision"]
    except KeyError as missing:
        raise ConfigError(f"potential config missing key {missing}") from None
    A = np.asarray(raw, dtype=float)
    if A.ndim == 1:
        m = int(round(A.size ** 0.5))
        if m * m != A.size:
            raise ConfigError(
                f"flat precision list has length {A.size}, not a perfect square"
            )
        A = A.reshape(m, m)
    mean = doc.get("mean")
    if family == "quadratic":
        pot = QuadraticPotential(A, mean)
    elif family == "perturbed_quadratic":
        pot = PerturbedQuadraticPotential(A, mean, doc.get("weights"))
    else:
        raise ConfigError(f"unknown potential family {family!r}")
    claimed = doc.get("claimed")
    if claimed:
        pot = ClaimedConstants(
            pot,
            alpha=claimed.get("alpha"),
            lip=claimed.get("lip"),
            third_bound=claimed.get("third_bound"),
        )
    return pot


def potential_fingerprint(pot) -> str:
    """Stable hex digest of the potential's canonical config."""
    payload = json.dumps(pot.to_config(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
