"""Normalized B-spline bases on [0, tau]: evaluation, derivatives, penalty.

The basis has `order` z (piecewise polynomials of degree z-1) and dimension
q_n = interior_knot_count + z, with z-fold repeated boundary knots. Interior
knots are either equally spaced or placed at equal empirical quantiles of
supplied observation times.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import DerivativeOrderTooHigh, OutOfDomain


@dataclass(frozen=True)
class SplineBasis:
    """Immutable B-spline system; evaluation is reentrant and thread-safe."""

    order: int              # z; polynomial degree is z - 1
    tau: float
    knots: np.ndarray       # full knot vector, boundary knots repeated z times
    placement: str          # "equal" or "quantile"

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knot vector must be nondecreasing")
        interior = knots[self.order:-self.order]
        if interior.size and not (np.all(interior > 0) and np.all(interior < self.tau)):
            raise ValueError("interior knots must lie strictly inside (0, tau)")

    @property
    def dimension(self):
        """Number of basis functions q_n."""
        return len(self.knots) - self.order

    @property
    def interior_knots(self):
        return self.knots[self.order:-self.order]

    def _check_domain(self, t):
        t = np.asarray(t, dtype=float)
        if t.size and (np.any(t < 0) or np.any(t > self.tau) or not np.all(np.isfinite(t))):
            raise OutOfDomain(f"evaluation points must lie in [0, {self.tau}]")
        return t

    def _spline(self, deriv=0):
        spl = BSpline(self.knots, np.eye(self.dimension), self.order - 1,
                      extrapolate=False)
        return spl.derivative(deriv) if deriv else spl

    def evaluate(self, t):
        """Basis values at t; shape (len(t), q_n) or (q_n,) for scalar t.

        Right-continuous at interior knots; the right endpoint tau is closed,
        so the last basis function equals 1 there.
        """
        t = self._check_domain(t)
        scalar = t.ndim == 0
        values = self._spline()(np.atleast_1d(t))
        return values[0] if scalar else values

    def evaluate_derivative(self, t, k):
        """Exact k-th derivative of every basis function at t (k < order)."""
        if k < 0 or k >= self.order:
            raise DerivativeOrderTooHigh(
                f"derivative order {k} not in [0, {self.order - 1}]"
            )
        if k == 0:
            return self.evaluate(t)
        t = self._check_domain(t)
        scalar = t.ndim == 0
        values = self._spline(deriv=k)(np.atleast_1d(t))
        return values[0] if scalar else values

    def penalty_gram(self, k):
        """Roughness penalty Gram matrix of the k-th derivative.

        Returns the q_n x q_n matrix of pairwise integrals of k-th derivative
        products over [0, tau], computed exactly by Gauss-Legendre quadrature
        on each knot span (the integrand is a polynomial there). Symmetric
        PSD, banded with bandwidth order-1, and annihilates coefficient
        vectors of polynomials of degree < k.
        """
        if k < 0 or k >= self.order:
            raise DerivativeOrderTooHigh(
                f"derivative order {k} not in [0, {self.order - 1}]"
            )
        cache = self.__dict__.setdefault("_gram_cache", {})
        if k in cache:
            return cache[k]
        q = self.dimension
        gram = np.zeros((q, q))
        # integrand degree is 2(z-1-k); this node count integrates it exactly
        n_nodes = (2 * (self.order - 1 - k) + 1 + 1) // 2 + 1
        nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
        spans = np.unique(self.knots)
        deriv = self._spline(deriv=k) if k else self._spline()
        for a, b in zip(spans[:-1], spans[1:]):
            half = 0.5 * (b - a)
            x = a + half * (nodes + 1.0)
            dmat = deriv(x)
            gram += dmat.T @ (half * weights[:, None] * dmat)
        gram = 0.5 * (gram + gram.T)
        gram.setflags(write=False)
        cache[k] = gram
        return gram

    def to_dict(self):
        return {"order": self.order, "tau": self.tau,
                "knots": [float(v) for v in self.knots],
                "placement": self.placement}


def _clamped_knots(order, interior, tau):
    return np.concatenate([
        np.zeros(order), np.asarray(interior, dtype=float), np.full(order, tau)
    ])


def make_basis(order, dimension, tau, placement="equal", times=None):
    """Construct a SplineBasis of the requested dimension.

    Parameters
    ----------
    order : int
        Spline order z (4 = cubic).
    dimension : int
        Requested basis dimension q_n (>= order); the interior knot count is
        dimension - order.
    tau : float
        Right end of the domain.
    placement : {"equal", "quantile"}
        Equal spacing, or equal empirical quantiles of `times`.
    times : array-like, required for quantile placement
        Observation times whose quantiles position the interior knots.

    Notes
    -----
    Quantile placement deduplicates coincident knots; if that leaves fewer
    interior knots than requested, the basis dimension shrinks and a warning
    is emitted.
    """
    if dimension < order:
        raise ValueError(f"dimension {dimension} must be >= order {order}")
    n_interior = dimension - order
    if placement == "equal":
        interior = np.linspace(0.0, tau, n_interior + 2)[1:-1]
    elif placement == "quantile":
        if times is None:
            raise ValueError("quantile placement requires observation times")
        times = np.asarray(times, dtype=float)
        if n_interior > 0:
            probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
            interior = np.quantile(times, probs)  # type-7 linear interpolation
            interior = interior[(interior > 0) & (interior < tau)]
            interior = np.unique(interior)
            if len(interior) < n_interior:
                warnings.warn(
                    f"quantile knots collapsed from {n_interior} to "
                    f"{len(interior)}; basis dimension reduced to "
                    f"{order + len(interior)}",
                    stacklevel=2,
                )
        else:
            interior = np.empty(0)
    else:
        raise ValueError(f"unknown placement {placement!r}")
    return SplineBasis(order=order, tau=float(tau),
                       knots=_clamped_knots(order, interior, tau),
                       placement=placement)
