"""Multiplier-bootstrap variance estimation and pointwise confidence bands.

Each bootstrap replicate draws one multiplier per subject, 2 x Bernoulli(0.5)
so half the subjects drop out and the rest double, then re-solves the same
penalized weighted least squares. The ensemble's pointwise sample variance
yields normal-quantile confidence intervals centered at the point estimate.
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .errors import DegenerateEnsemble, SingularSystem
from .vcm import eval_beta


def _seed_entropy(seed):
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def bernoulli_multipliers(rng, n):
    """Standard multipliers: 0 or 2 with equal probability (mean 1, var 1)."""
    return 2.0 * rng.integers(0, 2, size=n).astype(float)


@dataclass(frozen=True)
class BootstrapEnsemble:
    """Coefficient matrices from L bootstrap re-solves of one fit."""

    replicates: np.ndarray  # (L, q_n, d)
    seed: object
    basis: object
    eta: np.ndarray
    n_redraws: int = 0

    @property
    def size(self):
        return self.replicates.shape[0]


def multiplier_bootstrap(design, eta, n_replicates=100, seed=0, k=2,
                         gram=None, multiplier_fn=bernoulli_multipliers):
    """Bootstrap the penalized weighted LS fit with subject-level multipliers.

    The penalty eta is held fixed across replicates. Replicate l draws its
    multipliers from an RNG stream keyed by (seed, l), so the ensemble does
    not depend on execution order. A replicate whose zeroed-out system is
    singular is redrawn from its own stream, at most 5 times.

    Parameters
    ----------
    design : DesignMatrix
    eta : scalar or (d,) penalty weights
    multiplier_fn : callable (rng, n_subjects) -> (n_subjects,) array
        Test hook; the default draws 2 x Bernoulli(0.5).
    """
    if n_replicates < 2:
        raise DegenerateEnsemble("at least two bootstrap replicates required")
    d, qn = design.d, design.basis.dimension
    p = d * qn
    if gram is None:
        gram = design.basis.penalty_gram(k)
    eta_vec = np.broadcast_to(np.asarray(eta, dtype=float), (d,))
    s_eta = np.kron(np.diag(eta_vec), gram) if np.any(eta_vec != 0) \
        else np.zeros((p, p))
    grams, rhs, _ = design.per_subject_cross_products()
    n_subjects = grams.shape[0]
    replicates = np.empty((n_replicates, qn, d))
    entropy = _seed_entropy(seed)
    total_redraws = 0
    for rep in range(n_replicates):
        rng = np.random.default_rng(entropy + (rep,))
        for attempt in range(6):
            xi = np.asarray(multiplier_fn(rng, n_subjects), dtype=float)
            m = (xi @ grams).reshape(p, p)
            b = xi @ rhs
            try:
                vec = scipy.linalg.cho_solve(
                    scipy.linalg.cho_factor(m + 0.5 * s_eta,
                                            check_finite=False),
                    b, check_finite=False)
            except np.linalg.LinAlgError:
                total_redraws += 1
                if attempt == 5:
                    raise SingularSystem(
                        f"bootstrap replicate {rep} stayed singular after "
                        "5 redraws; sample too small for the basis dimension"
                    ) from None
                continue
            replicates[rep] = vec.reshape(d, qn).T
            break
    return BootstrapEnsemble(replicates=replicates, seed=seed,
                             basis=design.basis, eta=np.array(eta_vec),
                             n_redraws=total_redraws)


@dataclass(frozen=True)
class PointwiseBand:
    """Pointwise normal-quantile confidence band for one coefficient."""

    grid: np.ndarray
    estimate: np.ndarray
    variance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    coefficient_name: str = ""

    def contains(self, truth):
        """Indicator per grid point that `truth(t)` lies inside the band."""
        vals = np.asarray([truth(t) for t in self.grid]) if callable(truth) \
            else np.asarray(truth, dtype=float)
        return (self.lower <= vals) & (vals <= self.upper)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "estimate", "variance", "lower", "upper",
                             "coefficient_name", "alpha"])
            for i in range(self.grid.shape[0]):
                writer.writerow([
                    "%.17g" % self.grid[i], "%.17g" % self.estimate[i],
                    "%.17g" % self.variance[i], "%.17g" % self.lower[i],
                    "%.17g" % self.upper[i], self.coefficient_name,
                    "%.17g" % self.alpha,
                ])


def ensemble_curves(ensemble, j, grid):
    """Replicate curves of coefficient j on a grid; shape (L, len(grid))."""
    bmat = ensemble.basis.evaluate(grid)
    return ensemble.replicates[:, :, j] @ bmat.T


def pointwise_band(ensemble, fit, j, grid, alpha=0.05, coefficient_name=None):
    """Confidence band for coefficient j from the bootstrap ensemble.

    The variance at each grid point is the ensemble sample variance around
    the bootstrap mean; the band is centered at the point estimate.
    """
    if ensemble.size < 2:
        raise DegenerateEnsemble("variance needs at least two replicates")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    grid = np.asarray(grid, dtype=float)
    curves = ensemble_curves(ensemble, j, grid)
    center = curves.mean(axis=0)
    variance = np.sum((curves - center) ** 2, axis=0) / (ensemble.size - 1)
    estimate = eval_beta(fit, grid)[:, j]
    halfwidth = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(variance)
    name = coefficient_name
    if name is None:
        names = getattr(fit, "covariate_names", ())
        name = names[j] if j < len(names) else f"beta{j + 1}"
    return PointwiseBand(grid=grid, estimate=estimate, variance=variance,
                         lower=estimate - halfwidth, upper=estimate + halfwidth,
                         alpha=alpha, coefficient_name=name)
