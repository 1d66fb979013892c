"""Weighted (optionally penalized) B-spline least squares for coefficient curves.

Each coefficient function is expanded in a shared B-spline basis; stacking
per-observation rows kron(X, B(t)) turns the weighted least-squares problem
into one closed-form linear solve. A roughness penalty on the k-th basis
derivative (k = 2 by default) is available per coefficient, with generalized
cross-validation to pick the spline order, dimension, and penalty weights.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, OutOfDomain, SingularSystem
from .intensity import WeightSet, unit_weights
from .splines import SplineBasis, make_basis


@dataclass(frozen=True)
class DesignRow:
    """One observation's stacked regression row."""

    z: np.ndarray  # length d * q_n, kron(x, B(t))
    y: float
    w: float
    t: float


class DesignMatrix:
    """Assembled regression system in stacked dataset layout.

    Attributes
    ----------
    Z : (N, d*q_n) ndarray
        Rows kron(X_ij, B(t_ij)), covariate-major blocks of length q_n.
    y, w, t : (N,) ndarrays
    subject_index : (N,) intp ndarray
        Row -> position of the subject in the originating dataset.
    """

    def __init__(self, Z, y, w, t, subject_index, d, basis):
        self.Z = Z
        self.y = y
        self.w = w
        self.t = t
        self.subject_index = subject_index
        self.d = d
        self.basis = basis

    @property
    def n_rows(self):
        return self.Z.shape[0]

    @property
    def n_params(self):
        return self.Z.shape[1]

    def rows(self):
        for r in range(self.n_rows):
            yield DesignRow(self.Z[r], float(self.y[r]), float(self.w[r]),
                            float(self.t[r]))

    def normal_equations(self):
        """Weighted cross-products (Z'WZ, Z'Wy)."""
        half = np.sqrt(self.w)[:, None] * self.Z
        m = scipy.linalg.blas.dsyrk(1.0, half, trans=1)  # upper triangle
        m = m + np.triu(m, 1).T
        return m, self.Z.T @ (self.w * self.y)

    def per_subject_cross_products(self):
        """Per-subject (Z_i'W_iZ_i, Z_i'W_iy_i) stacked for the bootstrap.

        Returns (grams, rhs, subject_ids) with shapes (n_active, p*p) and
        (n_active, p); subject_ids maps block -> dataset subject position.
        """
        p = self.n_params
        ids, starts = np.unique(self.subject_index, return_index=True)
        order = np.argsort(starts)
        ids, starts = ids[order], starts[order]
        bounds = np.append(starts, self.n_rows)
        grams = np.empty((len(ids), p * p))
        rhs = np.empty((len(ids), p))
        for b, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            zi = self.Z[lo:hi]
            wi = self.w[lo:hi]
            grams[b] = (zi.T @ (wi[:, None] * zi)).ravel()
            rhs[b] = zi.T @ (wi * self.y[lo:hi])
        return grams, rhs, ids


def _weights_array(weights, n_rows):
    if weights is None:
        return np.ones(n_rows), None
    if isinstance(weights, WeightSet):
        arr = weights.weights
        ws = weights
    else:
        arr = np.asarray(weights, dtype=float)
        ws = None
    if arr.shape[0] != n_rows:
        raise DimensionMismatch(
            f"{arr.shape[0]} weights for {n_rows} observations")
    return arr, ws


def assemble_design(ds, basis, weights=None):
    """Build the stacked weighted regression system for a dataset.

    One row per observation, ordered by subject then time; `weights` may be
    a WeightSet, a flat array in the same layout, or None for unit weights.
    """
    times, outcomes, covs, subject_index = ds.stacked()
    n_rows = times.shape[0]
    warr, _ = _weights_array(weights, n_rows)
    bmat = basis.evaluate(times) if n_rows else np.empty((0, basis.dimension))
    z = np.einsum("nd,nq->ndq", covs, bmat).reshape(n_rows, ds.d * basis.dimension)
    return DesignMatrix(z, outcomes.astype(float), warr, times,
                        subject_index, ds.d, basis)


@dataclass(frozen=True)
class CoefficientFit:
    """Solved spline coefficients for all varying coefficients.

    `coefficients` has shape (q_n, d): column j holds the spline coefficients
    of the j-th coefficient function.
    """

    coefficients: np.ndarray
    basis: SplineBasis
    eta: np.ndarray
    weights_used: WeightSet | None
    system_matrix: np.ndarray
    effective_df: float
    ridge_used: bool = False
    covariate_names: tuple = field(default=())

    @property
    def d(self):
        return self.coefficients.shape[1]

    def to_json_dict(self):
        return {
            "order": self.basis.order,
            "knots": [float(v) for v in self.basis.knots],
            "coefficients_column_major": [
                float(v) for v in self.coefficients.ravel(order="F")],
            "eta": [float(v) for v in self.eta],
            "weight_truncation": (
                None if self.weights_used is None
                else self.weights_used.truncation_quantile),
            "effective_df": float(self.effective_df),
        }


def penalty_matrix(basis, eta, d, k=2):
    """Full penalty kron(diag(eta), Gram_k) for stacked coefficients."""
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (d,))
    if np.all(eta == 0):
        p = d * basis.dimension
        return np.zeros((p, p)), eta
    gram = basis.penalty_gram(k)
    return np.kron(np.diag(eta), gram), eta


def _solve_system(m, s_eta, rhs):
    system = m + 0.5 * s_eta
    ridge_used = False
    try:
        factor = scipy.linalg.cho_factor(system, check_finite=False)
    except np.linalg.LinAlgError:
        ridge = 1e-10 * np.trace(m) / m.shape[0]
        system = system + ridge * np.eye(m.shape[0])
        ridge_used = True
        try:
            factor = scipy.linalg.cho_factor(system, check_finite=False)
        except np.linalg.LinAlgError:
            raise SingularSystem(
                "normal equations not positive definite even with ridge; "
                "reduce the basis dimension"
            ) from None
    vec = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    return vec, factor, system, ridge_used


def solve_wls(design, penalty=None, k=2):
    """Solve the penalized weighted least squares for the coefficient matrix.

    Parameters
    ----------
    design : DesignMatrix
    penalty : None or (eta, gram)
        Per-coefficient penalty weights (scalar or length-d) and the
        precomputed k-th derivative Gram matrix; None means unpenalized.
    k : int
        Penalty derivative order used when `penalty` supplies only eta.

    Notes
    -----
    The normal equations are (Z'WZ + S_eta/2) vec(A) = Z'Wy; the half enters
    because the objective adds vec(A)'S_eta vec(A)/2 to the weighted residual
    sum of squares. A scaled ridge is added only if the factorization fails,
    and is flagged on the returned fit.
    """
    d, qn = design.d, design.basis.dimension
    m, rhs = design.normal_equations()
    if penalty is None:
        eta = np.zeros(d)
        s_eta = np.zeros_like(m)
    elif (isinstance(penalty, tuple) and len(penalty) == 2
          and isinstance(penalty[1], np.ndarray) and penalty[1].ndim == 2):
        eta_in, gram = penalty
        eta = np.broadcast_to(np.asarray(eta_in, dtype=float), (d,)).copy()
        s_eta = np.kron(np.diag(eta), gram)
    else:
        s_eta, eta = penalty_matrix(design.basis, penalty, d, k=k)
    vec, factor, system, ridge_used = _solve_system(m, s_eta, rhs)
    eff_df = float(np.trace(scipy.linalg.cho_solve(factor, m, check_finite=False)))
    coefficients = vec.reshape(d, qn).T
    return CoefficientFit(
        coefficients=coefficients, basis=design.basis, eta=eta,
        weights_used=None, system_matrix=system, effective_df=eff_df,
        ridge_used=ridge_used,
    )


def _gcv_from_normal(design, m, rhs, eta_vec, gram):
    s_eta = np.kron(np.diag(eta_vec), gram) if np.any(eta_vec != 0) \
        else np.zeros_like(m)
    vec, factor, _, _ = _solve_system(m, s_eta, rhs)
    resid = design.y - design.Z @ vec
    wrss = float(np.sum(design.w * resid * resid))
    eff_df = float(np.trace(scipy.linalg.cho_solve(factor, m, check_finite=False)))
    n = design.n_rows
    denom = (1.0 - eff_df / n) ** 2
    if denom <= 0:
        return float("inf")
    return (wrss / n) / denom


def _common_eta_scores(design, m, rhs, gram, eta_grid):
    """GCV scores over a common-eta grid via one eigendecomposition.

    With S_eta = eta * kron(I_d, gram), every solve shares the generalized
    eigenbasis of (M, K); each eta then costs O(p^2). Returns None when M is
    not positive definite (caller falls back to the per-eta solver).
    """
    try:
        low = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return None
    kmat = np.kron(np.eye(design.d), gram)
    linv, info = scipy.linalg.lapack.dtrtri(low, lower=1)
    if info != 0:
        return None
    a = linv @ kmat @ linv.T
    mu, q = np.linalg.eigh(0.5 * (a + a.T))
    mu = np.maximum(mu, 0.0)
    proj = linv.T @ q  # L^{-T} Q
    btilde = q.T @ (linv @ rhs)
    n = design.n_rows
    scores = []
    for eta in eta_grid:
        shrink = 1.0 / (1.0 + 0.5 * eta * mu)
        vec = proj @ (shrink * btilde)
        resid = design.y - design.Z @ vec
        wrss = float(np.sum(design.w * resid * resid))
        denom = (1.0 - float(shrink.sum()) / n) ** 2
        scores.append(float("inf") if denom <= 0 else (wrss / n) / denom)
    return scores


def gcv_score(design, eta, gram=None, k=2):
    """Generalized cross-validation score of the penalized weighted fit.

    Numerator: weighted residual sum of squares / N. Denominator:
    (1 - effective_df/N)^2, with the trace of the smoother computed from the
    factorized system rather than the dense N x N hat matrix.
    """
    if gram is None:
        gram = design.basis.penalty_gram(k)
    eta_vec = np.broadcast_to(np.asarray(eta, dtype=float), (design.d,))
    m, rhs = design.normal_equations()
    return _gcv_from_normal(design, m, rhs, eta_vec, gram)


@dataclass(frozen=True)
class TuningSelection:
    """Outcome of the GCV search, with the stage-one score trace."""

    order: int
    dimension: int
    eta: np.ndarray
    score: float
    trace: tuple  # records (order, dimension, eta_common, score)


def default_eta_grid():
    """{0} plus 13 log-spaced penalty weights from 1e-4 to 1e4."""
    return np.concatenate([[0.0], np.logspace(-4.0, 4.0, 13)])


def default_qn_grid(order, n_rows, d):
    upper = min(15, n_rows // (4 * d))
    return list(range(order + 1, upper + 1))


def select_tuning(builder, z_grid=(3, 4), qn_grid=None, eta_grid=None, k=2,
                  n_rows=None, d=None):
    """Two-stage GCV search over spline order, dimension, and penalties.

    Stage one minimizes GCV over (order, dimension, common eta) on the full
    grid; stage two refines per-coefficient eta by one pass of coordinate
    descent over the same eta grid. Ties break toward larger eta (the
    smoother fit).

    Parameters
    ----------
    builder : callable (order, dimension) -> DesignMatrix
        Rebuilds the design for a basis choice; weights ride along.
    qn_grid : sequence or None
        Basis dimensions; None derives {z+1..min(15, N/(4d))} per order,
        which requires `n_rows` and `d`.
    """
    if eta_grid is None:
        eta_grid = default_eta_grid()
    eta_grid = np.asarray(eta_grid, dtype=float)
    if eta_grid.size == 0 or not z_grid:
        raise ValueError("grids must be non-empty")

    best = None  # (score, order, qn, eta_common, design, gram, m, rhs)
    trace = []
    for order in z_grid:
        if qn_grid is None:
            if n_rows is None or d is None:
                raise ValueError("default qn grid needs n_rows and d")
            dims = default_qn_grid(order, n_rows, d)
        else:
            dims = [q for q in qn_grid if q >= order]
        for qn in dims:
            design = builder(order, qn)
            gram = design.basis.penalty_gram(k)
            m, rhs = design.normal_equations()
            scores = _common_eta_scores(design, m, rhs, gram, eta_grid)
            if scores is None:
                scores = [_gcv_from_normal(design, m, rhs,
                                           np.full(design.d, e), gram)
                          for e in eta_grid]
            for eta_c, score in zip(eta_grid, scores):
                trace.append((order, qn, float(eta_c), score))
                if best is None or score < best[0] or (
                        score == best[0] and eta_c > best[3]):
                    best = (score, order, qn, float(eta_c), design, gram, m, rhs)
    score, order, qn, eta_c, design, gram, m, rhs = best
    d_fit = design.d
    eta = np.full(d_fit, eta_c)
    for j in range(d_fit):
        for eta_j in eta_grid:
            cand = eta.copy()
            cand[j] = eta_j
            s = _gcv_from_normal(design, m, rhs, cand, gram)
            if s < score or (s == score and eta_j > eta[j]):
                score, eta = s, cand
    return TuningSelection(order=order, dimension=qn, eta=eta, score=score,
                           trace=tuple(trace))


def eval_beta(fit, t):
    """Coefficient functions at t: (len(t), d), or (d,) for scalar t."""
    bmat = fit.basis.evaluate(t)
    return bmat @ fit.coefficients


def residuals(ds, fit):
    """Per-observation residuals y - beta(t)'x in stacked dataset layout."""
    times, outcomes, covs, _ = ds.stacked()
    if times.size == 0:
        return np.empty(0)
    beta = eval_beta(fit, times)
    return outcomes - np.einsum("nd,nd->n", covs, beta)


def fit_vcm(ds, weights=None, z_grid=(3, 4), qn_grid=None, eta_grid=None,
            k=2, knot_placement="equal", covariate_names=None,
            design_cache=None):
    """Select tuning by GCV and fit the coefficient functions.

    Returns (CoefficientFit, TuningSelection, DesignMatrix); the fit records
    the weights that were used. Passing the same `design_cache` dict to
    several calls on one dataset (e.g. the three weighting methods) reuses
    the basis evaluations and stacked rows, which only depend on (order, qn).
    """
    times, _, _, _ = ds.stacked()
    n_rows = times.shape[0]
    warr, weight_set = _weights_array(weights, n_rows)
    if weight_set is None and weights is not None:
        weight_set = WeightSet(warr, truncation_quantile=None,
                               raw_max=float(warr.max()))

    def builder(order, qn):
        key = (order, qn, knot_placement)
        cached = None if design_cache is None else design_cache.get(key)
        if cached is None:
            basis = make_basis(order, qn, ds.tau, placement=knot_placement,
                               times=times)
            cached = assemble_design(ds, basis, None)
            if design_cache is not None:
                design_cache[key] = cached
        return DesignMatrix(cached.Z, cached.y, warr, cached.t,
                            cached.subject_index, cached.d, cached.basis)

    selection = select_tuning(builder, z_grid=z_grid, qn_grid=qn_grid,
                              eta_grid=eta_grid, k=k, n_rows=n_rows, d=ds.d)
    design = builder(selection.order, selection.dimension)
    gram = design.basis.penalty_gram(k)
    fit = solve_wls(design, penalty=(selection.eta, gram))
    fit = CoefficientFit(
        coefficients=fit.coefficients, basis=fit.basis, eta=fit.eta,
        weights_used=weight_set if weight_set is not None else unit_weights(n_rows),
        system_matrix=fit.system_matrix, effective_df=fit.effective_df,
        ridge_used=fit.ridge_used,
        covariate_names=tuple(covariate_names or ds.covariate_names),
    )
    return fit, selection, design
