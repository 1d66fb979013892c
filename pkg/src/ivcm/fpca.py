"""Covariance-function estimation for the subject-specific process.

Fit residuals are noisy observations of each subject's latent random
function, so products of residual pairs at distinct within-subject times are
unbiased for the covariance surface there. A local linear smoother pools
those raw products onto a square grid (diagonal pairs are excluded because
they carry measurement-error variance), and discretizing the integral
operator on the grid yields eigenvalues and orthonormal eigenfunctions.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import EmptyNeighborhood, NonSymmetricInput
from .kernels import get_kernel


@dataclass(frozen=True)
class RawCovariancePoint:
    """One off-diagonal residual product R_ij * R_ij'."""

    s: float
    t: float
    value: float
    subject_id: str


class CovariancePairs:
    """All ordered within-subject residual pairs, stored as flat arrays.

    `counts` supports aggregated (binned) clouds: a point with count c
    stands for c coincident raw points and enters every sum with weight c.
    """

    def __init__(self, s, t, value, subject_index, subject_ids, counts=None):
        self.s = np.asarray(s, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.value = np.asarray(value, dtype=float)
        self.subject_index = np.asarray(subject_index, dtype=np.intp)
        self.subject_ids = tuple(subject_ids)
        self.counts = (np.ones_like(self.value) if counts is None
                       else np.asarray(counts, dtype=float))

    def __len__(self):
        return self.s.shape[0]

    def __getitem__(self, i):
        return RawCovariancePoint(
            float(self.s[i]), float(self.t[i]), float(self.value[i]),
            self.subject_ids[self.subject_index[i]])

    def mean_within_subject_gap(self):
        """Mean gap between consecutive observation times, pooled over subjects."""
        gaps = []
        for b in np.unique(self.subject_index):
            times = np.unique(self.s[self.subject_index == b])
            if times.size >= 2:
                gaps.append(np.diff(times))
        if not gaps:
            raise ValueError("no subject has two distinct observation times")
        return float(np.mean(np.concatenate(gaps)))


def raw_covariances(ds, resid):
    """Raw covariance cloud from residuals aligned with the dataset layout.

    Emits every ordered pair (j, j'), j != j', within each subject, so the
    cloud is symmetric in (s, t); subjects with fewer than two observations
    contribute nothing.
    """
    resid = np.asarray(resid, dtype=float)
    if resid.shape[0] != ds.n_observations:
        raise ValueError(f"{resid.shape[0]} residuals for "
                         f"{ds.n_observations} observations")
    s_out, t_out, v_out, idx_out = [], [], [], []
    offset = 0
    subject_ids = []
    for i, subj in enumerate(ds.subjects):
        m = subj.n_observations
        subject_ids.append(subj.subject_id)
        if m >= 2:
            r = resid[offset:offset + m]
            times = subj.times
            prod = np.outer(r, r)
            off = ~np.eye(m, dtype=bool)
            s_out.append(np.repeat(times, m)[off.ravel()])
            t_out.append(np.tile(times, m)[off.ravel()])
            v_out.append(prod[off])
            idx_out.append(np.full(m * (m - 1), i, dtype=np.intp))
        offset += m
    if not s_out:
        return CovariancePairs(np.empty(0), np.empty(0), np.empty(0),
                               np.empty(0, dtype=np.intp), subject_ids)
    return CovariancePairs(np.concatenate(s_out), np.concatenate(t_out),
                           np.concatenate(v_out), np.concatenate(idx_out),
                           subject_ids)


_PAIR_CHUNK = 20_000


def _surface_once(s, t, v, c, grid, h, kernel):
    """Local linear fit at every grid cell; returns (surface, any_empty)."""
    g = grid.shape[0]
    shape = (g, g)
    s00 = np.zeros(shape); s10 = np.zeros(shape); s01 = np.zeros(shape)
    s20 = np.zeros(shape); s02 = np.zeros(shape); s11 = np.zeros(shape)
    t00 = np.zeros(shape); t10 = np.zeros(shape); t01 = np.zeros(shape)
    for lo in range(0, s.shape[0], _PAIR_CHUNK):
        sl = slice(lo, lo + _PAIR_CHUNK)
        u = (grid[:, None] - s[None, sl]) / h      # (G, P)
        w = (grid[:, None] - t[None, sl]) / h
        a0 = kernel(u)
        a1 = a0 * u; a2 = a1 * u
        b0 = kernel(w) * c[None, sl]               # point multiplicity
        b1 = b0 * w; b2 = b1 * w
        vv = v[sl]
        s00 += a0 @ b0.T
        s10 += a1 @ b0.T
        s01 += a0 @ b1.T
        s20 += a2 @ b0.T
        s02 += a0 @ b2.T
        s11 += a1 @ b1.T
        t00 += (a0 * vv) @ b0.T
        t10 += (a1 * vv) @ b0.T
        t01 += (a0 * vv) @ b1.T
    if np.any(s00 <= 0):
        return None, True
    # 3x3 normal equations per cell, in bandwidth-scaled coordinates
    det = (s00 * (s20 * s02 - s11 * s11)
           - s10 * (s10 * s02 - s11 * s01)
           + s01 * (s10 * s11 - s20 * s01))
    ok = det > 1e-10 * s00 ** 3
    a0_hat = np.where(ok, np.nan, t00 / s00)  # local-constant fallback
    if np.any(ok):
        cof00 = s20 * s02 - s11 * s11
        cof01 = s01 * s11 - s10 * s02
        cof02 = s10 * s11 - s01 * s20
        numer = cof00 * t00 + cof01 * t10 + cof02 * t01
        with np.errstate(invalid="ignore", divide="ignore"):
            ll = numer / det
        a0_hat = np.where(ok, ll, a0_hat)
    return a0_hat, False


def local_linear_surface(pairs, grid, h_b, kernel="epanechnikov"):
    """Smooth the raw covariance cloud onto a square grid.

    At each grid point a kernel-weighted plane is fit to the nearby raw
    products and its intercept taken; cells whose 3x3 system is numerically
    singular fall back to the local-constant (kernel-average) estimate. When
    some cell has no kernel mass at all, the whole surface is recomputed at
    doubled bandwidth (twice at most, with a warning) before giving up.

    Returns the symmetrized (G, G) surface.
    """
    if h_b <= 0:
        raise ValueError("h_b must be > 0")
    if len(pairs) == 0:
        raise ValueError("empty covariance cloud")
    grid = np.asarray(grid, dtype=float)
    kern = get_kernel(kernel)
    h = float(h_b)
    for attempt in range(3):
        surface, empty = _surface_once(pairs.s, pairs.t, pairs.value,
                                       pairs.counts, grid, h, kern)
        if not empty:
            if attempt:
                warnings.warn(
                    f"covariance bandwidth enlarged to {h} to cover empty "
                    "grid cells", stacklevel=2)
            return 0.5 * (surface + surface.T)
        h *= 2.0
    raise EmptyNeighborhood(
        f"grid cells with zero kernel mass even at bandwidth {h / 2}; "
        "h_b is far too small for this design"
    )


def select_bandwidth_cov(pairs, grid, n_folds=5, n_candidates=8,
                         kernel="epanechnikov"):
    """Pick the covariance bandwidth by subject-grouped cross-validation.

    Candidates are log-spaced on [2 * mean within-subject gap, tau / 4].
    Each fold's surface is fit on the remaining pairs and evaluated by
    bilinear interpolation at held-out pair locations; ties (to relative
    precision) go to the larger, smoother bandwidth.
    """
    if len(pairs) < 50:
        raise ValueError("bandwidth selection needs at least 50 raw points")
    grid = np.asarray(grid, dtype=float)
    tau = float(grid[-1])
    delta = pairs.mean_within_subject_gap()
    lo, hi = 2.0 * delta, tau / 4.0
    if lo >= hi:
        candidates = np.array([hi])
    else:
        candidates = np.geomspace(lo, hi, n_candidates)
    subjects = np.unique(pairs.subject_index)
    fold_of = {int(b): r % n_folds for r, b in enumerate(subjects)}
    fold_idx = np.array([fold_of[int(b)] for b in pairs.subject_index])
    scale = float(np.mean(pairs.value ** 2)) * len(pairs)
    best_h, best_score = None, np.inf
    for h in candidates:
        score = 0.0
        try:
            for fold in range(n_folds):
                test = fold_idx == fold
                if not np.any(test) or np.all(test):
                    continue
                train = CovariancePairs(
                    pairs.s[~test], pairs.t[~test], pairs.value[~test],
                    pairs.subject_index[~test], pairs.subject_ids,
                    counts=pairs.counts[~test])
                surface = local_linear_surface(train, grid, h, kernel=kernel)
                interp = RegularGridInterpolator(
                    (grid, grid), surface, method="linear")
                pred = interp(np.column_stack([pairs.s[test], pairs.t[test]]))
                score += float(np.sum(
                    pairs.counts[test] * (pairs.value[test] - pred) ** 2))
        except EmptyNeighborhood:
            score = np.inf
        if score <= best_score + 1e-9 * (abs(best_score) + scale):
            best_h, best_score = float(h), min(score, best_score)
    return best_h


@dataclass(frozen=True)
class FpcaResult:
    """Gridded covariance surface with its discretized eigenstructure.

    Eigenfunction columns satisfy delta * sum(phi_l * phi_m) = 1(l == m) on
    the grid; negative eigenvalues are truncated to zero (the raw spectrum is
    kept for diagnostics) and each eigenfunction is signed to be positive at
    its largest-magnitude point.
    """

    grid: np.ndarray
    surface: np.ndarray
    eigenvalues: np.ndarray      # truncated at 0, nonincreasing
    raw_eigenvalues: np.ndarray  # full spectrum before truncation
    eigenfunctions: np.ndarray   # (G, n_kept) columns
    bandwidth: float
    n_components: int
    fve_threshold: float


def eigen_decompose(surface, grid, fve_threshold=0.95, bandwidth=float("nan")):
    """Eigenvalues/eigenfunctions of the integral operator on a uniform grid.

    The operator is discretized as surface * delta; eigenvectors are rescaled
    by 1/sqrt(delta) so the discrete L2 normalization above holds.
    `n_components` is the smallest count whose eigenvalue share reaches
    `fve_threshold`.
    """
    surface = np.asarray(surface, dtype=float)
    grid = np.asarray(grid, dtype=float)
    g = grid.shape[0]
    if surface.shape != (g, g):
        raise ValueError(f"surface shape {surface.shape} does not match grid")
    steps = np.diff(grid)
    if g < 2 or not np.allclose(steps, steps[0], rtol=1e-8, atol=0):
        raise ValueError("grid must be equally spaced with >= 2 points")
    scale = max(1.0, float(np.abs(surface).max()))
    if np.abs(surface - surface.T).max() > 1e-10 * scale:
        raise NonSymmetricInput("surface is not symmetric")
    delta = float(steps[0])
    vals, vecs = np.linalg.eigh(delta * 0.5 * (surface + surface.T))
    order = np.argsort(vals)[::-1]
    raw = vals[order]
    phi = vecs[:, order] / np.sqrt(delta)
    colmax = np.take_along_axis(phi, np.abs(phi).argmax(axis=0)[None, :], axis=0)[0]
    phi = phi * np.where(colmax < 0, -1.0, 1.0)
    eigenvalues = np.maximum(raw, 0.0)
    total = eigenvalues.sum()
    if total <= 0:
        n_components = 0
    else:
        frac = np.cumsum(eigenvalues) / total
        n_components = int(np.searchsorted(frac, fve_threshold - 1e-12) + 1)
    return FpcaResult(grid=grid, surface=surface, eigenvalues=eigenvalues,
                      raw_eigenvalues=raw, eigenfunctions=phi,
                      bandwidth=float(bandwidth), n_components=n_components,
                      fve_threshold=float(fve_threshold))


def bin_pairs(pairs, grid):
    """Aggregate the pair cloud onto nearest grid cells (count-weighted).

    Pair locations snap to the closest cell center and coincident points
    collapse to their mean with a multiplicity count; the weighted smoother
    then reproduces the least-squares objective of the snapped cloud. This
    caps the cloud at G^2 points, which matters because pair counts grow
    quadratically in per-subject visits. Subject identity is not preserved.
    """
    grid = np.asarray(grid, dtype=float)
    delta = grid[1] - grid[0]
    gi = np.clip(np.rint((pairs.s - grid[0]) / delta), 0, grid.size - 1)
    gj = np.clip(np.rint((pairs.t - grid[0]) / delta), 0, grid.size - 1)
    flat = (gi * grid.size + gj).astype(np.intp)
    uniq, inv = np.unique(flat, return_inverse=True)
    counts = np.bincount(inv, minlength=uniq.size).astype(float)
    sums = np.bincount(inv, weights=pairs.value * pairs.counts,
                       minlength=uniq.size)
    totals = np.bincount(inv, weights=pairs.counts, minlength=uniq.size)
    means = sums / totals
    return CovariancePairs(grid[uniq // grid.size], grid[uniq % grid.size],
                           means, np.zeros(uniq.size, dtype=np.intp),
                           ("binned",), counts=totals)


def fit_fpca(ds, resid, grid_size=101, bandwidth=None, fve_threshold=0.95,
             kernel="epanechnikov", binning=False):
    """Raw pairs -> smoothed surface -> eigenstructure, on a uniform grid.

    bandwidth None uses twice the grid spacing; "cv" runs
    select_bandwidth_cov. With binning=True the cloud is aggregated onto the
    grid before smoothing (recommended for large studies).
    """
    grid = np.linspace(0.0, ds.tau, grid_size)
    pairs = raw_covariances(ds, resid)
    if bandwidth == "cv":
        h = select_bandwidth_cov(pairs, grid, kernel=kernel)
    elif bandwidth is None:
        h = 2.0 * (grid[1] - grid[0])
    else:
        h = float(bandwidth)
    if binning:
        pairs = bin_pairs(pairs, grid)
    surface = local_linear_surface(pairs, grid, h, kernel=kernel)
    return eigen_decompose(surface, grid, fve_threshold=fve_threshold,
                           bandwidth=h)
