"""Proportional intensity model for visit times and inverse-intensity weights.

The visit process of each subject is modeled with a Cox-type intensity:
baseline intensity times exp(gamma' g(history)), where g is built from
predictable summaries of the observed past (e.g. the most recently observed
outcome). Fitting proceeds by Newton-Raphson on the log partial likelihood,
a Breslow-Aalen step estimator of the cumulative baseline, kernel smoothing
of its increments, and finally one inverse-intensity weight per observation.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    EmptyRiskSet,
    NoConvergence,
    NonPositiveBandwidth,
    SingularHessian,
)
from .kernels import get_kernel

# --- history covariate builders -------------------------------------------
#
# Each builder maps (SubjectTrajectory, times) -> values using only
# observations strictly before each time (left-continuity), so the resulting
# covariates are predictable.


def _transform(name):
    if name == "identity":
        return lambda v: v
    if name == "log1p":
        return np.log1p
    raise ValueError(f"unknown transform {name!r}")


@dataclass(frozen=True)
class LastOutcome:
    """Most recently observed outcome strictly before t, else `initial`.

    `transform` ("identity" or "log1p") is applied to the outcome values and
    to `initial`, which is expressed in outcome units.
    """

    transform: str = "identity"
    initial: float = 0.0
    time_constant = False

    def evaluate(self, traj, times):
        f = _transform(self.transform)
        if traj.n_observations == 0:
            return np.full(np.shape(times), float(f(self.initial)))
        idx = np.searchsorted(traj.times, times, side="left") - 1
        vals = np.where(idx >= 0, traj.outcomes[np.maximum(idx, 0)], float(self.initial))
        return np.asarray(f(vals), dtype=float)

    def label(self):
        return "last_outcome" if self.transform == "identity" else \
            f"last_outcome_{self.transform}"


@dataclass(frozen=True)
class BaselineCovariate:
    """Covariate value at the subject's first observation, held constant."""

    index: int
    time_constant = True

    def evaluate_constant(self, traj):
        if traj.n_observations == 0:
            raise ValueError(
                f"subject {traj.subject_id!r} has no observations; baseline "
                "covariates are undefined (drop empty subjects first)"
            )
        return float(traj.covariates[0, self.index])

    def evaluate(self, traj, times):
        return np.full(np.shape(times), self.evaluate_constant(traj))

    def label(self):
        return f"baseline_x{self.index}"


@dataclass(frozen=True)
class StaticCovariate:
    """Per-subject constant supplied externally (e.g. enrollment covariates).

    Unlike BaselineCovariate this does not require the subject to have any
    observations, so zero-visit subjects can still contribute risk sets.
    """

    values: dict  # subject_id -> value
    name: str = "static"
    time_constant = True

    def __post_init__(self):
        object.__setattr__(self, "values", dict(self.values))

    def evaluate_constant(self, traj):
        return float(self.values[traj.subject_id])

    def evaluate(self, traj, times):
        return np.full(np.shape(times), self.evaluate_constant(traj))

    def label(self):
        return self.name

    def __hash__(self):
        return hash((self.name, tuple(sorted(self.values))))


@dataclass(frozen=True)
class LastCovariate:
    """Covariate value at the most recent observation strictly before t."""

    index: int
    initial: float = 0.0
    time_constant = False

    def evaluate(self, traj, times):
        if traj.n_observations == 0:
            return np.full(np.shape(times), float(self.initial))
        idx = np.searchsorted(traj.times, times, side="left") - 1
        vals = np.where(idx >= 0, traj.covariates[np.maximum(idx, 0), self.index],
                        float(self.initial))
        return np.asarray(vals, dtype=float)

    def label(self):
        return f"last_x{self.index}"


@dataclass(frozen=True)
class HistoryCovariateSpec:
    """Ordered collection of history covariate builders."""

    covariates: tuple

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates:
            raise ValueError("at least one history covariate is required")

    @property
    def dim(self):
        return len(self.covariates)

    @property
    def names(self):
        return tuple(c.label() for c in self.covariates)


def history_design(ds, spec):
    """Evaluate g at every observation's own time; (N, p) in stacked layout."""
    blocks = []
    for s in ds.subjects:
        if s.n_observations == 0:
            continue
        cols = [c.evaluate(s, s.times) for c in spec.covariates]
        blocks.append(np.column_stack(cols))
    if not blocks:
        return np.empty((0, spec.dim))
    return np.vstack(blocks)


# --- partial likelihood ----------------------------------------------------


class _LikelihoodData:
    """Precomputed event-level quantities shared across Newton iterations.

    Events are all pooled observations in stacked (canonical) layout. For the
    risk-set sums, every covariate is evaluated for every subject at every
    event time; time-constant covariates are stored as an (n,) vector,
    time-varying ones as an (E, n) matrix.
    """

    CHUNK_CELLS = 2_000_000  # bound on chunk_events * n_subjects cells

    def __init__(self, ds, spec):
        self.spec = spec
        self.p = spec.dim
        subjects = ds.subjects
        self.n = len(subjects)
        times_list, subj_idx = [], []
        for i, s in enumerate(subjects):
            if s.n_observations:
                times_list.append(s.times)
                subj_idx.append(np.full(s.n_observations, i, dtype=np.intp))
        if not times_list:
            raise EmptyRiskSet("dataset has no events")
        self.event_times = np.concatenate(times_list)
        self.event_subject = np.concatenate(subj_idx)
        self.n_events = self.event_times.shape[0]
        follow_ups = np.array([s.follow_up for s in subjects])
        # risk indicator 1(C_i >= t) per (event, subject)
        self.at_risk = self.event_times[:, None] <= follow_ups[None, :]
        if not np.all(self.at_risk.any(axis=1)):
            raise EmptyRiskSet("an event time has no at-risk subjects")
        self.const_cols = {}
        self.vary_cols = {}
        for f, cov in enumerate(spec.covariates):
            if cov.time_constant:
                self.const_cols[f] = np.array(
                    [cov.evaluate_constant(s) for s in subjects])
            else:
                mat = np.empty((self.n_events, self.n))
                for i, s in enumerate(subjects):
                    mat[:, i] = cov.evaluate(s, self.event_times)
                self.vary_cols[f] = mat
        self.own_g = np.empty((self.n_events, self.p))
        rows = np.arange(self.n_events)
        for f in range(self.p):
            if f in self.const_cols:
                self.own_g[:, f] = self.const_cols[f][self.event_subject]
            else:
                self.own_g[:, f] = self.vary_cols[f][rows, self.event_subject]

    def _g_chunk(self, f, ev_slice):
        if f in self.const_cols:
            return self.const_cols[f][None, :]
        return self.vary_cols[f][ev_slice]

    def to_chunks(self):
        step = max(1, self.CHUNK_CELLS // max(self.n, 1))
        for start in range(0, self.n_events, step):
            yield slice(start, min(start + step, self.n_events))


# --- fit results -----------------------------------------------------------


@dataclass(frozen=True)
class CumulativeBaseline:
    """Breslow-Aalen step estimate of the cumulative baseline intensity."""

    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        jt.setflags(write=False)
        inc.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "increments", inc)
        if jt.size:
            if np.any(np.diff(jt) <= 0):
                raise ValueError("jump times must be strictly increasing")
            if np.any(inc <= 0):
                raise ValueError("increments must be strictly positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        csum = np.concatenate([[0.0], np.cumsum(self.increments)])
        return csum[idx]

    def total(self):
        return float(np.sum(self.increments))


class SmoothedBaseline:
    """Kernel-smoothed baseline intensity; callable on [0, tau].

    Values are floored at a small positive constant so downstream inversion
    is always defined.
    """

    def __init__(self, cum, tau, bandwidth, kernel="epanechnikov", floor=1e-8):
        if bandwidth <= 0 or not math.isfinite(bandwidth):
            raise NonPositiveBandwidth(f"bandwidth must be > 0, got {bandwidth}")
        self.cum = cum
        self.tau = float(tau)
        self.bandwidth = float(bandwidth)
        self.kernel_name = kernel
        self.floor = float(floor)
        self._kernel = get_kernel(kernel)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tq = np.atleast_1d(t).astype(float)
        # process queries in time order so each block touches few jumps
        order = np.argsort(tq, kind="stable")
        sorted_q = tq[order]
        out_sorted = np.zeros_like(sorted_q)
        jt, inc, h = self.cum.jump_times, self.cum.increments, self.bandwidth
        lo = np.searchsorted(jt, sorted_q - h, side="left")
        hi = np.searchsorted(jt, sorted_q + h, side="right")
        step = 2048
        for start in range(0, sorted_q.size, step):
            sl = slice(start, min(start + step, sorted_q.size))
            a, b = lo[sl.start], hi[min(sl.stop, sorted_q.size) - 1]
            if b <= a:
                continue
            u = (sorted_q[sl, None] - jt[None, a:b]) / h
            out_sorted[sl] = (self._kernel(u) @ inc[a:b]) / h
        out = np.empty_like(out_sorted)
        out[order] = out_sorted
        out = np.maximum(out, self.floor)
        return float(out[0]) if scalar else out


@dataclass(frozen=True)
class IntensityFit:
    """Fitted visit-intensity model: gamma, baseline estimates, metadata."""

    gamma: np.ndarray
    gamma_names: tuple
    cum_baseline: CumulativeBaseline
    baseline: SmoothedBaseline
    bandwidth: float
    kernel: str
    loglik: float
    iterations: int
    converged: bool

    def to_json_dict(self):
        return {
            "gamma": [float(v) for v in self.gamma],
            "gamma_names": list(self.gamma_names),
            "jump_times": [float(v) for v in self.cum_baseline.jump_times],
            "increments": [float(v) for v in self.cum_baseline.increments],
            "bandwidth": float(self.bandwidth),
            "kernel": self.kernel,
            "loglik": float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


@dataclass(frozen=True)
class WeightSet:
    """Per-observation inverse-intensity weights in stacked dataset layout."""

    weights: np.ndarray
    truncation_quantile: float | None
    raw_max: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be strictly positive and finite")


def unit_weights(n):
    """Weight set with every weight 1 (the unweighted comparison method)."""
    return WeightSet(np.ones(int(n)), truncation_quantile=None, raw_max=1.0)


# --- operations ------------------------------------------------------------


def _loglik_terms(data, gamma):
    """(value, gradient, neg_hessian) of the log partial likelihood."""
    gamma = np.asarray(gamma, dtype=float)
    p = data.p
    value = float(np.sum(data.own_g @ gamma))
    gradient = data.own_g.sum(axis=0).astype(float)
    hess = np.zeros((p, p))
    for ev in data.to_chunks():
        nev = ev.stop - ev.start
        lp = np.zeros((nev, data.n))
        for f in range(p):
            lp += gamma[f] * data._g_chunk(f, ev)
        risk = data.at_risk[ev]
        lp = np.where(risk, lp, -np.inf)
        m = lp.max(axis=1)
        w = np.exp(lp - m[:, None])
        w[~risk] = 0.0
        s0 = w.sum(axis=1)
        if np.any(s0 <= 0):
            raise EmptyRiskSet("an event time has no at-risk subjects")
        value -= float(np.sum(m + np.log(s0)))
        gs = [np.broadcast_to(data._g_chunk(f, ev), (nev, data.n)) for f in range(p)]
        s1 = np.empty((nev, p))
        for f in range(p):
            s1[:, f] = np.einsum("ek,ek->e", w, gs[f])
        mean_g = s1 / s0[:, None]
        gradient -= mean_g.sum(axis=0)
        for f in range(p):
            for g2 in range(f, p):
                s2 = np.einsum("ek,ek,ek->e", w, gs[f], gs[g2])
                hval = float(np.sum(s2 / s0 - mean_g[:, f] * mean_g[:, g2]))
                hess[f, g2] += hval
                if g2 != f:
                    hess[g2, f] += hval
    return value, gradient, hess  # hess is the NEGATED hessian (PSD)


def partial_loglik(ds, spec, gamma):
    """Log partial likelihood, analytic gradient, and hessian at gamma.

    Ties are handled by the Breslow convention: every event is scored
    against the full risk set at its time. The returned hessian is negative
    semidefinite.
    """
    data = _LikelihoodData(ds, spec)
    value, gradient, neg_hess = _loglik_terms(data, gamma)
    return value, gradient, -neg_hess


def _check_not_singular(neg_hess):
    w = np.linalg.eigvalsh(neg_hess)
    if w[0] <= 1e-10 * max(1.0, float(w[-1])):
        raise SingularHessian(
            "negated hessian is singular at the initial point even after a "
            "1e-10 ridge; history covariates are degenerate or collinear"
        )


def fit_gamma(ds, spec, init=None, tol=1e-8, max_iter=100):
    """Maximize the log partial likelihood by Newton-Raphson.

    Steps are halved (up to 30 times) until the log likelihood does not
    decrease. Convergence is declared when the gradient sup-norm is <= tol.

    Returns
    -------
    gamma_hat : ndarray
    trace : list of dict
        Per-iteration log likelihood, gradient sup-norm, and step size.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    data = _LikelihoodData(ds, spec)
    gamma = np.zeros(spec.dim) if init is None else np.asarray(init, dtype=float).copy()
    value, grad, neg_hess = _loglik_terms(data, gamma)
    _check_not_singular(neg_hess)
    trace = [{"loglik": value, "grad_norm": float(np.abs(grad).max()), "step": 0.0}]
    for iteration in range(1, max_iter + 1):
        if np.abs(grad).max() <= tol:
            return gamma, trace
        try:
            factor = scipy.linalg.cho_factor(neg_hess)
        except np.linalg.LinAlgError:
            try:
                factor = scipy.linalg.cho_factor(
                    neg_hess + 1e-10 * np.eye(spec.dim))
            except np.linalg.LinAlgError:
                raise SingularHessian(
                    "negated hessian not positive definite after 1e-10 ridge"
                ) from None
        delta = scipy.linalg.cho_solve(factor, grad)
        step = 1.0
        # "does not decrease" is judged with a slack for float rounding of
        # the N-term log-likelihood sum, else halving stalls at the plateau
        slack = 1e-10 * (1.0 + abs(value))
        for _ in range(31):
            cand = gamma + step * delta
            cand_value, cand_grad, cand_hess = _loglik_terms(data, cand)
            if cand_value >= value - slack:
                break
            step *= 0.5
        gamma, value, grad, neg_hess = cand, cand_value, cand_grad, cand_hess
        trace.append({"loglik": value, "grad_norm": float(np.abs(grad).max()),
                      "step": step})
    if np.abs(grad).max() <= tol:
        return gamma, trace
    raise NoConvergence(
        f"Newton-Raphson did not reach tol={tol} in {max_iter} iterations",
        gamma=gamma, trace=trace,
    )


def breslow_cumulative(ds, spec, gamma_hat):
    """Breslow-Aalen estimator of the cumulative baseline intensity.

    One jump per distinct event time u, of size (#events at u) / S0(u).
    A dataset with no events yields the zero function (no jumps).
    """
    if ds.n_observations == 0:
        return CumulativeBaseline(np.empty(0), np.empty(0))
    data = _LikelihoodData(ds, spec)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    log_s0 = np.empty(data.n_events)
    for ev in data.to_chunks():
        nev = ev.stop - ev.start
        lp = np.zeros((nev, data.n))
        for f in range(data.p):
            lp += gamma_hat[f] * data._g_chunk(f, ev)
        risk = data.at_risk[ev]
        lp = np.where(risk, lp, -np.inf)
        m = lp.max(axis=1)
        w = np.exp(lp - m[:, None])
        w[~risk] = 0.0
        log_s0[ev] = m + np.log(w.sum(axis=1))
    order = np.argsort(data.event_times, kind="stable")
    times_sorted = data.event_times[order]
    s0_sorted = np.exp(log_s0[order])
    uniq, first_idx, counts = np.unique(times_sorted, return_index=True,
                                        return_counts=True)
    increments = counts / s0_sorted[first_idx]
    return CumulativeBaseline(uniq, increments)


def smooth_baseline(cum, tau, h, kernel="epanechnikov", floor=1e-8):
    """Kernel-smooth the cumulative baseline's increments into an intensity."""
    return SmoothedBaseline(cum, tau, h, kernel=kernel, floor=floor)


def default_bandwidth(tau, n_obs, c=0.1):
    """Data-adaptive bandwidth c * tau * N^(-1/5)."""
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    if c <= 0:
        raise ValueError("c must be > 0")
    return c * tau * float(n_obs) ** (-0.2)


def compute_weights(ds, spec, fit, truncation_quantile=None):
    """Inverse-intensity weight for every observation.

    w = 1 / baseline(t) * exp(-gamma' g(history before t)). If
    truncation_quantile is given, weights above that empirical quantile of
    the raw weights are capped at the quantile value.
    """
    own_g = history_design(ds, spec)
    lam = fit.baseline(np.concatenate([s.times for s in ds.subjects
                                       if s.n_observations]))
    raw = np.exp(-(own_g @ np.asarray(fit.gamma, dtype=float))) / lam
    raw_max = float(raw.max()) if raw.size else 0.0
    weights = raw
    if truncation_quantile is not None:
        if not 0 < truncation_quantile <= 1:
            raise ValueError("truncation_quantile must be in (0, 1]")
        cap = float(np.quantile(raw, truncation_quantile))
        weights = np.minimum(raw, cap)
    return WeightSet(weights, truncation_quantile=truncation_quantile,
                     raw_max=raw_max)


def fit_intensity(ds, spec, init=None, tol=1e-8, max_iter=100,
                  bandwidth=None, bandwidth_scale=0.1, kernel="epanechnikov"):
    """Full first-stage pipeline: gamma, Breslow baseline, smoothed baseline."""
    gamma_hat, trace = fit_gamma(ds, spec, init=init, tol=tol, max_iter=max_iter)
    cum = breslow_cumulative(ds, spec, gamma_hat)
    n_obs = ds.n_observations
    h = bandwidth if bandwidth is not None else default_bandwidth(
        ds.tau, n_obs, c=bandwidth_scale)
    baseline = smooth_baseline(cum, ds.tau, h, kernel=kernel)
    return IntensityFit(
        gamma=gamma_hat, gamma_names=spec.names, cum_baseline=cum,
        baseline=baseline, bandwidth=h, kernel=kernel,
        loglik=trace[-1]["loglik"], iterations=len(trace) - 1,
        converged=True,
    )
