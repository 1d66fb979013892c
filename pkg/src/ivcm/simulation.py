"""Monte Carlo harness: outcome-dependent visit DGP, replicate studies, metrics.

Subjects carry two correlated Gaussian covariates and a two-component
random function; visits arrive with intensity exp(last observed outcome *
dial + 0.3 x1 + 0.1 x2) so that visit times are outcome dependent. Studies
compare three estimators that differ only in the weights fed to the same
spline fit: estimated inverse-intensity weights (EW), oracle true weights
(TW), and unit weights (UW).
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bootstrap import multiplier_bootstrap, pointwise_band
from .data import LongitudinalDataset, SubjectTrajectory
from .errors import IvcmError, RunawayProcess, StudyAborted
from .fpca import fit_fpca, raw_covariances
from .intensity import (
    HistoryCovariateSpec,
    LastOutcome,
    StaticCovariate,
    compute_weights,
    fit_intensity,
)
from .vcm import eval_beta, fit_vcm, residuals

TAU_DEFAULT = 10.0
ALL_METHODS = ("EW", "TW", "UW")


# --- truth functions (module level so study configs pickle cleanly) --------

def beta1_true(t):
    return np.asarray(t, dtype=float) ** 2 / 100.0


def beta2_true(t):
    return (10.0 - np.asarray(t, dtype=float)) ** 2 / 100.0


def beta3_true(t):
    t = np.asarray(t, dtype=float)
    return 4.0 * t * (10.0 - t) / 100.0


def phi1_fast(t):
    """sqrt(2) sin(2 pi t): period-1 oscillation, L2 norm sqrt(10) on [0,10]."""
    return math.sqrt(2.0) * np.sin(2.0 * np.pi * np.asarray(t, dtype=float))


def phi2_fast(t):
    return math.sqrt(2.0) * np.cos(2.0 * np.pi * np.asarray(t, dtype=float))


def phi1_normalized(t):
    """sqrt(2/10) sin(2 pi t / 10): unit L2 norm on [0, 10]."""
    return math.sqrt(0.2) * np.sin(0.2 * np.pi * np.asarray(t, dtype=float))


def phi2_normalized(t):
    return math.sqrt(0.2) * np.cos(0.2 * np.pi * np.asarray(t, dtype=float))


def constant_baseline(t):
    return np.ones_like(np.asarray(t, dtype=float))


EIGENFUNCTION_SETS = {
    "fast": (phi1_fast, phi2_fast),
    "normalized": (phi1_normalized, phi2_normalized),
}


@dataclass(frozen=True)
class SimulationConfig:
    """Full specification of one Monte Carlo study."""

    n: int
    replicates: int = 200
    seed: int = 0
    tau: float = TAU_DEFAULT
    beta_true: tuple = (beta1_true, beta2_true, beta3_true)
    theta: tuple = (0.4, 0.2)
    eigenfunctions: tuple = (phi1_fast, phi2_fast)
    sigma_eps2: float = 0.2
    cov_corr: float = 2.0 ** -0.5
    gamma_sim: tuple = (1.0, 0.3, 0.1)
    baseline_sim: object = None       # None -> constant 1
    baseline_sim_bound: float = 1.0   # sup of baseline, for the thinning sampler
    sampler: str = "exponential"      # or "thinning"
    initial_last_outcome: float = 0.0
    bootstrap_L: int = 100
    alpha: float = 0.05
    do_bootstrap: bool = True
    do_fpca: bool = True
    truncation_quantile: float | None = 0.9
    coverage_grid_size: int = 100
    ise_grid_size: int = 1001
    fpca_grid_size: int = 101
    fpca_bandwidth: object = 0.4      # float; or None -> 2 * grid spacing; or "cv"
    fve_threshold: float = 0.95
    z_grid: tuple = (3, 4)
    qn_grid: tuple | None = None
    eta_grid: tuple | None = None
    max_events_per_subject: int = 10_000
    failure_budget: float = 0.02

    def __post_init__(self):
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be >= 1")
        t1, t2 = self.theta
        if not (t1 >= t2 >= 0):
            raise ValueError("theta must satisfy theta1 >= theta2 >= 0")
        if self.sigma_eps2 < 0:
            raise ValueError("sigma_eps2 must be >= 0")
        if abs(self.cov_corr) >= 1:
            raise ValueError("|cov_corr| must be < 1")
        if self.sampler not in ("exponential", "thinning"):
            raise ValueError("sampler must be 'exponential' or 'thinning'")
        if self.sampler == "exponential" and self.baseline_sim is not None:
            raise ValueError("exponential sampler requires the constant baseline")


@dataclass
class SubjectOracle:
    """Simulation-time truth for one subject."""

    x: np.ndarray             # (2,)
    b: np.ndarray             # (2,) component scores
    true_weights: np.ndarray  # (m,) 1/intensity at each event


def gen_subject(cfg, rng, subject_id="s0"):
    """Simulate one subject's visit process and outcomes.

    Between events the conditional intensity is constant (time-fixed
    covariates, last outcome updates only at events), so with the constant
    baseline the next gap is exactly exponential; the thinning sampler also
    handles non-constant baselines. The true weight at each event is the
    reciprocal of the intensity evaluated with the pre-event last outcome.
    """
    z = rng.standard_normal(2)
    x1 = z[0]
    x2 = cfg.cov_corr * z[0] + math.sqrt(1.0 - cfg.cov_corr ** 2) * z[1]
    b1 = rng.normal(0.0, math.sqrt(cfg.theta[0])) if cfg.theta[0] > 0 else 0.0
    b2 = rng.normal(0.0, math.sqrt(cfg.theta[1])) if cfg.theta[1] > 0 else 0.0
    g1, g2, g3 = cfg.gamma_sim
    sd_eps = math.sqrt(cfg.sigma_eps2)
    lam0 = cfg.baseline_sim if cfg.baseline_sim is not None else constant_baseline
    beta1, beta2, beta3 = cfg.beta_true
    phi1, phi2 = cfg.eigenfunctions

    t = 0.0
    y_last = cfg.initial_last_outcome
    times, outcomes, tweights = [], [], []
    while True:
        expfac = math.exp(g1 * y_last + g2 * x1 + g3 * x2)
        if cfg.sampler == "exponential":
            t = t + rng.exponential(1.0 / expfac)
            if t > cfg.tau:
                break
        else:
            bound = cfg.baseline_sim_bound * expfac
            while True:
                t = t + rng.exponential(1.0 / bound)
                if t > cfg.tau:
                    break
                if rng.uniform() * bound <= float(lam0(t)) * expfac:
                    break
            if t > cfg.tau:
                break
        tweights.append(1.0 / (float(lam0(t)) * expfac))
        y = (float(beta1(t)) + float(beta2(t)) * x1 + float(beta3(t)) * x2
             + b1 * float(phi1(t)) + b2 * float(phi2(t))
             + (rng.normal(0.0, sd_eps) if sd_eps > 0 else 0.0))
        times.append(t)
        outcomes.append(y)
        y_last = y
        if len(times) > cfg.max_events_per_subject:
            raise RunawayProcess(
                f"subject {subject_id!r} exceeded "
                f"{cfg.max_events_per_subject} events")
    m = len(times)
    covs = np.column_stack([np.ones(m), np.full(m, x1), np.full(m, x2)]) \
        if m else np.empty((0, 3))
    traj = SubjectTrajectory(subject_id, cfg.tau, np.array(times),
                             np.array(outcomes), covs)
    oracle = SubjectOracle(x=np.array([x1, x2]), b=np.array([b1, b2]),
                           true_weights=np.array(tweights))
    return traj, oracle


def generate_dataset(cfg, rng):
    """Simulate a full dataset plus its oracle.

    Returns
    -------
    ds : LongitudinalDataset
        Subject ids are zero-padded so canonical (sorted) order equals
        generation order; zero-visit subjects are kept (they still belong to
        intensity-model risk sets).
    oracle : dict
        'true_weights' (stacked layout), 'x1'/'x2' per-subject dicts,
        'b' (n, 2), 'events_per_subject' (n,).
    """
    width = max(4, len(str(cfg.n - 1)))
    subjects, weights, x1d, x2d, bs, counts = [], [], {}, {}, [], []
    for i in range(cfg.n):
        sid = f"s{i:0{width}d}"
        traj, orc = gen_subject(cfg, rng, subject_id=sid)
        subjects.append(traj)
        weights.append(orc.true_weights)
        x1d[sid] = float(orc.x[0])
        x2d[sid] = float(orc.x[1])
        bs.append(orc.b)
        counts.append(traj.n_observations)
    ds = LongitudinalDataset(tuple(subjects), d=3, tau=cfg.tau,
                             covariate_names=("intercept", "x1", "x2"))
    oracle = {
        "true_weights": (np.concatenate(weights) if weights else np.empty(0)),
        "x1": x1d, "x2": x2d, "b": np.array(bs),
        "events_per_subject": np.array(counts, dtype=int),
    }
    return ds, oracle


def history_spec_for(cfg, oracle):
    """The correctly specified g: last outcome plus enrollment covariates."""
    return HistoryCovariateSpec((
        LastOutcome(initial=cfg.initial_last_outcome),
        StaticCovariate(oracle["x1"], "x1"),
        StaticCovariate(oracle["x2"], "x2"),
    ))


def ise(grid, values, truth):
    """Trapezoid integral of the squared difference from a true function."""
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    diff = values - np.asarray(truth(grid), dtype=float)
    return float(np.trapezoid(diff * diff, grid))


def _covariance_truth(cfg, grid):
    phi1, phi2 = cfg.eigenfunctions
    p1 = np.asarray(phi1(grid), dtype=float)
    p2 = np.asarray(phi2(grid), dtype=float)
    return (cfg.theta[0] * np.outer(p1, p1) + cfg.theta[1] * np.outer(p2, p2))


def run_replicate(cfg, rep_index, methods=ALL_METHODS):
    """One end-to-end replicate; returns per-method metric dict."""
    rng = np.random.default_rng((cfg.seed, rep_index))
    ds, oracle = generate_dataset(cfg, rng)
    n_obs = ds.n_observations
    out = {
        "events_per_subject": oracle["events_per_subject"],
        "methods": {},
    }
    weights_by_method = {}
    if "EW" in methods:
        spec = history_spec_for(cfg, oracle)
        ifit = fit_intensity(ds, spec)
        wset = compute_weights(ds, spec, ifit,
                               truncation_quantile=cfg.truncation_quantile)
        weights_by_method["EW"] = wset.weights
        out["gamma_hat"] = np.asarray(ifit.gamma, dtype=float)
        out["newton_iterations"] = ifit.iterations
        out["newton_converged"] = ifit.converged
    if "TW" in methods:
        tw = oracle["true_weights"]
        if cfg.truncation_quantile is not None and tw.size:
            tw = np.minimum(tw, np.quantile(tw, cfg.truncation_quantile))
        weights_by_method["TW"] = tw
    if "UW" in methods:
        weights_by_method["UW"] = np.ones(n_obs)

    ise_grid = np.linspace(0.0, cfg.tau, cfg.ise_grid_size)
    cov_grid = np.linspace(0.0, cfg.tau, cfg.coverage_grid_size)
    fpca_grid = np.linspace(0.0, cfg.tau, cfg.fpca_grid_size)
    sigma_truth = _covariance_truth(cfg, fpca_grid) if cfg.do_fpca else None

    design_cache = {}
    for mi, method in enumerate(methods):
        w = weights_by_method[method]
        fit, selection, design = fit_vcm(
            ds, weights=w, z_grid=cfg.z_grid, qn_grid=cfg.qn_grid,
            eta_grid=cfg.eta_grid, design_cache=design_cache)
        beta_on_grid = eval_beta(fit, ise_grid)
        m = {
            "ise": np.array([
                ise(ise_grid, beta_on_grid[:, j], cfg.beta_true[j])
                for j in range(3)]),
            "order": selection.order, "dimension": selection.dimension,
            "eta": np.asarray(selection.eta, dtype=float),
        }
        if cfg.do_bootstrap:
            ens = multiplier_bootstrap(
                design, selection.eta, n_replicates=cfg.bootstrap_L,
                seed=(cfg.seed, rep_index, 7000 + mi))
            cover = np.empty((3, cfg.coverage_grid_size), dtype=bool)
            for j in range(3):
                band = pointwise_band(ens, fit, j, cov_grid, alpha=cfg.alpha)
                cover[j] = band.contains(cfg.beta_true[j](cov_grid))
            m["coverage_curve"] = cover
            m["coverage"] = cover.mean(axis=1) * 100.0
        if cfg.do_fpca:
            res = residuals(ds, fit)
            fp = fit_fpca(ds, res, grid_size=cfg.fpca_grid_size,
                          bandwidth=cfg.fpca_bandwidth,
                          fve_threshold=cfg.fve_threshold, binning=True)
            dcell = fpca_grid[1] - fpca_grid[0]
            diff = fp.surface - sigma_truth
            m["cov_sq_err"] = float(np.trapezoid(
                np.trapezoid(diff * diff, dx=dcell, axis=1), dx=dcell))
            phi_hat = fp.eigenfunctions[:, 0]
            phi_tru = np.asarray(cfg.eigenfunctions[0](fpca_grid), dtype=float)
            if np.trapezoid(phi_hat * phi_tru, fpca_grid) < 0:
                phi_hat = -phi_hat
            m["phi1_sq_err"] = float(np.trapezoid(
                (phi_hat - phi_tru) ** 2, fpca_grid))
            m["theta1_hat"] = float(fp.eigenvalues[0])
            m["theta1_sq_err"] = float((fp.eigenvalues[0] - cfg.theta[0]) ** 2)
        out["methods"][method] = m
    return out


def _worker(args):
    cfg, rep, methods = args
    try:
        return rep, "ok", run_replicate(cfg, rep, methods)
    except (IvcmError, np.linalg.LinAlgError) as exc:
        return rep, "fail", f"{type(exc).__name__}: {exc}"


@dataclass
class MetricsReport:
    """Aggregated study results; all arrays indexed by surviving replicate."""

    config: SimulationConfig
    methods: tuple
    replicate_ids: np.ndarray
    ise: dict                 # method -> (R, 3)
    coverage: dict            # method -> (R, 3) or None
    coverage_curves: dict     # method -> (3, G) mean indicator or None
    fpca_errors: dict         # method -> (R, 3) [cov, phi1, theta1] or None
    theta1_hats: dict         # method -> (R,) or None
    tuning: dict              # method -> (R, 2 + d) [order, dim, eta...]
    gamma_hats: np.ndarray | None
    newton_iterations: np.ndarray | None
    events_per_subject: np.ndarray
    failures: tuple = field(default=())

    def mise(self, method):
        return self.ise[method].mean(axis=0)

    def ise_sd(self, method):
        return self.ise[method].std(axis=0, ddof=1)

    def mean_coverage(self, method):
        cov = self.coverage[method]
        return None if cov is None else cov.mean(axis=0)

    def summary_rows(self):
        """Per-parameter rows in the layout of the headline results table."""
        rows = []
        labels = ["beta1(t)", "beta2(t)", "beta3(t)"]
        for j, label in enumerate(labels):
            row = {"par": label}
            for m in self.methods:
                row[f"mise_{m}"] = float(self.mise(m)[j])
                row[f"sd_{m}"] = float(self.ise_sd(m)[j])
                cov = self.mean_coverage(m)
                row[f"cp_{m}"] = None if cov is None else float(cov[j])
            rows.append(row)
        if all(self.fpca_errors[m] is not None for m in self.methods):
            for k, label in enumerate(["Sigma_b(s,t)", "phi1(t)", "theta1"]):
                row = {"par": label}
                for m in self.methods:
                    err = self.fpca_errors[m][:, k]
                    row[f"mise_{m}"] = float(err.mean())
                    row[f"sd_{m}"] = float(err.std(ddof=1))
                    row[f"cp_{m}"] = None
                rows.append(row)
        return rows


def run_study(cfg, methods=ALL_METHODS, threads=1, progress=None):
    """Run all replicates of a study and aggregate the metrics.

    Replicates are independent, keyed by (cfg.seed, replicate index), and are
    aggregated in index order, so results do not depend on `threads`.
    Replicate failures are tolerated up to cfg.failure_budget (fraction),
    after which StudyAborted is raised.
    """
    methods = tuple(methods)
    jobs = [(cfg, rep, methods) for rep in range(cfg.replicates)]
    results = [None] * cfg.replicates
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, status, payload in pool.map(_worker, jobs, chunksize=1):
                results[rep] = (status, payload)
                if progress:
                    progress(rep)
    else:
        for job in jobs:
            rep, status, payload = _worker(job)
            results[rep] = (status, payload)
            if progress:
                progress(rep)

    failures = tuple((rep, payload) for rep, (status, payload)
                     in enumerate(results) if status == "fail")
    if failures and len(failures) / cfg.replicates >= cfg.failure_budget:
        raise StudyAborted(
            f"{len(failures)}/{cfg.replicates} replicates failed "
            f"(budget {cfg.failure_budget:.0%}): {failures[:3]}")
    ok = [(rep, payload) for rep, (status, payload) in enumerate(results)
          if status == "ok"]
    if not ok:
        raise StudyAborted("every replicate failed")

    rep_ids = np.array([rep for rep, _ in ok])
    ise_d, cov_d, curves_d, fpca_d, th_d, tun_d = {}, {}, {}, {}, {}, {}
    for m in methods:
        ise_d[m] = np.array([r["methods"][m]["ise"] for _, r in ok])
        if cfg.do_bootstrap:
            cov_d[m] = np.array([r["methods"][m]["coverage"] for _, r in ok])
            curves_d[m] = np.mean(
                [r["methods"][m]["coverage_curve"] for _, r in ok], axis=0) * 100.0
        else:
            cov_d[m] = None
            curves_d[m] = None
        if cfg.do_fpca:
            fpca_d[m] = np.array([
                [r["methods"][m]["cov_sq_err"], r["methods"][m]["phi1_sq_err"],
                 r["methods"][m]["theta1_sq_err"]] for _, r in ok])
            th_d[m] = np.array([r["methods"][m]["theta1_hat"] for _, r in ok])
        else:
            fpca_d[m] = None
            th_d[m] = None
        tun_d[m] = np.array([
            [r["methods"][m]["order"], r["methods"][m]["dimension"],
             *r["methods"][m]["eta"]] for _, r in ok])
    gamma = np.array([r["gamma_hat"] for _, r in ok]) if "EW" in methods else None
    iters = np.array([r["newton_iterations"] for _, r in ok]) \
        if "EW" in methods else None
    events = np.concatenate([r["events_per_subject"] for _, r in ok])
    return MetricsReport(
        config=cfg, methods=methods, replicate_ids=rep_ids, ise=ise_d,
        coverage=cov_d, coverage_curves=curves_d, fpca_errors=fpca_d,
        theta1_hats=th_d, tuning=tun_d, gamma_hats=gamma,
        newton_iterations=iters, events_per_subject=events,
        failures=failures,
    )


def with_dial(cfg, dial):
    """Copy of cfg with the outcome coefficient of the visit model set."""
    return replace(cfg, gamma_sim=(float(dial),) + tuple(cfg.gamma_sim[1:]))
