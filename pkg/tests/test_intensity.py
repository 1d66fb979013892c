import numpy as np
import pytest

from ivcm.data import LongitudinalDataset, SubjectTrajectory
from ivcm.errors import NonPositiveBandwidth, SingularHessian
from ivcm.intensity import (
    BaselineCovariate,
    CumulativeBaseline,
    HistoryCovariateSpec,
    LastCovariate,
    LastOutcome,
    StaticCovariate,
    breslow_cumulative,
    compute_weights,
    default_bandwidth,
    fit_gamma,
    fit_intensity,
    partial_loglik,
    smooth_baseline,
)


def subject(sid, times, outcomes=None, follow_up=10.0, xcol=None):
    times = np.asarray(times, dtype=float)
    m = times.shape[0]
    outcomes = np.zeros(m) if outcomes is None else np.asarray(outcomes, float)
    if xcol is None:
        covs = np.ones((m, 1))
    else:
        covs = np.column_stack([np.ones(m), np.full(m, xcol)])
    return SubjectTrajectory(sid, follow_up, times, outcomes, covs)


def toy_dataset(seed=0, n=3, m=3, tau=10.0):
    rng = np.random.default_rng(seed)
    subs = []
    for i in range(n):
        t = np.sort(rng.uniform(0, tau * 0.9, m))
        subs.append(subject(f"s{i}", t, rng.normal(0, 1, m)))
    return LongitudinalDataset(tuple(subs), d=1, tau=tau)


LAST_OUTCOME = HistoryCovariateSpec((LastOutcome(initial=0.0),))


class TestPartialLoglik:
    def test_single_event_two_at_risk(self):
        # one event, both subjects at risk, g == 0 there: value = -log 2
        s1 = subject("s1", [1.0], [5.0])
        s2 = subject("s2", [])
        ds = LongitudinalDataset((s1, s2), d=1, tau=10.0)
        value, grad, hess = partial_loglik(ds, LAST_OUTCOME, np.zeros(1))
        assert value == pytest.approx(-np.log(2.0), abs=1e-12)
        assert grad == pytest.approx(0.0, abs=1e-12)

    def test_zero_gamma_counts_risk_sets(self):
        s1 = subject("a", [1.0, 2.0])
        s2 = subject("b", [0.5], follow_up=1.5)
        ds = LongitudinalDataset((s1, s2), d=1, tau=10.0)
        value, _, _ = partial_loglik(ds, LAST_OUTCOME, np.zeros(1))
        # events at 0.5, 1.0 have 2 at risk; event at 2.0 only subject a
        assert value == pytest.approx(-(np.log(2) + np.log(2) + np.log(1)),
                                      abs=1e-12)

    def test_gradient_hessian_match_finite_differences(self):
        ds = toy_dataset(seed=1)
        spec = HistoryCovariateSpec((LastOutcome(), LastCovariate(0, initial=1.0)))
        gamma = np.array([0.4, -0.3])
        value, grad, hess = partial_loglik(ds, spec, gamma)
        eps = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = eps
            vp, gp, _ = partial_loglik(ds, spec, gamma + e)
            vm, gm, _ = partial_loglik(ds, spec, gamma - e)
            assert (vp - vm) / (2 * eps) == pytest.approx(grad[j], rel=1e-6,
                                                          abs=1e-8)
            np.testing.assert_allclose((gp - gm) / (2 * eps), hess[:, j],
                                       rtol=1e-5, atol=1e-6)

    def test_hessian_negative_semidefinite(self):
        for seed in range(5):
            ds = toy_dataset(seed=seed, n=4, m=4)
            spec = HistoryCovariateSpec((LastOutcome(),))
            gamma = np.random.default_rng(seed).normal(0, 0.5, 1)
            _, _, hess = partial_loglik(ds, spec, gamma)
            assert np.linalg.eigvalsh(hess).max() <= 1e-8


class TestFitGamma:
    def test_degenerate_design_raises(self):
        # a single covariate that is identically zero
        ds = toy_dataset(seed=2)
        spec = HistoryCovariateSpec((LastCovariate(0, initial=0.0),))
        # covariate column 0 is the intercept == 1; use a truly zero builder
        zero = StaticCovariate({s.subject_id: 0.0 for s in ds.subjects}, "zero")
        with pytest.raises(SingularHessian):
            fit_gamma(ds, HistoryCovariateSpec((zero,)))

    def test_collinear_covariates_raise(self):
        ds = toy_dataset(seed=3)
        spec = HistoryCovariateSpec((LastOutcome(), LastOutcome()))
        with pytest.raises(SingularHessian):
            fit_gamma(ds, spec)

    def test_refit_from_solution_is_immediate(self):
        rng = np.random.default_rng(4)
        subs = {}
        trajs = []
        for i in range(60):
            x = rng.normal()
            sid = f"s{i:03d}"
            subs[sid] = x
            t, times = 0.0, []
            rate = np.exp(0.4 * x)
            while True:
                t += rng.exponential(1 / rate)
                if t > 10:
                    break
                times.append(t)
            trajs.append(subject(sid, times, rng.normal(0, 1, len(times))))
        ds = LongitudinalDataset(tuple(trajs), d=1, tau=10.0)
        spec = HistoryCovariateSpec((StaticCovariate(subs, "x"),))
        gamma, trace = fit_gamma(ds, spec)
        assert trace[-1]["grad_norm"] <= 1e-8
        gamma2, trace2 = fit_gamma(ds, spec, init=gamma)
        assert len(trace2) - 1 <= 2
        assert np.abs(gamma2 - gamma).max() <= 1e-10

    def test_subject_reordering_invariance(self):
        ds = toy_dataset(seed=5, n=6, m=3)
        spec = HistoryCovariateSpec((LastOutcome(),))
        g1, _ = fit_gamma(ds, spec)
        reordered = LongitudinalDataset(tuple(reversed(ds.subjects)), d=1,
                                        tau=ds.tau)
        g2, _ = fit_gamma(reordered, spec)
        assert np.abs(g1 - g2).max() <= 1e-6

    def test_shift_invariance_of_gamma(self):
        # g -> g + constant leaves gamma_hat unchanged
        ds = toy_dataset(seed=6, n=6, m=3)
        g1, _ = fit_gamma(ds, HistoryCovariateSpec((LastOutcome(initial=0.0),)))
        shifted = HistoryCovariateSpec((LastOutcome(initial=0.0),))

        class Shifted:
            time_constant = False

            def evaluate(self, traj, times):
                return LastOutcome(initial=0.0).evaluate(traj, times) + 5.0

            def label(self):
                return "shifted"

        g2, _ = fit_gamma(ds, HistoryCovariateSpec((Shifted(),)))
        assert np.abs(g1 - g2).max() <= 1e-6


class TestBreslow:
    def test_zero_gamma_uniform_risk(self):
        # gamma = 0, all subjects followed to tau: jump = d_u / n
        subs = (subject("a", [1.0, 3.0]), subject("b", [2.0]), subject("c", []))
        ds = LongitudinalDataset(subs, d=1, tau=10.0)
        cum = breslow_cumulative(ds, LAST_OUTCOME, np.zeros(1))
        np.testing.assert_allclose(cum.jump_times, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(cum.increments, [1 / 3, 1 / 3, 1 / 3])

    def test_single_subject_unit_jumps(self):
        ds = LongitudinalDataset((subject("a", [1.0, 2.0]),), d=1, tau=10.0)
        cum = breslow_cumulative(ds, LAST_OUTCOME, np.zeros(1))
        np.testing.assert_allclose(cum.increments, [1.0, 1.0])
        assert cum(0.5) == 0.0
        assert cum(1.5) == 1.0
        assert cum(10.0) == 2.0

    def test_empty_event_set_gives_zero_function(self):
        ds = LongitudinalDataset((subject("a", []),), d=1, tau=10.0)
        cum = breslow_cumulative(ds, LAST_OUTCOME, np.zeros(1))
        assert cum.jump_times.size == 0
        assert cum(7.0) == 0.0

    def test_one_jump_per_distinct_time_and_monotone(self):
        subs = (subject("a", [1.0, 2.0]), subject("b", [1.0]))
        ds = LongitudinalDataset(subs, d=1, tau=10.0)
        cum = breslow_cumulative(ds, LAST_OUTCOME, np.zeros(1))
        np.testing.assert_allclose(cum.jump_times, [1.0, 2.0])
        assert np.all(cum.increments > 0)
        # tied events at t=1 use the full risk set: jump 2/2
        np.testing.assert_allclose(cum.increments, [1.0, 0.5])


class TestSmoothBaseline:
    def test_single_jump_kernel_values(self):
        cum = CumulativeBaseline(np.array([5.0]), np.array([1.0]))
        lam = smooth_baseline(cum, 10.0, 1.0)
        assert lam(5.0) == pytest.approx(0.75)
        assert lam(6.5) == pytest.approx(1e-8)  # outside support -> floor

    def test_discretized_constant_intensity_recovered(self):
        delta = 1e-4
        c = 2.0
        jumps = np.arange(delta, 10.0 + delta / 2, delta)
        cum = CumulativeBaseline(jumps, np.full(jumps.size, delta * c))
        lam = smooth_baseline(cum, 10.0, 0.5)
        t = np.linspace(1.0, 9.0, 7)
        assert np.abs(lam(t) - c).max() <= 0.01 * c

    def test_large_bandwidth_limit(self):
        cum = CumulativeBaseline(np.array([2.0, 5.0]), np.array([1.0, 2.0]))
        h = 1e6
        lam = smooth_baseline(cum, 10.0, h)
        assert lam(3.3) == pytest.approx(0.75 * cum.total() / h, rel=1e-6)

    def test_bandwidth_must_be_positive(self):
        cum = CumulativeBaseline(np.array([1.0]), np.array([1.0]))
        with pytest.raises(NonPositiveBandwidth):
            smooth_baseline(cum, 10.0, 0.0)

    def test_mass_preserved_up_to_boundary_loss(self):
        rng = np.random.default_rng(8)
        jumps = np.sort(rng.uniform(0, 10, 200))
        inc = rng.uniform(0.01, 0.1, 200)
        cum = CumulativeBaseline(jumps, inc)
        h = 0.4
        lam = smooth_baseline(cum, 10.0, h)
        grid = np.linspace(0, 10, 4001)
        integral = np.trapezoid(lam(grid), grid)
        assert abs(integral - cum.total()) <= cum.total() * (2 * h / 10 + 1e-6)


class TestDefaultBandwidth:
    def test_formula_values(self):
        assert default_bandwidth(10.0, 100000, 0.1) == pytest.approx(0.1)
        assert default_bandwidth(10.0, 1, 0.1) == pytest.approx(1.0)
        assert default_bandwidth(1.0, 32, 1.0) == pytest.approx(0.5)


class TestComputeWeights:
    def test_unit_case(self):
        ds = toy_dataset(seed=9)
        fit = fit_intensity(ds, LAST_OUTCOME, max_iter=200)
        flat = CumulativeBaseline(np.array([5.0]), np.array([1.0]))

        class One:
            def __call__(self, t):
                return np.ones_like(np.asarray(t, dtype=float))

        from dataclasses import replace
        fit_unit = replace(fit, gamma=np.zeros(1), baseline=One())
        ws = compute_weights(ds, LAST_OUTCOME, fit_unit)
        np.testing.assert_allclose(ws.weights, 1.0)

    def test_formula_arithmetic(self):
        # gamma = 1, last outcome = 2, baseline = 0.5 -> weight = 2 e^{-2}
        s1 = subject("a", [1.0, 4.0], [2.0, 0.0])
        ds = LongitudinalDataset((s1,), d=1, tau=10.0)

        class Half:
            def __call__(self, t):
                return np.full(np.shape(t), 0.5)

        from ivcm.intensity import IntensityFit
        fit = IntensityFit(
            gamma=np.array([1.0]), gamma_names=("last_outcome",),
            cum_baseline=CumulativeBaseline(np.empty(0), np.empty(0)),
            baseline=Half(), bandwidth=1.0, kernel="epanechnikov",
            loglik=0.0, iterations=0, converged=True)
        ws = compute_weights(ds, LAST_OUTCOME, fit)
        # first observation: last outcome before t=1 is initial 0 -> e^0 / 0.5
        assert ws.weights[0] == pytest.approx(2.0)
        # second: last outcome 2 -> 2 * e^{-2}
        assert ws.weights[1] == pytest.approx(2.0 * np.exp(-2.0))

    def test_truncation_contract(self):
        ds = toy_dataset(seed=10, n=5, m=2)
        fit = fit_intensity(ds, LAST_OUTCOME, max_iter=200)
        ws = compute_weights(ds, LAST_OUTCOME, fit, truncation_quantile=0.9)
        raw = compute_weights(ds, LAST_OUTCOME, fit)
        cap = np.quantile(raw.weights, 0.9)
        assert ws.weights.max() <= cap + 1e-15
        np.testing.assert_allclose(ws.weights, np.minimum(raw.weights, cap))
        assert ws.raw_max == pytest.approx(raw.weights.max())

    def test_homogeneous_in_baseline_scale(self):
        ds = toy_dataset(seed=11)
        fit = fit_intensity(ds, LAST_OUTCOME, max_iter=200)
        base = compute_weights(ds, LAST_OUTCOME, fit)

        kappa = 3.7
        scaled_baseline = fit.baseline

        class Scaled:
            def __call__(self, t):
                return kappa * scaled_baseline(t)

        from dataclasses import replace
        fit2 = replace(fit, baseline=Scaled())
        scaled = compute_weights(ds, LAST_OUTCOME, fit2)
        np.testing.assert_allclose(scaled.weights, base.weights / kappa,
                                   rtol=1e-12)


class TestSerialization:
    def test_intensity_fit_json_keys(self):
        ds = toy_dataset(seed=12)
        fit = fit_intensity(ds, LAST_OUTCOME, max_iter=200)
        doc = fit.to_json_dict()
        for key in ("gamma", "jump_times", "increments", "bandwidth",
                    "kernel", "converged"):
            assert key in doc
        assert len(doc["jump_times"]) == len(doc["increments"])
        import json
        json.dumps(doc)


class TestHistoryCovariates:
    def test_last_outcome_strictly_before(self):
        s = subject("a", [1.0, 2.0, 5.0], [10.0, 20.0, 50.0])
        lo = LastOutcome(initial=-1.0)
        vals = lo.evaluate(s, np.array([0.5, 1.0, 1.5, 2.0, 6.0]))
        np.testing.assert_allclose(vals, [-1.0, -1.0, 10.0, 10.0, 50.0])

    def test_log1p_transform(self):
        s = subject("a", [1.0], [3.0])
        lo = LastOutcome(transform="log1p", initial=0.0)
        vals = lo.evaluate(s, np.array([0.5, 2.0]))
        np.testing.assert_allclose(vals, [0.0, np.log1p(3.0)])

    def test_baseline_covariate_requires_observations(self):
        s = subject("a", [], xcol=None)
        with pytest.raises(ValueError):
            BaselineCovariate(0).evaluate_constant(s)
