import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metricslope.diagnostics import (CSV_COLUMNS, DescentParams, Trace, check_basic_descent,
                                     check_key_inequality, check_slope_descent,
                                     criticality_report, error_bound_radii, gap_ratios,
                                     rate_fit, trace_from_csv, trace_slope_samples,
                                     trace_to_csv, value_convergence_report)
from metricslope.errors import InsufficientDataError, InvalidArgumentError
from metricslope.metric import Objective
from metricslope.slope import PowerForm, fit_kl_exponent

square = Objective(1, lambda x: float(x[0] ** 2), lambda x: 2 * x, known_inf=0.0)
absval = Objective(1, lambda x: float(abs(x[0])), lambda x: np.sign(x), known_inf=0.0)


def halving_trace(K=30):
    # prox point on x^2 with alpha = 1: x_k = 2^-k
    return Trace.from_iterates(square, [2.0 ** -k for k in range(K + 1)])


def abs_trace():
    # soft-threshold from x0 = 2 with alpha = 1
    return Trace.from_iterates(absval, [2.0, 1.5, 1.0, 0.5, 0.0])


def constant_trace(n=5):
    return Trace.from_iterates(square, [0.0] * n)


def synthetic(values, steps, slopes, gaps=None):
    n = len(values)
    return Trace(np.arange(n, dtype=float), values, gaps, steps, slopes)


class TestTrace:
    def test_lengths(self):
        with pytest.raises(InvalidArgumentError):
            Trace([[0.0], [1.0]], [1.0, 0.0], None, [1.0, 2.0])
        with pytest.raises(InvalidArgumentError):
            Trace([[0.0], [1.0]], [1.0], None, [1.0])

    def test_from_iterates_fields(self):
        t = halving_trace(3)
        assert np.array_equal(t.gaps, [1, 0.25, 0.0625, 0.015625])
        assert np.array_equal(t.step_dists, [0.5, 0.25, 0.125])
        assert np.array_equal(t.slopes, [2, 1, 0.5, 0.25])
        assert t.meta["slope_source"] == "gradient"

    def test_sampled_slopes_recorded(self):
        f = Objective(1, lambda x: float(x[0] ** 2), known_inf=0.0)
        t = Trace.from_iterates(f, [1.0, 0.5])
        assert t.meta["slope_source"] == "sampled"
        assert abs(t.slopes[0] - 2.0) < 1e-3

    def test_tolerance_forwarding(self):
        t = Trace([[0.0]], [0.0], None, [], meta={"subproblem_tol": 1e-6})
        assert t.tol == pytest.approx(1e-9 + 1e-6)

    def test_equality_ignores_meta(self):
        a = halving_trace(4)
        b = Trace(a.iterates, a.values, a.gaps, a.step_dists, a.slopes, None, {"x": 1})
        assert a == b


class TestBasicDescent:
    def test_halving(self):
        r = check_basic_descent(halving_trace(), 0.25)
        assert r.passed and r.worst_margin >= 0 and r.steps_checked == 30

    def test_constant(self):
        r = check_basic_descent(constant_trace(), 0.25)
        assert r.passed and r.worst_margin == 0.0

    def test_uphill_reported(self):
        t = synthetic([3.0, 2.0, 2.5, 1.0], [1, 1, 1], [0, 0, 0, 0])
        r = check_basic_descent(t, 0.1)
        assert r.violating_steps == [2] and not r.passed

    def test_needs_slopes(self):
        with pytest.raises(InvalidArgumentError):
            check_basic_descent(synthetic([1.0, 0.0], [1.0], None), 0.1)

    def test_report_invariant(self):
        r = check_basic_descent(halving_trace(), 10.0)
        assert not r.passed and r.worst_margin < -r.tol
        assert (r.worst_margin >= -r.tol) == (not r.violating_steps)


class TestSlopeDescent:
    def test_halving_first_step_tight(self):
        r = check_slope_descent(halving_trace(), 1.0, 0.5)
        assert r.passed
        m1, m2 = r.margins[0]
        assert m1 == pytest.approx(0.75 - 0.25) and m2 == 0.0

    def test_soft_threshold(self):
        r = check_slope_descent(abs_trace(), 1.0, 0.5)
        assert r.passed
        assert np.allclose(r.margins[:3], [[0.25, 0.0]] * 3)

    def test_constant(self):
        r = check_slope_descent(constant_trace(), 1.0, 0.5)
        assert np.array_equal(r.margins, np.zeros((4, 2)))

    @given(st.lists(st.tuples(st.floats(0, 2), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
                    min_size=1, max_size=20),
           st.floats(0.1, 3), st.floats(0.1, 3))
    def test_implies_basic_descent(self, steps, alpha, beta):
        # build traces satisfying slope descent by construction
        d = [s[0] for s in steps]
        slopes = [0.0] + [s[1] * di / beta for s, di in zip(steps, d)]
        values = [10.0]
        for s, di in zip(steps, d):
            values.append(values[-1] - alpha * di ** 2 - s[2])
        t = synthetic(values, d, slopes)
        if check_slope_descent(t, alpha, beta).passed:
            assert check_basic_descent(t, alpha * beta ** 2).passed

    def test_random_implication_1000(self, rng):
        for _ in range(1000):
            n = rng.integers(2, 8)
            values = np.sort(rng.uniform(0, 1, n))[::-1]
            steps = rng.uniform(0, 1, n - 1)
            slopes = rng.uniform(0, 1, n)
            a, b = rng.uniform(0.1, 2, 2)
            t = synthetic(values, steps, slopes)
            if check_slope_descent(t, a, b).passed:
                assert check_basic_descent(t, a * b * b).passed


class TestKeyInequality:
    def test_halving(self):
        r = check_key_inequality(halving_trace(), PowerForm(1, 0.5), 0.25)
        assert r.passed
        g = halving_trace().gaps
        assert np.allclose(r.margins, 0.5 * g[:-1])

    def test_zero_delta(self):
        t = halving_trace()
        r = check_key_inequality(t, PowerForm(1, 0.5), 0.0)
        assert np.allclose(r.margins, -np.diff(t.gaps))

    def test_oversized_delta(self):
        r = check_key_inequality(halving_trace(), PowerForm(1, 0.5), 10.0)
        # margin is -9.25 tau_{k-1}: negative everywhere, beyond tol while gaps are large
        assert np.all(r.margins < 0)
        assert r.violating_steps == list(range(1, 18))

    def test_truncates_at_zero_gap(self):
        r = check_key_inequality(abs_trace(), PowerForm(1, 0.0), 0.25)
        assert r.steps_checked == 3 and "truncated" in r.notes


class TestValueConvergence:
    def test_halving(self):
        r = value_convergence_report(halving_trace(40))
        k = np.arange(41)
        assert r.monotone and np.allclose(r.k_tau_trend, k * 4.0 ** -k)
        assert r.k_tau_sup_tail < r.k_tau_sup_head

    def test_nonmonotone(self):
        t = Trace(np.zeros(4), [1.0, 0.5, 0.7, 0.1], [1.0, 0.5, 0.7, 0.1], [0, 0, 0])
        assert not value_convergence_report(t).monotone


class TestRateFit:
    def test_linear_ratio(self):
        r = rate_fit(halving_trace(40))
        assert r.ratio_limit == pytest.approx(0.25, abs=1e-12)

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_power_law_recovery(self, p):
        k = np.arange(1, 1001)
        g = np.concatenate([[1.0], 3.0 * k ** -float(p)])
        t = Trace(np.zeros(1001), g, g, np.zeros(1000))
        assert abs(rate_fit(t).loglog_slope + p) < 0.05

    def test_short_window(self):
        with pytest.raises(InsufficientDataError):
            rate_fit(halving_trace(10))

    def test_gap_ratios_stop_at_zero(self):
        assert np.allclose(gap_ratios(abs_trace()), [0.75, 2 / 3, 0.5])


class TestErrorBound:
    def test_closed_form_sqrt(self):
        t = halving_trace(30)
        s = error_bound_radii(t, PowerForm(1, 0.5), 1.0, 0.5, minimizer=[0.0], form="sqrt")
        k = np.arange(1, 31)
        assert np.allclose(s.lambdas, 2.5 * 2.0 ** -k, rtol=0, atol=1e-15)
        assert s.dominated

    def test_closed_form_step(self):
        t = halving_trace(30)
        s = error_bound_radii(t, PowerForm(1, 0.5), 1.0, 0.5, minimizer=[0.0])
        assert s.form == "step"
        assert np.allclose(s.lambdas, 1.5 * 2.0 ** -np.arange(1, 31))

    def test_consistent_coefficient(self):
        t = halving_trace(10)
        s = error_bound_radii(t, PowerForm(1, 0.5), 1.0, 0.5, coefficient="inverse_product")
        assert np.allclose(s.lambdas, 3.0 * 2.0 ** -np.arange(1, 11))

    def test_zero_gap_gives_step(self):
        t = Trace.from_iterates(square, [0.5, 0.0, 0.0])
        s = error_bound_radii(t, PowerForm(1, 0.5), 1.0, 0.5)
        assert np.array_equal(s.lambdas, t.step_dists)

    def test_soft_threshold_from_one_dominated(self):
        t = Trace.from_iterates(absval, [1.0, 0.5, 0.0])
        s = error_bound_radii(t, PowerForm(1, 0.0), 1.0, 0.5, minimizer=[0.0])
        assert np.allclose(s.lambdas, [0.75, 0.5])
        assert s.dominated

    def test_soft_threshold_from_two(self):
        t = abs_trace()
        s = error_bound_radii(t, PowerForm(1, 0.0), 1.0, 0.5, minimizer=[0.0])
        assert np.allclose(s.lambdas, 0.5 * t.gaps[1:] + t.step_dists)
        # lambda_1 = 0.5 * 1.5 + 0.5 = 1.25 < |x_1| = 1.5 with the beta/alpha coefficient
        assert not s.dominated
        assert np.array_equal(s.errors > s.lambdas, [True, False, False, False])
        c = error_bound_radii(t, PowerForm(1, 0.0), 1.0, 0.5, minimizer=[0.0],
                              coefficient="inverse_product")
        assert c.dominated

    def test_nonincreasing_on_prox_trace(self):
        for form in ("step", "sqrt"):
            lam = error_bound_radii(halving_trace(), PowerForm(1, 0.5), 1.0, 0.5, form=form).lambdas
            assert np.all(np.diff(lam) <= 1e-15)

    def test_unknown_options(self):
        with pytest.raises(InvalidArgumentError):
            error_bound_radii(halving_trace(), PowerForm(1, 0.5), 1, 0.5, form="cube")
        with pytest.raises(InvalidArgumentError):
            error_bound_radii(halving_trace(), PowerForm(1, 0.5), 1, 0.5, coefficient="x")


class TestCriticality:
    def test_converged(self):
        assert criticality_report(halving_trace(40)).final_slope <= 1e-4

    def test_constant(self):
        assert criticality_report(constant_trace()).final_slope == 0.0


class TestDescentParams:
    def test_for_prox(self):
        p = DescentParams.for_prox(2.0)
        assert (p.alpha, p.beta, p.delta, p.mu) == (2.0, 0.25, 0.125, 4.0)
        assert p.alpha * p.beta <= 0.5

    def test_positive(self):
        with pytest.raises(InvalidArgumentError):
            DescentParams(0.0, 1.0, 1.0)


class TestSlopeSamples:
    def test_segments_fill_window(self):
        t = abs_trace()
        with pytest.raises(InsufficientDataError):
            fit_kl_exponent(trace_slope_samples(t, absval))
        s = trace_slope_samples(t, absval, per_segment=24)
        fit = fit_kl_exponent(s)
        assert fit.theta_hat == pytest.approx(0.0, abs=0.02)

    def test_needs_infimum(self):
        with pytest.raises(InvalidArgumentError):
            trace_slope_samples(halving_trace(), Objective(1, lambda x: 0.0))


class TestCSV:
    def test_header_and_round_trip(self):
        t = halving_trace(5)
        text = trace_to_csv(t)
        assert text.splitlines()[0].split(",")[:6] == list(CSV_COLUMNS)
        assert trace_from_csv(text) == t

    def test_missing_columns_empty(self):
        t = Trace([[0.0, 1.0], [0.5, 0.5]], [1.0, 0.5], None, [0.7], None, [0.9, 0.4])
        text = trace_to_csv(t)
        assert text.splitlines()[1] == "0,1.0,,,,0.9,0.0,1.0"
        assert trace_from_csv(text) == t

    def test_bad_header(self):
        with pytest.raises(InvalidArgumentError):
            trace_from_csv("a,b\n1,2\n")
        with pytest.raises(InvalidArgumentError):
            trace_from_csv("")

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=12))
    def test_round_trip_exact(self, xs):
        t = Trace.from_iterates(square, xs)
        assert trace_from_csv(trace_to_csv(t)) == t
