"""Proximal point on f(x) = |x|^p: KL exponents and the four rate regimes.

For each p the script runs the iteration from x0 = 1, fits the KL exponent
from (gap, slope) samples and prints the rate regime it implies next to what
the trace actually does.
"""

import numpy as np

from metricslope import diagnostics as dg
from metricslope.mm import run_mm
from metricslope.slope import classify_rate, fit_kl_exponent
from metricslope.solvers import power_objective, prox_point_problem


def main():
    alpha = 1.0
    print(f"{'p':>4} {'theta':>7} {'regime':>12} {'steps':>6} {'final gap':>11}  tail")
    for p in (1.0, 1.5, 2.0, 4.0):
        obj = power_objective(p)
        t = run_mm(prox_point_problem(obj, alpha), [1.0], max_iter=1000)
        # segment samples fill the window when the run terminates quickly
        fit = fit_kl_exponent(dg.trace_slope_samples(t, obj, per_segment=24))
        reg = classify_rate(fit.theta_hat, atol=1e-6)
        ratios = dg.gap_ratios(t)
        if t.gaps[-1] == 0.0:
            tail = "exact termination"
        elif p == 4.0:
            tail = f"log-log slope {dg.rate_fit(t, (100, 1000)).loglog_slope:.3f}"
        else:
            tail = f"last gap ratio {ratios[-1]:.3e}"
        print(f"{p:4g} {fit.theta_hat:7.4f} {reg.kind.value:>12} {len(t) - 1:6d} "
              f"{t.gaps[-1]:11.3e}  {tail}")

    # sublinear case in more detail: x_k ~ k^{-1/2}, gap ~ k^{-2}
    t = run_mm(prox_point_problem(power_objective(4.0), alpha), [1.0], step_tol=0.0,
               max_iter=10_000)
    k = np.array([10, 100, 1000, 10_000])
    print("\np = 4:  k      gap_k      k^2 gap_k")
    for kk in k:
        print(f"     {kk:6d}  {t.gaps[kk]:.3e}  {kk ** 2 * t.gaps[kk]:.4f}")


if __name__ == "__main__":
    main()
