"""Prox-linear steps on f(x) = |x^2 - 1| and the role of the mu floor.

Above mu = 2 L_q M = 4 the linearized model majorizes f and the iteration
decreases f monotonically. Below the floor the sampled majorization check
finds pairs where the model dips under f.
"""

from metricslope.harness import PROBLEMS
from metricslope.mm import box_pair_sampler, check_majorization, envelope, run_mm
from metricslope.solvers import prox_linear_mu_floor, prox_linear_problem


def main():
    base = PROBLEMS["composite_sharp"].build()
    print(f"mu floor: {prox_linear_mu_floor(base.L_q, base.second_deriv_bound):g}")
    for mu in (20.0, 8.0, 1.0):
        mm = prox_linear_problem(base.with_mu(mu))
        maj = check_majorization(mm, box_pair_sampler(mm, [-2], [2], 1000))
        line = f"mu={mu:5g}  majorization violations: {len(maj.violating_steps):4d}"
        if mu > 4.0:
            t = run_mm(mm, [2.0], max_iter=200)
            e = envelope(mm, [2.0])
            line += (f"  F(2)={e.value:.4f} p(2)={e.argmin[0]:.4f}"
                     f"  {len(t) - 1} steps to f={t.values[-1]:.1e}")
        print(line)


if __name__ == "__main__":
    main()
