"""Moving balls on two linear programs over disks.

Every iterate stays feasible because each step solves the quadratic model
over balls that sit inside the constraint sublevel sets.
"""

import numpy as np

from metricslope.harness import PROBLEMS
from metricslope.mm import check_envelope_descent, run_mm
from metricslope.solvers import check_feasibility, moving_balls_problem


def main():
    for pid in ("unit_disk_linear", "two_ball_linear"):
        nlp = PROBLEMS[pid].build()
        mm = moving_balls_problem(nlp)
        t = run_mm(mm, PROBLEMS[pid].x0, max_iter=200)
        print(f"{pid}: {len(t) - 1} steps, minimizer {np.round(nlp.minimizer, 6).tolist()}")
        for k, (x, f) in enumerate(zip(t.iterates[:6], t.values[:6])):
            print(f"  k={k}  x=({x[0]: .6f}, {x[1]: .6f})  f={f: .6f}"
                  f"  max f_i={nlp.max_violation(x): .2e}")
        feas = check_feasibility(t, nlp)
        env = check_envelope_descent(t, mm.mu, problem=mm)
        print(f"  feasible throughout: {feas.passed};  envelope descent worst margin "
              f"{env.worst_margin:.2e}, fitted beta {env.beta_hat:.4f}")


if __name__ == "__main__":
    main()
