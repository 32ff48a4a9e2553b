"""Walk the relaxation hierarchy on the scalar two-mode problem.

Each order gives a lower bound on the optimal cost.  The bounds climb toward
1/24, and the time moments of mode 1 approach those of the optimal density
(1 on [0, 1/2], 1/2 afterwards).

    python3 demos/ex1_hierarchy.py
"""

import numpy as np

from switchmoment import build_relaxation, builtin_example, solve_conic
from switchmoment.extract import extract_schedule, time_marginal_moments

problem = builtin_example("ex1")
print(f"{'d':>2} {'bound':>12} {'N_d':>5} {'time in mode 1':>15} {'mode 2':>8}")
for d in range(1, 6):
    prog = build_relaxation(problem, d)
    sol = solve_conic(prog)
    marg = time_marginal_moments(sol, prog.layout)
    print(f"{d:>2} {sol.objective:>12.6e} {prog.num_vars:>5} "
          f"{marg.masses[0]:>15.5f} {marg.masses[1]:>8.5f}")

print(f"\noptimal cost 1/24 = {1 / 24:.6e}")

# mode-1 moments int t^a u_1(t) dt against the piecewise-constant optimum
alpha = np.arange(6)
analytic = (2 + 2.0 ** -alpha) / (4 + 4 * alpha)
print("\n a  relaxation  optimum")
for a in alpha:
    print(f"{a:>2}  {marg.y[0, a]:.6f}    {analytic[a]:.6f}")

sched, _ = extract_schedule(marg)
print("\nrecovered schedule")
for t0, t1, u in sched.segments:
    print(f"  [{t0:.4f}, {t1:.4f}]  u = ({u[0]:.3f}, {u[1]:.3f})")
