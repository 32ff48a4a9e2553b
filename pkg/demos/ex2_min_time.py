"""Minimum-time steering of a double integrator to the origin.

The two modes push the velocity up or down at unit rate, and the velocity
must stay in [-1, 1].  The fastest route accelerates, slides along the
velocity limit by switching fast between the modes, then brakes, arriving
at t = 3.5.  This script solves the relaxation, reads the switching
instants off the moments and replays the schedule.

    python3 demos/ex2_min_time.py [order]
"""

import sys

from switchmoment import (build_relaxation, builtin_example, extract_schedule, simulate_relaxed,
                          solve_conic, time_marginal_moments)

d = int(sys.argv[1]) if len(sys.argv) > 1 else 4
problem = builtin_example("ex2")
prog = build_relaxation(problem, d)
sol = solve_conic(prog)
print(f"order {d}: lower bound on the arrival time {sol.objective:.4f} ({sol.status.value})")

marg = time_marginal_moments(sol, prog.layout)
sched, atoms = extract_schedule(marg)
print("switch instants seen in the moments:", " ".join(f"{t:.3f}" for t in atoms[0].atoms
                                                       * marg.time_scale))
for t0, t1, u in sched.segments:
    print(f"  [{t0:.3f}, {t1:.3f}]  u = ({u[0]:.2f}, {u[1]:.2f})")

traj = simulate_relaxed(problem, sched, step=1e-3)
print(f"replayed: final state {traj.final_state.round(4)}, terminal residual "
      f"{traj.terminal_residual:.2e}, worst constraint violation {traj.max_violation:.1e}")
