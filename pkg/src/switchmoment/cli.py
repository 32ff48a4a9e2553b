"""Hierarchy sweeps, reports and the ``run`` command.

Usage::

    python3 -m switchmoment run ex1 --dmax 5
    python3 -m switchmoment run problem.json --dmin 2 --dmax 4 --format json

Artifacts go to ``--out``, else ``$SWITCHMOMENT_OUT``, else
``./switchmoment-out``.  Exit codes: 0 success, 1 a solve failed or the
cost/bound sandwich was violated, 2 bad arguments (including the order
range), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from ._io import atomic_write_text, csv_text
from .extract import ExtractionError, extract_schedule, time_marginal_moments
from .problem import (FixedHorizon, FreeHorizon, ProblemError, SwitchedProblem,
                      builtin_example, builtin_names, load_problem, validate)
from .relax import MAX_ORDER, RelaxationOrderError, build_relaxation, min_order
from .sdp import SolverSettings, Status, solve_conic
from .sim import SimulationError, certify_gap, pwm_realize, simulate_relaxed, simulate_switched

log = logging.getLogger(__name__)

REPORT_SCHEMA = "switchmoment.report/1"
OUT_ENV = "SWITCHMOMENT_OUT"
MASS_STABLE = 1e-3


@dataclass
class OrderRow:
    d: int
    bound: float                     # p*_d, unscaled
    num_vars: int
    masses: list[float]              # unscaled time per mode
    status: str
    iterations: int
    wall_time: float
    max_residual: float


@dataclass
class RunReport:
    problem: str
    problem_hash: str
    rows: list[OrderRow] = field(default_factory=list)
    extraction: dict | None = None
    certification: dict | None = None
    settings: dict = field(default_factory=dict)
    version: str = __version__
    schema: str = REPORT_SCHEMA
    # in-memory schedule and trajectories; not serialized
    artifacts: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def m(self) -> int:
        return len(self.rows[0].masses) if self.rows else 0

    def to_dict(self) -> dict:
        art, self.artifacts = self.artifacts, {}
        try:
            doc = asdict(self)
        finally:
            self.artifacts = art
        doc.pop("artifacts")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> RunReport:
        doc = dict(doc)
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unknown report schema {doc.get('schema')!r}")
        doc["rows"] = [OrderRow(**r) for r in doc.get("rows", [])]
        return cls(**doc)

    @property
    def success(self) -> bool:
        solved = all(r.status in (Status.OPTIMAL.value, Status.NEAR_OPTIMAL.value)
                     for r in self.rows)
        cert = self.certification
        sandwich = cert is None or cert.get("valid", False)
        return bool(self.rows) and solved and sandwich


# --- sweep -----------------------------------------------------------------


def resolve_problem(source, tmax: float | None = None) -> SwitchedProblem:
    """Built-in name, path to a problem file, or a problem instance."""
    if isinstance(source, SwitchedProblem):
        p = source
    elif str(source) in builtin_names():
        p = builtin_example(str(source))
    else:
        p = load_problem(source)
    if tmax is not None:
        if tmax <= 0:
            raise ProblemError("--tmax must be positive")
        p = replace(p, horizon=FreeHorizon(tmax) if p.is_free else FixedHorizon(tmax))
    return validate(p)


def _extraction_order(rows: list[OrderRow], solved: dict) -> int | None:
    # largest Optimal order whose masses moved < 1e-3 from the previous order,
    # else the largest order with usable moments
    by_d = {r.d: r for r in rows}
    stable = [r.d for r in rows
              if r.status == Status.OPTIMAL.value and r.d - 1 in by_d
              and by_d[r.d - 1].status in (Status.OPTIMAL.value, Status.NEAR_OPTIMAL.value)
              and max(abs(a - b) for a, b in zip(r.masses, by_d[r.d - 1].masses)) < MASS_STABLE]
    if stable:
        return max(stable)
    usable = [d for d in solved]
    return max(usable) if usable else None


def run_hierarchy(source, dmin: int | None = None, dmax: int = 3,
                  settings: SolverSettings | None = None, out_dir=None,
                  tmax: float | None = None, step: float | None = None,
                  pwm_period: float | None = None, fmt: str = "table") -> RunReport:
    """Solve orders ``dmin..dmax``, extract a schedule, simulate and certify."""
    p = resolve_problem(source, tmax)
    settings = settings or SolverSettings()
    lo = min_order(p)
    dmin = lo if dmin is None else dmin
    if dmin < lo or dmax < dmin or dmax > MAX_ORDER:
        raise RelaxationOrderError(
            f"order range {dmin}..{dmax} invalid (allowed {lo}..{MAX_ORDER})")
    name = p.name or (str(source) if not isinstance(source, SwitchedProblem) else "")
    report = RunReport(name, p.digest(), settings={
        "dmin": dmin, "dmax": dmax, "step": step, "pwm_period": pwm_period,
        "horizon": p.horizon_length, "free_horizon": p.is_free,
        "solver": asdict(settings)})

    solved = {}
    for d in range(dmin, dmax + 1):
        t0 = time.perf_counter()
        prog = build_relaxation(p, d)
        try:
            sol = solve_conic(prog, settings)
        except Exception as exc:    # recorded in-row, sweep continues
            log.error("order %d: solver failed: %s", d, exc)
            report.rows.append(OrderRow(d, float("nan"), prog.num_vars, [float("nan")] * p.m,
                                        "Error", 0, time.perf_counter() - t0, float("nan")))
            continue
        wall = time.perf_counter() - t0
        masses = [float("nan")] * p.m
        if sol.ok:
            marg = time_marginal_moments(sol, prog.layout)
            masses = [float(v) for v in marg.masses]
            solved[d] = (prog, sol, marg)
        r = sol.residuals
        maxres = max(r.get("primal_equality", 0.0), r.get("dual_equality", 0.0),
                     -r.get("min_eig", 0.0), abs(r.get("gap", 0.0)))
        report.rows.append(OrderRow(d, float(sol.objective), prog.num_vars, masses,
                                    sol.status.value, sol.iterations, wall, float(maxres)))
        log.info("order %d: %s p*=%.6g N=%d (%.2fs)", d, sol.status.value,
                 sol.objective, prog.num_vars, wall)

    dx = _extraction_order(report.rows, solved)
    if dx is not None:
        _extract_and_certify(p, report, solved, dx, step, pwm_period)
    if out_dir is not None:
        write_artifacts(report, out_dir, solved, fmt)
    return report


def _extract_and_certify(p, report, solved, dx, step, pwm_period) -> None:
    prog, sol, marg = solved[dx]
    try:
        sched, atomics = extract_schedule(marg)
    except ExtractionError as exc:
        report.extraction = {"order": dx, "error": str(exc)}
        return
    report.extraction = {
        "order": dx,
        "breakpoints": [float(v) for v in sched.breakpoints],
        "densities": [[float(v) for v in row] for row in sched.densities],
        "terminal_time": marg.terminal_time,
    }
    report.artifacts["schedule"] = sched
    # the best available bound certifies the simulated cost
    bound = max(solved[d][1].objective for d in solved)
    try:
        extend = p.horizon_length if p.is_free else None
        traj = simulate_relaxed(p, sched, step, extend_to=extend)
        shortest = min(b - a for a, b, _ in sched.segments)
        period = pwm_period or min(shortest, sched.horizon / 100)
        sw = simulate_switched(p, pwm_realize(sched, period), step, extend_to=extend)
    except (SimulationError, ValueError) as exc:
        report.certification = {"error": str(exc), "valid": False}
        return
    gap = certify_gap(traj.total_cost, bound)
    sw_gap = certify_gap(sw.total_cost, bound)
    report.certification = {
        "bound": bound,
        "relaxed_cost": traj.total_cost,
        "relaxed_reached": traj.reached,
        "relaxed_terminal_time": traj.terminal_time,
        "relaxed_terminal_residual": traj.terminal_residual,
        "pwm_period": period,
        "pwm_cost": sw.total_cost,
        "pwm_reached": sw.reached,
        "pwm_terminal_time": sw.terminal_time,
        "absolute_gap": gap.absolute,
        "relative_gap": gap.relative,
        "pwm_relative_gap": sw_gap.relative,
        "valid": gap.valid,
        "near_optimal": gap.near_optimal,
    }
    report.artifacts["trajectories"] = (traj, sw)


# --- export ------------------------------------------------------------------


def _g5(v: float) -> str:
    return f"{v:.4e}"


def _m5(v: float) -> str:
    return "nan" if v != v else f"{v:#.5g}"


def format_table(report: RunReport) -> str:
    m = report.m
    header = ["d", "p*_d", "N_d"] + [f"y_{k + 1},0" for k in range(m)] + ["status"]
    lines = [f"# {REPORT_SCHEMA} problem={report.problem} hash={report.problem_hash}",
             " | ".join(header)]
    for r in report.rows:
        lines.append(" | ".join([str(r.d), _g5(r.bound), str(r.num_vars)]
                                + [_m5(v) for v in r.masses] + [r.status]))
    ex = report.extraction
    if ex and "breakpoints" in ex:
        lines.append(f"# schedule (order {ex['order']}): breakpoints "
                     + " ".join(_m5(v) for v in ex["breakpoints"]))
        for row in ex["densities"]:
            lines.append("#   u = (" + ", ".join(_m5(v) for v in row) + ")")
    elif ex:
        lines.append(f"# schedule extraction failed: {ex['error']}")
    c = report.certification
    if c and "bound" in c:
        lines.append(f"# certification: bound {_g5(c['bound'])} relaxed cost "
                     f"{_g5(c['relaxed_cost'])} pwm cost {_g5(c['pwm_cost'])} "
                     f"relative gap {c['relative_gap']:.3g} "
                     f"{'near-optimal' if c['near_optimal'] else 'not near-optimal'}"
                     f"{'' if c['valid'] else ' SANDWICH VIOLATED'}")
        if not (c["relaxed_reached"] and c["pwm_reached"]):
            lines.append("# warning: simulated trajectory misses the terminal set "
                         f"(residual {c['relaxed_terminal_residual']:.3g})")
    return "\n".join(lines) + "\n"


def report_json(report: RunReport) -> str:
    doc = report.to_dict()
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def report_csv(report: RunReport) -> str:
    m = report.m
    header = ["d", "bound", "num_vars"] + [f"mass_{k + 1}" for k in range(m)] + ["status"]
    rows = [[r.d, r.bound, r.num_vars, *r.masses, r.status] for r in report.rows]
    return csv_text(header, rows, comment=REPORT_SCHEMA)


def export_results(report: RunReport, fmt: str, out_dir) -> Path:
    """Write the report in ``fmt`` ("table", "json" or "csv"); returns the path."""
    out = Path(out_dir)
    if fmt == "table":
        return atomic_write_text(out / "report.txt", format_table(report))
    if fmt == "json":
        return atomic_write_text(out / "report.json", report_json(report))
    if fmt == "csv":
        return atomic_write_text(out / "report.csv", report_csv(report))
    raise ValueError(f"unknown format {fmt!r}")


def write_artifacts(report: RunReport, out_dir, solved: dict, fmt: str) -> None:
    out = Path(out_dir)
    export_results(report, fmt, out)
    if fmt != "json":
        export_results(report, "json", out)
    for d, (_, _, marg) in sorted(solved.items()):
        header = ["a"] + [f"y_{k + 1}" for k in range(marg.m)]
        rows = [[a, *marg.y[:, a].tolist()] for a in range(marg.y.shape[1])]
        atomic_write_text(out / f"moments_d{d}.csv",
                          csv_text(header, rows, comment=f"time moments, scaled by {marg.time_scale:g}"))
    if "schedule" in report.artifacts:
        report.artifacts["schedule"].to_csv(out / "schedule.csv")
    if "trajectories" in report.artifacts:
        relaxed, switched = report.artifacts["trajectories"]
        relaxed.to_csv(out / "trajectory.csv")
        switched.to_csv(out / "trajectory_pwm.csv")


# --- command line -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="switchmoment",
                                 description="Moment relaxations for switched systems")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="sweep relaxation orders and certify a schedule")
    run.add_argument("problem", help="ex1, ex2, ex3 or a problem JSON file")
    run.add_argument("--dmin", type=int, default=None)
    run.add_argument("--dmax", type=int, default=3)
    run.add_argument("--tmax", type=float, default=None,
                     help="override the horizon (T or t_max)")
    run.add_argument("--step", type=float, default=None, help="RK4 step (default T/4096)")
    run.add_argument("--pwm-period", type=float, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--format", choices=("table", "json", "csv"), default="table")
    run.add_argument("--tol", type=float, default=1e-8,
                     help="solver feasibility and gap tolerance")
    run.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or os.environ.get(OUT_ENV) or "switchmoment-out"
    try:
        settings = SolverSettings(feasibility_tolerance=args.tol,
                                  duality_gap_tolerance=args.tol)
        report = run_hierarchy(args.problem, args.dmin, args.dmax, settings, out,
                               tmax=args.tmax, step=args.step,
                               pwm_period=args.pwm_period, fmt=args.format)
    except (RelaxationOrderError, ProblemError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    sys.stdout.write(format_table(report))
    return 0 if report.success else 1
