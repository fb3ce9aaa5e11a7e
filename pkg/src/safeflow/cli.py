"""Command-line interface: ``safeflow <command> --scenario ... --out ...``.

Exit codes: 0 success, 1 configuration or parse error, 2 model-contract
violation, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .controller import assemble_controller_qp, steady_flow
from .exceptions import ConfigurationError, ContractViolation, NumericalFailure, SafeflowError
from .plants import LtiPlant, check_plant_contract
from .problem import check_derivatives
from .qp import kkt_violations, solve_qp
from .scenario import Scenario, load_scenario, resolve
from .simulator import monitor_input_invariance, monitor_state_set, simulate, write_csv

log = logging.getLogger("safeflow")

SWEEP_PARAMS = {"beta": "controller", "eta": "controller", "s": "analysis", "kappa": "analysis"}


def _dump(obj, path):
    Path(path).write_text(json.dumps(analysis._jsonable(obj), indent=2, sort_keys=True) + "\n")


def plant_constants(scenario):
    """Plant Lyapunov constants ``d1..d5`` and where they came from."""
    overrides = scenario.analysis.d_constants or {}
    if isinstance(scenario.plant, LtiPlant):
        d, source = analysis.lti_lyapunov_constants(scenario.plant), "lyapunov"
    else:
        d, source = analysis.fit_inner_loop_constants(scenario.plant, seed=scenario.analysis.seed), "estimated"
    if overrides:
        d.update({k: float(v) for k, v in overrides.items()})
        source = "override"
    return d, source


def convergence_summary(traj, floor=1e-8):
    """Final error, tail decay-rate fit and the time after which the error stops growing.

    Samples below ``floor`` are ignored: there the error sits at the
    resolution of the plant model (the unicycle stops moving within 1e-9
    of its set-point) and wanders at round-off level.
    """
    err = traj.error
    out = {"final_error": float(err[-1]), "empirical_rate": analysis._tail_rate(traj.times, err, floor, 0.5)}
    above = err[1:] > floor
    rises = np.nonzero((np.diff(err) > 1e-12 * err[:-1]) & above)[0]
    out["monotone_after"] = float(traj.times[rises[-1] + 1]) if rises.size else 0.0
    return out


def run_simulation(scenario):
    """Simulate a scenario against the oracle optimum; returns ``(traj, target, monitors)``."""
    spec, plant = scenario.spec, scenario.plant
    target = analysis.solve_target_problem(spec, plant, scenario.w, scenario.u0)
    traj = simulate(plant, spec, scenario.controller, scenario.sim, scenario.z0, scenario.w, u_star=target.u)
    monitors = {"input_invariance": monitor_input_invariance(traj, spec, tol=1e-6)}
    if spec.u_bounds is not None and len(traj):
        d, source = plant_constants(scenario)
        X_eq = analysis.equilibrium_samples(spec, plant, scenario.w)
        y0 = plant.output(scenario.x0, scenario.w)
        d0 = float(np.linalg.norm(X_eq - y0, axis=1).min())
        state = monitor_state_set(traj, X_eq, d0, d["d1"], d["d2"])
        state.update(d0=d0, d_source=source)
        monitors["state_set"] = state
    if len(traj):
        monitors["convergence"] = convergence_summary(traj)
    return traj, target, monitors


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    traj, target, monitors = run_simulation(scenario)
    elapsed = time.perf_counter() - t_start
    csv_path = out / scenario.config["output"]["csv"]
    write_csv(traj, csv_path)
    meta = {
        "scenario": scenario.name,
        "origin": scenario.origin,
        "scenario_hash": scenario.hash,
        "resolved": scenario.config,
        "u_star": target.u,
        "lambda_star": target.lam,
        "status": traj.status,
        "message": traj.message,
        "n_samples": len(traj),
        "final_state": traj.final_state if len(traj) else None,
        "runtime_s": elapsed,
        "csv": csv_path.name,
    }
    _dump(meta, out / "run.json")
    _dump(monitors, out / "monitors.json")
    conv = monitors.get("convergence", {})
    print(f"{scenario.name}: status={traj.status} samples={len(traj)} "
          f"final_error={conv.get('final_error', float('nan')):.3e} "
          f"max_gamma={monitors['input_invariance']['max_gamma']:.3e} ({elapsed:.1f} s)")
    return 0


def cmd_analyze(args):
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_overrides("analysis", seed=int(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = analysis.certify(
        scenario.spec, scenario.plant, scenario.w, scenario.controller, scenario.analysis,
        u_init=scenario.u0, x0=scenario.x0,
    )
    data = report.to_dict()
    data["scenario"] = scenario.name
    data["scenario_hash"] = scenario.hash
    _dump(data, out / "report.json")
    verdict = "certified" if report.certified else "not certified"
    print(f"{scenario.name}: eta={report.eta:g} bound={report.eta_bound:.4g} "
          f"lambda_M={report.lambda_M:.4g} rate={report.decay_rate:.4g} ({verdict})")
    for note in report.notes:
        print(f"  note: {note}")
    return 0


def _sweep_one(config, param, value, run_dir):
    """One sweep run in a worker process; errors become row entries."""
    row = {"param": param, "value": value, "status": "ok", "error": ""}
    try:
        config = json.loads(json.dumps(config))
        config[SWEEP_PARAMS[param]][param] = value
        scenario = Scenario(resolve(config))
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        traj, target, monitors = run_simulation(scenario)
        write_csv(traj, Path(run_dir) / "trajectory.csv")
        _dump(monitors, Path(run_dir) / "monitors.json")
        conv = monitors.get("convergence", {})
        row.update(
            status=traj.status,
            final_error=conv.get("final_error"),
            empirical_rate=conv.get("empirical_rate"),
            max_gamma=monitors["input_invariance"]["max_gamma"],
            input_invariance=monitors["input_invariance"]["passed"],
            state_set=monitors.get("state_set", {}).get("passed"),
        )
        field = steady_flow(scenario.spec, scenario.plant, scenario.u0, scenario.w, scenario.controller)
        row["field"] = field.tolist()
        try:
            rep = analysis.certify(
                scenario.spec, scenario.plant, scenario.w, scenario.controller, scenario.analysis,
                u_init=scenario.u0, x0=scenario.x0,
            )
            row.update(
                eta_in_range=rep.eta_in_range, eta_bound=rep.eta_bound,
                m_positive_definite=rep.m_positive_definite, certified_rate=rep.decay_rate,
                flag="" if rep.eta_in_range else "EtaOutOfRange",
            )
        except SafeflowError as exc:
            row["flag"] = f"{type(exc).__name__}: {exc}"
    except SafeflowError as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


SUMMARY_FIELDS = [
    "param", "value", "status", "final_error", "empirical_rate", "max_gamma",
    "input_invariance", "state_set", "eta_in_range", "eta_bound", "m_positive_definite",
    "certified_rate", "field_diff_prev", "flag", "error",
]


def _parse_values(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--values must be a comma-separated list of numbers, got {text!r}") from None
    if not values or any(not v > 0 for v in values):
        raise ConfigurationError("--values must be positive")
    return values


def cmd_sweep(args):
    scenario = load_scenario(args.scenario)
    if args.param not in SWEEP_PARAMS:
        raise ConfigurationError(f"--param must be one of {sorted(SWEEP_PARAMS)}")
    values = _parse_values(args.values)
    if args.seed is not None:
        scenario = scenario.with_overrides("analysis", seed=int(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(scenario.config, args.param, v, str(out / f"run_{i:03d}")) for i, v in enumerate(values)]
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(_sweep_one, *zip(*jobs)))
    else:
        rows = [_sweep_one(*job) for job in jobs]
    prev = None
    for row in rows:
        field = row.pop("field", None)
        if field is not None and prev is not None:
            row["field_diff_prev"] = float(np.linalg.norm(np.subtract(field, prev)))
        prev = field
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k, "")) for k in SUMMARY_FIELDS})
    for row in rows:
        fe = row.get("final_error")
        print(f"{args.param}={row['value']:g}: {row['status']}"
              + (f" final_error={fe:.3e}" if fe is not None else "")
              + (f" [{row['flag']}]" if row.get("flag") else "")
              + (f" {row['error']}" if row.get("error") else ""))
    return 0


def _point(text, default, dim, name):
    if text is None:
        return default
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise ConfigurationError(f"--{name} must be comma-separated numbers") from None
    if v.shape[0] != dim:
        raise ConfigurationError(f"--{name} needs {dim} values")
    return v


def cmd_qp_debug(args):
    scenario = load_scenario(args.scenario)
    plant, spec = scenario.plant, scenario.spec
    x = _point(args.x, scenario.x0, plant.n_x, "x")
    u = _point(args.u, scenario.u0, plant.n_u, "u")
    y = plant.output(x, scenario.w)
    qp = assemble_controller_qp(spec, y, u, plant.jac_h(u), scenario.controller.beta)
    sol = solve_qp(qp, scenario.controller.qp_tol, scenario.controller.qp_max_iter)
    data = {
        "x": x, "u": u, "output": y, "qp": qp.to_dict(), "solution": sol.to_dict(),
        "kkt": kkt_violations(qp, sol.theta, sol.multipliers),
        "problem_multipliers": 0.5 * sol.multipliers,
    }
    text = json.dumps(analysis._jsonable(data), indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "qp.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_validate(args):
    scenario = load_scenario(args.scenario)
    spec, plant = scenario.spec, scenario.plant
    seed = 0 if args.seed is None else int(args.seed)
    bad = check_derivatives(spec, n_points=100, seed=seed)
    contract = check_plant_contract(plant, n_points=100, seed=seed)
    gamma0 = spec.gamma_values(scenario.u0)
    result = {
        "scenario": scenario.name,
        "derivative_failures": [str(b) for b in bad],
        "plant_contract": contract,
        "initial_input_feasible": bool(np.all(gamma0 <= 0)),
        "max_gamma_u0": float(gamma0.max()) if gamma0.size else -math.inf,
    }
    result["ok"] = not bad and contract["ok"] and result["initial_input_feasible"]
    text = json.dumps(analysis._jsonable(result), indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "validate.json").write_text(text + "\n")
    print(text)
    return 0 if result["ok"] else 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    parser = _Parser(prog="safeflow", description="Safe gradient flow controller experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed for sampling-based estimators")
        p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")

    common(sub.add_parser("simulate", help="run a closed-loop simulation"))
    common(sub.add_parser("analyze", help="compute the stability certificate"))
    p = sub.add_parser("sweep", help="one run per parameter value")
    common(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p = sub.add_parser("qp-debug", help="solve and dump the controller QP at one point")
    common(p, out_required=False)
    p.add_argument("--x", help="plant state (defaults to the initial state)")
    p.add_argument("--u", help="input (defaults to the initial input)")
    common(sub.add_parser("validate", help="contract checks only"), out_required=False)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "qp-debug": cmd_qp_debug,
    "validate": cmd_validate,
}


def exit_code(exc):
    if isinstance(exc, ContractViolation):
        return 2
    if isinstance(exc, NumericalFailure):
        return 3
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SafeflowError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exit_code(exc)
    except ValueError as exc:
        # stray validation errors from lower layers count as configuration errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
