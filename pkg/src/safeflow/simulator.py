"""Closed-loop simulation of plant plus safe gradient flow controller.

The stacked state is ``z = (x, u)`` with ``x' = f(x, u, w)`` and
``u' = eta F_beta(output(x, w), u)``. Integration is fixed-step (RK4 or
forward Euler); each stage solves the controller QP afresh, warm-started
with the active set of the previous solve.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_positive, check_vector
from .controller import _assemble
from .qp import QpSolution, _EMPTY_INT, _solve_raw
from .exceptions import (
    ContractViolation,
    EmptySampleSet,
    InitialInputInfeasible,
    SimulationError,
)

__all__ = [
    "SimConfig",
    "Trajectory",
    "ClosedLoop",
    "step",
    "simulate",
    "monitor_input_invariance",
    "monitor_state_set",
    "write_csv",
    "read_csv",
]


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_end: float = 200.0
    integrator: str = "rk4"
    record_stride: int = 100
    halt_on_infeasible: bool = True

    def __post_init__(self):
        check_positive(self.dt, "dt")
        check_positive(self.t_end, "t_end", allow_zero=True)
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"integrator must be 'rk4' or 'euler', got {self.integrator!r}")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be >= 1")


@dataclass
class Trajectory:
    """Logged samples of a closed-loop run.

    ``outputs`` holds the measured output the controller acts on; ``error``
    is ``|(output - h(u*, w), u - u*)|`` and is ``None`` when no reference
    input was supplied.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    flows: np.ndarray
    ell: np.ndarray
    gamma: np.ndarray
    qp_iterations: np.ndarray
    error: Optional[np.ndarray] = None
    status: str = "ok"
    message: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    @property
    def final_state(self):
        return np.concatenate([self.states[-1], self.inputs[-1]])


class ClosedLoop:
    """Stacked vector field ``F(z, w)`` of plant and controller.

    Keeps the last active set as a warm-start hint; it is only a hint, so
    results do not depend on it beyond round-off.
    """

    def __init__(self, plant, spec, cfg, w):
        self.plant = plant
        self.spec = spec
        self.cfg = cfg
        self.w = check_vector(w, plant.n_w, "w")
        self.n_x = plant.n_x
        self.hint = _EMPTY_INT
        self.last = None
        self._out = np.empty(plant.n_x + plant.n_u)

    def solve(self, x, u):
        """Controller QP at ``(x, u)``: ``(theta, multipliers, active, iterations)``."""
        plant, cfg = self.plant, self.cfg
        qp = _assemble(self.spec, plant.output(x, self.w), u, plant.jac_h(u), cfg.beta)
        theta, lam, active, iters, _ = _solve_raw(qp, cfg.qp_tol, cfg.qp_max_iter, None, self.hint)
        self.hint = active
        self.last = (theta, lam, active, iters)
        return self.last

    def controller(self, x, u):
        theta, lam, active, iters = self.solve(x, u)
        return QpSolution(theta, lam, tuple(active.tolist()), 0.0, iters)

    def __call__(self, z):
        n_x = self.n_x
        x = z[:n_x]
        u = z[n_x:]
        theta = self.solve(x, u)[0]
        out = self._out.copy()
        out[:n_x] = self.plant.f(x, u, self.w)
        out[n_x:] = self.cfg.eta * theta
        return out


def _rk4(field_, z, dt):
    k1 = field_(z)
    sol = field_.last
    k2 = field_(z + 0.5 * dt * k1)
    k3 = field_(z + 0.5 * dt * k2)
    k4 = field_(z + dt * k3)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), sol


def _euler(field_, z, dt):
    k1 = field_(z)
    return z + dt * k1, field_.last


def step(plant, spec, cfg_ctrl, z, w, dt, method="rk4"):
    """Advance ``z = (x, u)`` by one explicit step of size ``dt``."""
    check_positive(dt, "dt")
    z = check_vector(z, plant.n_x + plant.n_u, "z")
    field_ = ClosedLoop(plant, spec, cfg_ctrl, w)
    integrate = _rk4 if method == "rk4" else _euler
    z_new, _ = integrate(field_, z, dt)
    if not np.all(np.isfinite(z_new)):
        raise SimulationError("non-finite state after step")
    return z_new


def simulate(plant, spec, cfg_ctrl, cfg_sim, z0, w, u_star=None):
    """Integrate the closed loop from ``z0`` and log every ``record_stride`` steps.

    Raises `InitialInputInfeasible` when ``gamma(u0) > 0``. A QP infeasibility
    along the way raises (``halt_on_infeasible``) or truncates the trajectory
    with ``status='infeasible'``.
    """
    n_x, n_u = plant.n_x, plant.n_u
    z = check_vector(z0, n_x + n_u, "z0").copy()
    w = check_vector(w, plant.n_w, "w")
    if spec.m and np.any(spec.gamma_values(z[n_x:]) > 0):
        raise InitialInputInfeasible(
            f"initial input violates the input constraints: gamma(u0) = {spec.gamma_values(z[n_x:])}"
        )
    if u_star is not None:
        u_star = check_vector(u_star, n_u, "u_star")
        y_star = plant.h(u_star, w)

    field_ = ClosedLoop(plant, spec, cfg_ctrl, w)
    integrate = _rk4 if cfg_sim.integrator == "rk4" else _euler
    dt = cfg_sim.dt
    n_steps = int(round(cfg_sim.t_end / dt))
    stride = int(cfg_sim.record_stride)

    rows = {k: [] for k in ("t", "x", "u", "y", "F", "ell", "gamma", "it")}

    def record(t, z, sol):
        x, u = z[:n_x], z[n_x:]
        y = plant.output(x, w)
        rows["t"].append(t)
        rows["x"].append(x.copy())
        rows["u"].append(u.copy())
        rows["y"].append(y)
        rows["F"].append(sol[0].copy())
        rows["ell"].append(spec.ell_values(y))
        rows["gamma"].append(spec.gamma_values(u))
        rows["it"].append(sol[3])

    status, message = "ok", ""
    t = 0.0
    for i in range(n_steps):
        t = i * dt
        try:
            z_new, sol = integrate(field_, z, dt)
        except ContractViolation as exc:
            if cfg_sim.halt_on_infeasible:
                raise type(exc)(f"t={t:.6g}: {exc}") from exc
            status, message = "infeasible", f"t={t:.6g}: {exc}"
            break
        if i % stride == 0:
            record(t, z, sol)
        if not np.all(np.isfinite(z_new)):
            raise SimulationError("non-finite state", time=t + dt)
        z = z_new
    else:
        t = n_steps * dt
        if not rows["t"] or rows["t"][-1] < t:
            try:
                record(t, z, field_.solve(z[:n_x], z[n_x:]))
            except ContractViolation as exc:
                if cfg_sim.halt_on_infeasible:
                    raise
                status, message = "infeasible", str(exc)

    traj = Trajectory(
        times=np.array(rows["t"]),
        states=np.array(rows["x"]).reshape(-1, n_x),
        inputs=np.array(rows["u"]).reshape(-1, n_u),
        outputs=np.array(rows["y"]).reshape(-1, plant.n_y),
        flows=np.array(rows["F"]).reshape(-1, n_u),
        ell=np.array(rows["ell"]).reshape(-1, spec.p),
        gamma=np.array(rows["gamma"]).reshape(-1, spec.m),
        qp_iterations=np.array(rows["it"], dtype=int),
        status=status,
        message=message,
    )
    if u_star is not None:
        dy = traj.outputs - y_star
        du = traj.inputs - u_star
        traj.error = np.sqrt((dy**2).sum(axis=1) + (du**2).sum(axis=1))
        traj.meta["u_star"] = u_star.tolist()
    return traj


def monitor_input_invariance(traj, spec=None, tol=1e-6):
    """Largest logged input-constraint value; passes iff it is ``<= tol``."""
    worst = float(traj.gamma.max()) if traj.gamma.size else -math.inf
    where = None
    if traj.gamma.size:
        i, j = np.unravel_index(int(np.argmax(traj.gamma)), traj.gamma.shape)
        where = {"time": float(traj.times[i]), "row": int(j)}
    return {"max_gamma": worst, "tol": tol, "passed": bool(worst <= tol), "argmax": where}


def monitor_state_set(traj, x_eq_samples, d0, d1, d2):
    """Check that the output stays within ``sqrt(d2/d1)(d0 + diam)`` of ``X_eq``.

    ``x_eq_samples`` is a finite sample of steady-state outputs; distance
    and diameter are computed on that sample.
    """
    S = np.atleast_2d(np.asarray(x_eq_samples, dtype=float))
    if S.size == 0:
        raise EmptySampleSet("need at least one sample of the equilibrium set")
    if d1 <= 0 or d2 < d1:
        raise ValueError("need 0 < d1 <= d2")
    diff = S[:, None, :] - S[None, :, :]
    diam = float(np.sqrt((diff**2).sum(axis=2)).max())
    radius = math.sqrt(d2 / d1) * (d0 + diam)
    Y = traj.outputs
    dists = np.sqrt(((Y[:, None, :] - S[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    worst = float(dists.max())
    return {
        "max_distance": worst,
        "radius": radius,
        "diameter": diam,
        "passed": bool(worst < radius),
    }


def _fmt(v):
    return format(float(v), ".17g")


def write_csv(traj, path):
    """Write ``t, x_*, u_*, Fb_*, ell_*, gamma_*[, err]`` rows at 17 digits."""
    n_x = traj.states.shape[1]
    n_u = traj.inputs.shape[1]
    header = ["t"]
    header += [f"x_{i}" for i in range(n_x)]
    header += [f"u_{i}" for i in range(n_u)]
    header += [f"Fb_{i}" for i in range(n_u)]
    header += [f"ell_{i}" for i in range(traj.ell.shape[1])]
    header += [f"gamma_{i}" for i in range(traj.gamma.shape[1])]
    if traj.error is not None:
        header.append("err")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(len(traj)):
            row = [traj.times[k], *traj.states[k], *traj.inputs[k], *traj.flows[k],
                   *traj.ell[k], *traj.gamma[k]]
            if traj.error is not None:
                row.append(traj.error[k])
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Load a trajectory CSV into a dict of column name to array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}
