"""Non-smooth Newton stepping loop.

Per step: collision detection, state prediction, then k_max rounds of
{local projection, Newton linearization, Schur-complement solve for the
multiplier increment, position correction}, finishing with the velocity
update v = (x_{t+h} - x_t) / h.

The multiplier increment solves Z (h^2 dlam) = h_vec - D A^{-1} g with
Z = D A^{-1} D^T + E (fully implicit metric) or Z = D M^{-1} D^T + E
(inertia-dominated lite metric). The right-hand side always uses the exact
inverse through the explicit sparse factor products S^T S.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .assembly import MultiEnvSystem, SystemFactorization, assemble_rhs, gravity_force, predict_state
from .contact import NewtonLinearization, build_linearization, detect_contacts, set_regularization, stacked_phi
from .grasp import EffectorRegistry
from .material import ElasticModel

__all__ = [
    "ContactMetric",
    "DenseSolverKind",
    "SolverConfig",
    "StepDiagnostics",
    "Control",
    "SimWorld",
    "schur_complement",
    "solve_constraint_increment",
    "correct_positions",
    "step",
    "kinetic_energy",
    "run_throughput_benchmark",
    "DIAGNOSTICS_CSV_VERSION",
]

DIAGNOSTICS_CSV_VERSION = 1


class ContactMetric(Enum):
    FULL_IMPLICIT = "FULL_IMPLICIT"
    LITE_INERTIA = "LITE_INERTIA"


class DenseSolverKind(Enum):
    DENSE_CHOLESKY = "DENSE_CHOLESKY"
    DENSE_CG = "DENSE_CG"
    DENSE_PCG_JACOBI = "DENSE_PCG_JACOBI"
    DENSE_CR = "DENSE_CR"
    DENSE_PCR_JACOBI = "DENSE_PCR_JACOBI"


@dataclass
class SolverConfig:
    h: float = 0.01
    local_global_iterations: int = 5
    linear_solver_iterations: int = 10
    tolerance: float = 1e-9
    maxforce: float = 1e10
    contact_metric: ContactMetric = ContactMetric.LITE_INERTIA
    constraint_linear_solver: DenseSolverKind = DenseSolverKind.DENSE_CHOLESKY
    early_exit: bool = False
    # debug: use the sign variant that drives the residual the wrong way
    flip_schur_rhs_sign: bool = False

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"timestep must be positive, got {self.h}")
        if self.local_global_iterations < 1:
            raise ValueError("need at least one local-global iteration")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class StepDiagnostics:
    env: int = 0
    step: int = 0
    newton_iterations_used: int = 0
    max_constraint_residual: float = 0.0
    max_penetration: float = 0.0
    n_contacts: int = 0
    n_bilateral: int = 0
    stagnation: bool = False
    finite: bool = True
    wall_time: dict = field(default_factory=dict)

    CSV_FIELDS = ("step", "env", "iterations", "residual", "penetration",
                  "contacts", "bilateral", "stagnation", "finite",
                  "t_detection", "t_projection", "t_schur", "t_solve", "t_correct")

    def csv_row(self) -> list:
        wt = self.wall_time
        return [self.step, self.env, self.newton_iterations_used,
                self.max_constraint_residual, self.max_penetration,
                self.n_contacts, self.n_bilateral, int(self.stagnation), int(self.finite),
                wt.get("detection", 0.0), wt.get("projection", 0.0),
                wt.get("schur", 0.0), wt.get("solve", 0.0), wt.get("correct", 0.0)]


@dataclass
class Control:
    """One end-effector command: verb in {add, move, grasp, release}."""

    effector: str
    verb: str
    args: dict = field(default_factory=dict)


@dataclass
class SimWorld:
    """Mutable multi-environment simulation state (positions, velocities,
    factorizations, colliders, effectors, and multiplier warm starts)."""

    system: MultiEnvSystem
    elastic: ElasticModel
    colliders: list
    effectors: list
    gravity: np.ndarray
    contact_margin: float = 0.02
    lambda_cache: list = None
    step_count: int = 0
    last_contacts: list = None
    last_lambda: list = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        n = self.system.n_envs
        if self.lambda_cache is None:
            self.lambda_cache = [dict() for _ in range(n)]
        if self.last_contacts is None:
            self.last_contacts = [[] for _ in range(n)]
        if self.last_lambda is None:
            self.last_lambda = [np.zeros(0) for _ in range(n)]

    def external_force(self, env: int) -> np.ndarray:
        return gravity_force(self.system.blocks[env].mass_physical, self.gravity)


def schur_complement(lin: NewtonLinearization, fact: SystemFactorization,
                     metric: ContactMetric) -> np.ndarray:
    """Dense constraint-space operator Z = D A^{-1} J^T + E (full metric,
    evaluated as (S D^T)^T (S J^T) sparse products) or D M^{-1} J^T + E
    (lite inertia metric).

    D equals the geometric map J on active-normal, sticking, and bilateral
    rows, where this reduces to the symmetric D A^{-1} D^T + E; slip rows
    make Z mildly nonsymmetric (handled inside the dense solvers).
    """
    R = lin.rows
    if R == 0:
        return np.zeros((0, 0))
    if metric == ContactMetric.FULL_IMPLICIT:
        WD = fact.S @ lin.D[:, fact.perm].T
        WJ = fact.S @ lin.J[:, fact.perm].T
        Z = np.asarray((WD.T @ WJ).todense())
    else:
        Z = np.asarray((lin.D @ sp.diags(1.0 / fact.M) @ lin.J.T).todense())
    return Z + np.asarray(lin.E.todense())


@dataclass
class LinearSolveInfo:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    stagnation: bool = False


def _residual(Z, x, rhs):
    return float(np.linalg.norm(rhs - Z @ x))


def _solve_cholesky(Z, rhs, tol, maxiter):
    """Direct factorization of the symmetric part plus defect correction on
    the true operator (slip friction makes Z mildly nonsymmetric)."""
    Zs = 0.5 * (Z + Z.T)
    norm_rhs = max(np.linalg.norm(rhs), 1e-300)
    try:
        cf = scipy.linalg.cho_factor(Zs, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError):
        x, *_ = np.linalg.lstsq(Z, rhs, rcond=None)
        return x, LinearSolveInfo(1, _residual(Z, x, rhs), True,
                                  _residual(Z, x, rhs) >= norm_rhs)
    x = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    it = 1
    res = _residual(Z, x, rhs)
    while res > tol * norm_rhs and it < max(2, maxiter):
        x = x + scipy.linalg.cho_solve(cf, rhs - Z @ x, check_finite=False)
        new_res = _residual(Z, x, rhs)
        if new_res >= res:  # defect correction stalled
            break
        res = new_res
        it += 1
    return x, LinearSolveInfo(it, res, res <= tol * norm_rhs, res >= norm_rhs)


def _iterative(Z, rhs, tol, maxiter, precond_diag=False, conjugate_residual=False):
    """Hand-rolled dense CG / CR with optional Jacobi preconditioning;
    returns the best iterate, flagging stagnation if the residual never
    improved on the zero initial guess."""
    n = rhs.shape[0]
    norm_rhs = max(np.linalg.norm(rhs), 1e-300)
    d = np.abs(np.diag(Z)).copy()
    d[d == 0] = 1.0
    minv = (1.0 / d) if precond_diag else np.ones(n)
    x = np.zeros(n)
    r = rhs.copy()
    best_x, best_res = x.copy(), np.linalg.norm(r)
    z = minv * r
    p = z.copy()
    if conjugate_residual:
        Zr = Z @ z
        Zp = Zr.copy()
        rz = r @ Zr
    else:
        rz = r @ z
    it = 0
    for it in range(1, max(1, maxiter) + 1):
        if conjugate_residual:
            denom = Zp @ (minv * Zp)
        else:
            Zp = Z @ p
            denom = p @ Zp
        if denom == 0 or not np.isfinite(denom):
            break
        alpha = rz / denom
        x = x + alpha * p
        r = r - alpha * Zp
        res = np.linalg.norm(r)
        if res < best_res:
            best_res, best_x = res, x.copy()
        if res <= tol * norm_rhs:
            break
        z = minv * r
        if conjugate_residual:
            Zr = Z @ z
            rz_new = r @ Zr
        else:
            rz_new = r @ z
        if rz == 0 or not np.isfinite(rz_new):
            break
        beta = rz_new / rz
        p = z + beta * p
        if conjugate_residual:
            Zp = Zr + beta * Zp
        rz = rz_new
    return best_x, LinearSolveInfo(it, best_res, best_res <= tol * norm_rhs,
                                   best_res >= norm_rhs)


_DENSE_SOLVERS = {
    DenseSolverKind.DENSE_CHOLESKY: lambda Z, b, tol, k: _solve_cholesky(Z, b, tol, k),
    DenseSolverKind.DENSE_CG: lambda Z, b, tol, k: _iterative(Z, b, tol, k),
    DenseSolverKind.DENSE_PCG_JACOBI: lambda Z, b, tol, k: _iterative(Z, b, tol, k, precond_diag=True),
    DenseSolverKind.DENSE_CR: lambda Z, b, tol, k: _iterative(Z, b, tol, k, conjugate_residual=True),
    DenseSolverKind.DENSE_PCR_JACOBI: lambda Z, b, tol, k: _iterative(Z, b, tol, k, precond_diag=True,
                                                                      conjugate_residual=True),
}


def solve_constraint_increment(Z: np.ndarray, lin: NewtonLinearization,
                               fact: SystemFactorization, h: float,
                               config: SolverConfig):
    """Solve for the multiplier increment and clamp the updated multiplier
    componentwise to +/- maxforce. Returns (delta_lam, LinearSolveInfo)."""
    if lin.rows == 0:
        return np.zeros(0), LinearSolveInfo()
    ainv_g = fact.apply_inverse(lin.g)
    rhs = lin.h_vec - lin.D @ ainv_g
    if config.flip_schur_rhs_sign:
        rhs = -rhs
    u, info = _DENSE_SOLVERS[config.constraint_linear_solver](
        Z, rhs, config.tolerance, config.linear_solver_iterations)
    delta = u / (h * h)
    new_lam = np.clip(lin.lam + delta, -config.maxforce, config.maxforce)
    return new_lam - lin.lam, info


def correct_positions(fact: SystemFactorization, b: np.ndarray,
                      lin: NewtonLinearization, lam: np.ndarray, h: float) -> np.ndarray:
    """x = S^T S (b + h^2 J^T lam); the unconstrained global step for lam=0.

    Forces enter through the geometric contact map J, so slip friction
    transmits its full tangential force."""
    rhs = b if lin.rows == 0 else b + (h * h) * (lin.J.T @ lam)
    return fact.apply_inverse(rhs)


def _min_gap(x: np.ndarray, colliders: list) -> float:
    if not colliders:
        return np.inf
    pts = x.reshape(-1, 3)
    return min(float(c.signed_distance(pts).min()) for c in colliders)


def _apply_controls(world: SimWorld, env: int, commands) -> None:
    reg: EffectorRegistry = world.effectors[env]
    positions = world.system.x[env].reshape(-1, 3)
    for cmd in commands:
        if cmd.verb == "add":
            reg.add_ee(cmd.effector, cmd.args["pose"], cmd.args["size"])
        elif cmd.verb == "move":
            reg.move_ee(cmd.effector, cmd.args["pose"])
        elif cmd.verb == "grasp":
            reg.grasp_ee(cmd.effector, True, positions)
        elif cmd.verb == "release":
            reg.grasp_ee(cmd.effector, False, positions)
        else:
            raise ValueError(f"unknown control verb {cmd.verb!r}")


def step(world: SimWorld, config: SolverConfig, controls=None) -> list:
    """Advance every environment by one timestep; returns per-env diagnostics.

    ``controls`` is an optional per-env list of Control command lists,
    applied through the effector registries before collision detection.
    Solver stagnation is reported in the diagnostics, never raised.
    """
    sys = world.system
    h = config.h
    if abs(h - sys.h) > 0:
        raise ValueError(f"config timestep {h} != assembled timestep {sys.h}")
    diags = []
    with np.errstate(all="ignore"):
        for e in range(sys.n_envs):
            if controls is not None and controls[e]:
                _apply_controls(world, e, controls[e])
        for e in range(sys.n_envs):
            diags.append(_step_env(world, e, config))
    world.step_count += 1
    return diags


def _step_env(world: SimWorld, e: int, config: SolverConfig) -> StepDiagnostics:
    sys = world.system
    fact = sys.blocks[e]
    h = config.h
    wt = {"detection": 0.0, "projection": 0.0, "schur": 0.0, "solve": 0.0, "correct": 0.0}

    t0 = time.perf_counter()
    x_t = sys.x[e].copy()
    contacts = detect_contacts(x_t.reshape(-1, 3), world.colliders, world.contact_margin)
    set_regularization(contacts, fact.M, h)
    bilaterals = world.effectors[e].emit_bilateral_rows()
    cache = world.lambda_cache[e]
    lam = np.zeros(3 * len(contacts) + 3 * len(bilaterals))
    for i, c in enumerate(contacts):
        key = ("c", c.collider_id, c.vertex_id)
        if key in cache:
            lam[3 * i:3 * i + 3] = cache[key]
        c.lam = lam[3 * i:3 * i + 3].copy()
    for j, bc in enumerate(bilaterals):
        row0 = 3 * len(contacts) + 3 * j
        key = ("b", bc.vertex_id)
        if key in cache:
            lam[row0:row0 + 3] = cache[key]
    wt["detection"] += time.perf_counter() - t0

    f_ext = world.external_force(e)
    y = predict_state(x_t, sys.v[e], f_ext, h, fact.M)
    sys.y[e] = y

    constraints = list(contacts) + list(bilaterals)
    x = x_t.copy()
    stagnation = False
    iterations = 0
    lin = None
    for _ in range(config.local_global_iterations):
        t0 = time.perf_counter()
        p = world.elastic.project(x)
        b = assemble_rhs(fact, y, p)
        wt["projection"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        lin = build_linearization(constraints, x, lam, b, h)
        Z = schur_complement(lin, fact, config.contact_metric)
        wt["schur"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        delta, info = solve_constraint_increment(Z, lin, fact, h, config)
        lam = lam + delta
        stagnation = stagnation or info.stagnation
        wt["solve"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        x_new = correct_positions(fact, b, lin, lam, h)
        wt["correct"] += time.perf_counter() - t0
        iterations += 1
        if config.early_exit and lin.rows:
            phi = stacked_phi(contacts, bilaterals, x_new, lam)
            if (np.abs(phi).max() < config.tolerance
                    and np.abs(x_new - x).max() < config.tolerance):
                x = x_new
                break
        x = x_new

    sys.v[e] = (x - x_t) / h
    sys.x[e] = x

    new_cache = {}
    for i, c in enumerate(contacts):
        c.lam = lam[3 * i:3 * i + 3].copy()
        new_cache[("c", c.collider_id, c.vertex_id)] = c.lam.copy()
    for j, bc in enumerate(bilaterals):
        row0 = 3 * len(contacts) + 3 * j
        new_cache[("b", bc.vertex_id)] = lam[row0:row0 + 3].copy()
    world.lambda_cache[e] = new_cache
    world.last_contacts[e] = contacts
    world.last_lambda[e] = lam.copy()

    phi = stacked_phi(contacts, bilaterals, x, lam)
    residual = float(np.abs(phi).max()) if phi.size else 0.0
    min_gap = _min_gap(x, world.colliders)
    finite = bool(np.isfinite(x).all() and np.isfinite(lam).all())
    return StepDiagnostics(
        env=e, step=world.step_count, newton_iterations_used=iterations,
        max_constraint_residual=residual,
        max_penetration=max(0.0, -min_gap) if np.isfinite(min_gap) else 0.0,
        n_contacts=len(contacts), n_bilateral=len(bilaterals),
        stagnation=stagnation, finite=finite, wall_time=wt,
    )


def kinetic_energy(world: SimWorld, env: int) -> float:
    """0.5 sum m v^2 with physical (un-augmented) masses, in joules."""
    v = world.system.v[env]
    return 0.5 * float(world.system.blocks[env].mass_physical @ (v * v))


def run_throughput_benchmark(config, n_envs_list, steps: int = 20, warmup: int = 3,
                             solver_config: SolverConfig = None) -> list:
    """Mean ms/step for each environment count, plus the scaling ratio
    against the single-env row. ``config`` is a SceneConfig."""
    from .scene import initialize  # late import: scene builds on this module

    rows = []
    base = None
    for n in n_envs_list:
        session = initialize(config, n_envs=n)
        if solver_config is not None:
            session.solver_config = solver_config
        for _ in range(warmup):
            session.step()
        t0 = time.perf_counter()
        for _ in range(steps):
            session.step()
        ms = (time.perf_counter() - t0) / steps * 1e3
        if base is None:
            base = ms
        rows.append({"n_envs": n, "ms_per_step": ms, "ratio_vs_1": ms / base})
    return rows
