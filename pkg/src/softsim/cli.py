"""Command-line scenario runner and benchmark/ablation reporting.

Subcommands:
    run             play a scenario file, exporting meshes/depth/diagnostics
    friction-sweep  stick/slip transition sweep on an inclined plane
    bench           ms/step (or ms/render) versus environment count
    ablate          fold-quality metrics over a parameter grid

Exit codes: 0 success, 1 configuration error, 2 completed with solver
stagnation diagnostics present.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import presets
from .errors import ParseError, SimError
from .mesh import DeformableMesh, export_obj
from .metrics import max_displacement, projected_overlap_area
from .render import DepthCamera, render_benchmark, render_depth, write_pgm
from .scene import Session, initialize, load_config
from .solver import Control, ContactMetric, DenseSolverKind, run_throughput_benchmark

_SCENARIO_KEYS = {"scene", "duration", "effectors", "controls", "exports"}
_CONTROL_KEYS = {"step", "effector", "verb", "args"}
_EXPORT_KEYS = {"obj_every", "depth_every", "csv"}


def _load_scenario(path: str) -> dict:
    if not os.path.isfile(path):
        raise ParseError(path, "$", "scenario file not found")
    try:
        with open(path, "r") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"line {exc.lineno}", exc.msg) from exc
    for k in data:
        if k not in _SCENARIO_KEYS:
            raise ParseError(path, f"$.{k}", "unknown key")
    for key in ("scene", "duration"):
        if key not in data:
            raise ParseError(path, f"$.{key}", "required key missing")
    duration = int(data["duration"])
    last = -1
    for i, ev in enumerate(data.get("controls", [])):
        for k in ev:
            if k not in _CONTROL_KEYS:
                raise ParseError(path, f"$.controls[{i}].{k}", "unknown key")
        if ev.get("verb") not in ("move", "grasp", "release"):
            raise ParseError(path, f"$.controls[{i}].verb", f"bad verb {ev.get('verb')!r}")
        step = int(ev["step"])
        if step < last:
            raise ParseError(path, f"$.controls[{i}].step", "control steps must be sorted")
        if not 0 <= step < duration:
            raise ParseError(path, f"$.controls[{i}].step", "step outside scenario duration")
        last = step
    for k in data.get("exports", {}):
        if k not in _EXPORT_KEYS:
            raise ParseError(path, f"$.exports.{k}", "unknown key")
    return data


def _export_objs(session: Session, out_dir: str, step: int) -> None:
    for e in range(session.n_envs):
        pts = session.get_state(e).positions
        for sl in session.layout:
            body = sl.mesh.copy()
            body.vertices = pts[sl.vertex_offset:sl.vertex_offset + sl.n_vertices]
            export_obj(body, os.path.join(out_dir, f"{sl.name}_env{e}_step{step:05d}.obj"))


def _auto_camera(session: Session) -> DepthCamera:
    pts = session.get_state(0).positions
    span = float(np.abs(pts[:, [0, 2]]).max()) + 0.1
    h = max(0.5, 2.5 * span)
    f = 40.0 * h / span  # frame the scene with margin
    return DepthCamera.overhead(height=h, fx=f, fy=f, cx=48.0, cy=48.0,
                                width=96, height=96)


def cmd_run(args) -> int:
    scenario = _load_scenario(args.scenario)
    base = os.path.dirname(os.path.abspath(args.scenario))
    scene_path = scenario["scene"]
    if not os.path.isabs(scene_path):
        scene_path = os.path.join(base, scene_path)
    config = load_config(scene_path)
    rng = np.random.default_rng(args.seed)
    scale = rng.uniform(0.5, 1.5, size=args.envs) if args.randomize_material else None
    session = initialize(config, n_envs=args.envs, material_scale=scale)
    if args.metric:
        session.solver_config.contact_metric = ContactMetric[
            "FULL_IMPLICIT" if args.metric == "full" else "LITE_INERTIA"]
    if args.solver:
        session.solver_config.constraint_linear_solver = DenseSolverKind[args.solver]

    for ee in scenario.get("effectors", []):
        session.add_ee(ee["name"], ee["pose"], ee["size"])
    by_step = {}
    for ev in scenario.get("controls", []):
        by_step.setdefault(int(ev["step"]), []).append(
            Control(ev["effector"], ev["verb"], ev.get("args", {})))

    os.makedirs(args.out, exist_ok=True)
    exports = scenario.get("exports", {})
    obj_every = args.export_obj_every or int(exports.get("obj_every", 0))
    depth_every = args.export_depth_every or int(exports.get("depth_every", 0))
    camera = _auto_camera(session) if depth_every else None

    stagnated = False
    for step in range(int(scenario["duration"])):
        cmds = by_step.get(step)
        diags = session.step([cmds] * session.n_envs if cmds else None)
        stagnated = stagnated or any(d.stagnation for d in diags)
        if obj_every and step % obj_every == 0:
            _export_objs(session, args.out, step)
        if depth_every and step % depth_every == 0:
            for e in range(session.n_envs):
                img = render_depth(session, e, camera)
                write_pgm(img, os.path.join(args.out, f"depth_env{e}_step{step:05d}.pgm"))
    csv_name = exports.get("csv", "diagnostics.csv")
    session.export_diagnostics_csv(os.path.join(args.out, csv_name))
    print(f"completed {scenario['duration']} steps x {session.n_envs} envs; "
          f"exports in {args.out}")
    return 2 if stagnated else 0


def cmd_friction_sweep(args) -> int:
    theta = math.radians(args.incline)
    if not (args.mu_low < math.tan(theta) < args.mu_high):
        print(f"error: sweep range must bracket tan(theta) = {math.tan(theta):.6f}",
              file=sys.stderr)
        return 1
    mus = np.linspace(args.mu_low, args.mu_high, args.steps)
    rows = []
    for mu in mus:
        config = presets.incline_scene(theta, float(mu))
        session = initialize(config, n_envs=1)
        x0 = session.get_state(0).positions
        for _ in range(args.sim_steps):
            session.step()
        disp = max_displacement(x0, session.get_state(0).positions)
        rows.append((float(mu), disp))
    print(f"incline {args.incline:.3f} deg, tan(theta) = {math.tan(theta):.6f}")
    print(f"{'mu':>10} {'displacement_m':>16} verdict")
    slip_mu, stick_mu = None, None
    for mu, disp in rows:
        verdict = "slip" if disp > args.slip_threshold else \
            ("stick" if disp < args.stick_threshold else "transition")
        if verdict == "slip":
            slip_mu = mu
        if verdict == "stick" and stick_mu is None:
            stick_mu = mu
        print(f"{mu:10.4f} {disp:16.3e} {verdict}")
    if slip_mu is not None and stick_mu is not None:
        print(f"transition bracketed in ({slip_mu:.4f}, {stick_mu:.4f}); "
              f"width {stick_mu - slip_mu:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "friction_sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu", "displacement_m"])
            w.writerows(rows)
    return 0


def cmd_bench(args) -> int:
    n_list = [int(s) for s in args.envs_list.split(",")]
    config = presets.towel_scene(n=args.grid, drop=0.02)
    if args.mode == "sim":
        rows = run_throughput_benchmark(config, n_list, steps=args.steps)
        key = "ms_per_step"
    elif args.mode == "render":
        camera = DepthCamera.overhead(height=1.0)
        rows = render_benchmark(config, camera, n_list)
        key = "ms_per_frame"
    else:
        print(f"error: unknown mode {args.mode!r} (expected sim or render)", file=sys.stderr)
        return 1
    print(f"{'n_envs':>8} {key:>14} {'ratio_vs_1':>12}")
    for r in rows:
        print(f"{r['n_envs']:8d} {r[key]:14.3f} {r['ratio_vs_1']:12.2f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"bench_{args.mode}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_envs", key, "ratio_vs_1"])
            w.writerows([[r["n_envs"], r[key], r["ratio_vs_1"]] for r in rows])
    return 0


def run_tee_fold(speed_mult: float = 1.0, bending: float = 0.2, iters: int = 5,
                 linear_iters: int = None, solver: DenseSolverKind = None) -> dict:
    """One dual-arm tee fold; returns fold-quality metrics.

    overlap_left: projected area of the left half folded onto the right half
    (larger = better fold). peak_ke: largest kinetic energy transient.
    """
    config = presets.tee_scene(bending=bending)
    session = initialize(config, n_envs=1,
                         local_global_iterations=iters)
    if linear_iters is not None:
        session.solver_config.linear_solver_iterations = linear_iters
    if solver is not None:
        session.solver_config.constraint_linear_solver = solver
    schedule = presets.dual_arm_tee_fold_schedule(session, speed_mult=speed_mult)
    rest = session.get_state(0).positions
    peak_ke = 0.0
    for step in range(schedule.duration):
        session.step(schedule.controls_at(step, 1))
        peak_ke = max(peak_ke, session.kinetic_energy(0))
    final = session.get_state(0).positions
    _, faces, _ = session.triangles(0)
    diags = session.diagnostics
    return {
        "overlap_left": projected_overlap_area(rest, final, faces, axis=0, midline=0.0),
        "peak_ke": peak_ke,
        "max_abs_position": float(np.abs(final).max()),
        "max_penetration": max(d.max_penetration for d in diags),
        "final_residual": diags[-1].max_constraint_residual,
        "finite": all(d.finite for d in diags),
    }


def cmd_ablate(args) -> int:
    speeds = [float(s) for s in args.speed_mult.split(",")]
    bendings = [float(s) for s in args.bending.split(",")]
    iters = [int(s) for s in args.iters.split(",")]
    print("tee-fold ablation: overlap = projected left-half area folded over "
          "the midline (m^2); peak_ke in J")
    header = f"{'speed':>7} {'bending':>9} {'iters':>6} {'overlap':>12} {'peak_ke':>12} " \
             f"{'penetration':>12} {'finite':>7}"
    print(header)
    rows = []
    for it in iters:
        for bend in bendings:
            for sp in speeds:
                m = run_tee_fold(speed_mult=sp, bending=bend, iters=it, linear_iters=it)
                rows.append((sp, bend, it, m))
                print(f"{sp:7.2f} {bend:9.3f} {it:6d} {m['overlap_left']:12.5f} "
                      f"{m['peak_ke']:12.3e} {m['max_penetration']:12.3e} "
                      f"{str(m['finite']):>7}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["speed_mult", "bending", "iters", "overlap_left", "peak_ke",
                        "max_penetration", "finite"])
            for sp, bend, it, m in rows:
                w.writerow([sp, bend, it, m["overlap_left"], m["peak_ke"],
                            m["max_penetration"], m["finite"]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softsim", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="play a scenario file")
    run.add_argument("scenario")
    run.add_argument("--envs", type=int, default=1)
    run.add_argument("--out", default="out")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=None,
                     help="worker pin count for reproducible timings (best effort)")
    run.add_argument("--metric", choices=["full", "lite"], default=None)
    run.add_argument("--solver", choices=[k.name for k in DenseSolverKind], default=None)
    run.add_argument("--export-obj-every", type=int, default=0)
    run.add_argument("--export-depth-every", type=int, default=0)
    run.add_argument("--randomize-material", action="store_true")
    run.set_defaults(func=cmd_run)

    fs = sub.add_parser("friction-sweep", help="stick/slip transition sweep")
    fs.add_argument("--mu-low", type=float, required=True)
    fs.add_argument("--mu-high", type=float, required=True)
    fs.add_argument("--steps", type=int, default=5, help="number of mu samples")
    fs.add_argument("--incline", type=float, default=10.0, help="degrees")
    fs.add_argument("--sim-steps", type=int, default=300)
    fs.add_argument("--stick-threshold", type=float, default=1e-4)
    fs.add_argument("--slip-threshold", type=float, default=1e-2)
    fs.add_argument("--seed", type=int, default=0)
    fs.add_argument("--out", default=None)
    fs.set_defaults(func=cmd_friction_sweep)

    be = sub.add_parser("bench", help="throughput/render scaling table")
    be.add_argument("--envs-list", default="1,8,32")
    be.add_argument("--mode", default="sim")
    be.add_argument("--steps", type=int, default=20)
    be.add_argument("--grid", type=int, default=8)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", default=None)
    be.set_defaults(func=cmd_bench)

    ab = sub.add_parser("ablate", help="fold-quality parameter grid")
    ab.add_argument("--speed-mult", default="1")
    ab.add_argument("--bending", default="0.2")
    ab.add_argument("--iters", default="5")
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--out", default=None)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.workers))
    try:
        return args.func(args)
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
