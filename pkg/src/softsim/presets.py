"""Ready-made desk-scale scenes and scripted control schedules.

These builders construct SceneConfig values programmatically (no files) and
are shared by the command-line runner, the demo scripts, and the test suite.
``write_scenario_files`` materializes a file-based variant (OBJ + JSON) for
the runner's end-to-end path.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .contact import PlaneCollider
from .material import MaterialParams
from .mesh import DeformableMesh, RigidTransform, export_obj, make_grid_cloth, make_tee_cloth
from .scene import AssetConfig, SceneConfig, Session
from .solver import ContactMetric, Control

__all__ = [
    "towel_scene",
    "drop_scene",
    "incline_scene",
    "tee_scene",
    "ControlSchedule",
    "single_arm_fold_schedule",
    "dual_arm_tee_fold_schedule",
    "pinned_corners_schedule",
    "write_scenario_files",
]

TABLE_MU = 1.0

# Light desk-scale cloth is elasticity-dominated, outside the inertia-dominated
# regime that justifies the lite contact metric, so presets default to the
# fully implicit metric. Scene *files* still default to the lite solver name.
_PRESET_SOLVER = "NonSmoothNewton"


def _cloth_asset(name: str, mesh: DeformableMesh, mass: float, young: float,
                 poisson: float, bending: float, transform: RigidTransform = None) -> AssetConfig:
    params = MaterialParams(young=young, poisson=poisson, bending=bending,
                            constitutive="TRI_ARAP", obj_mass=mass)
    return AssetConfig.from_mesh(name, mesh, params, transform)


def towel_scene(n: int = 8, size: float = 0.24, mass: float = 0.05, mu: float = TABLE_MU,
                h: float = 0.01, drop: float = 0.0, young: float = 3.0e4,
                poisson: float = 0.4, bending: float = 0.2) -> SceneConfig:
    """Square towel resting on (or dropped onto) the y=0 table plane."""
    mesh = make_grid_cloth(n, n, size)
    asset = _cloth_asset("towel", mesh, mass, young, poisson, bending,
                         RigidTransform(trans=(0.0, drop, 0.0)))
    return SceneConfig(
        timestep=h,
        constraintsolver_type=_PRESET_SOLVER,
        contact_metric=ContactMetric.FULL_IMPLICIT,
        plane_colliders=[PlaneCollider((0, 0, 0), (0, 1, 0), mu)],
        assets=[asset],
        objects_raw={"towel": asset.mesh_path},
    )


def drop_scene(drop: float = 0.05, **kwargs) -> SceneConfig:
    return towel_scene(drop=drop, **kwargs)


def incline_scene(theta: float, mu: float, n: int = 2, size: float = 0.1,
                  mass: float = 0.01, h: float = 0.01, young: float = 3.0e4,
                  poisson: float = 0.4, bending: float = 0.2) -> SceneConfig:
    """Small cloth patch resting exactly on a plane inclined by theta radians
    about the z axis. The analytic stick/slip threshold is mu = tan(theta)."""
    mesh = make_grid_cloth(n, n, size)
    tilt = RigidTransform(rotation=(0.0, 0.0, theta))
    asset = _cloth_asset("patch", mesh, mass, young, poisson, bending, tilt)
    normal = tilt.matrix() @ np.array([0.0, 1.0, 0.0])
    return SceneConfig(
        timestep=h,
        constraintsolver_type=_PRESET_SOLVER,
        contact_metric=ContactMetric.FULL_IMPLICIT,
        plane_colliders=[PlaneCollider((0, 0, 0), normal, mu)],
        assets=[asset],
        objects_raw={"patch": asset.mesh_path},
    )


def tee_scene(mu: float = TABLE_MU, mass: float = 0.08, h: float = 0.01,
              young: float = 3.0e4, poisson: float = 0.4, bending: float = 0.2,
              spacing: float = 0.03) -> SceneConfig:
    """T-shirt-style panel centered on the table plane."""
    mesh = make_tee_cloth(body_width=0.16, body_height=0.26, sleeve_length=0.09,
                          sleeve_height=0.09, spacing=spacing)
    span = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    center = RigidTransform(trans=(-span[0] / 2, 0.0, -span[2] / 2))
    asset = _cloth_asset("tee", mesh, mass, young, poisson, bending, center)
    return SceneConfig(
        timestep=h,
        constraintsolver_type=_PRESET_SOLVER,
        contact_metric=ContactMetric.FULL_IMPLICIT,
        plane_colliders=[PlaneCollider((0, 0, 0), (0, 1, 0), mu)],
        assets=[asset],
        objects_raw={"tee": asset.mesh_path},
    )


class ControlSchedule:
    """Timed effector commands, broadcast to every environment by default.

    Events are (step, Control) pairs; ``controls_at(step, n_envs, env=None)``
    yields the per-env command lists expected by the solver, restricted to a
    single environment when ``env`` is given.
    """

    def __init__(self, events=None, duration: int = 0):
        self.events = sorted(events or [], key=lambda ev: ev[0])
        self.duration = duration

    def add(self, step: int, control: Control) -> "ControlSchedule":
        self.events.append((step, control))
        self.events.sort(key=lambda ev: ev[0])
        return self

    def controls_at(self, step: int, n_envs: int, env: int = None):
        cmds = [c for s, c in self.events if s == step]
        if not cmds:
            return None
        return [cmds if (env is None or e == env) else [] for e in range(n_envs)]

    def run(self, session: Session, env: int = None, extra_steps: int = 0):
        """Play the whole schedule on a session; returns all diagnostics."""
        diags = []
        for step in range(self.duration + extra_steps):
            diags.extend(session.step(self.controls_at(step, session.n_envs, env)))
        return diags


def _interpolated_moves(name: str, start: np.ndarray, waypoints, start_step: int):
    """One move command per step along piecewise-linear waypoint legs."""
    events = []
    pose = np.asarray(start, dtype=np.float64)
    step = start_step
    for target, n_steps in waypoints:
        target = np.asarray(target, dtype=np.float64)
        for k in range(1, n_steps + 1):
            p = pose + (target - pose) * (k / n_steps)
            events.append((step, Control(name, "move", {"pose": p.tolist()})))
            step += 1
        pose = target
    return events, step


def single_arm_fold_schedule(size: float = 0.24, speed_mult: float = 1.0,
                             settle: int = 120) -> ControlSchedule:
    """Grasp the towel corner at the origin and fold it onto the opposite
    corner along a lift-travel-lower arc, then release and settle."""
    ee = "arm"
    grab = np.array([0.0, 0.0, 0.0])
    lift = np.array([0.15 * size, 0.45 * size, 0.15 * size])
    carry = np.array([0.8 * size, 0.25 * size, 0.8 * size])
    land = np.array([0.97 * size, 0.01 * size, 0.97 * size])
    n1 = max(2, int(round(40 / speed_mult)))
    n2 = max(2, int(round(60 / speed_mult)))
    n3 = max(2, int(round(30 / speed_mult)))
    events = [
        (0, Control(ee, "add", {"pose": grab.tolist(), "size": [0.02, 0.02, 0.02]})),
        (2, Control(ee, "grasp")),
    ]
    moves, step = _interpolated_moves(ee, grab, [(lift, n1), (carry, n2), (land, n3)], 3)
    events += moves
    events.append((step, Control(ee, "release")))
    return ControlSchedule(events, duration=step + 1 + settle)


def dual_arm_tee_fold_schedule(session: Session, speed_mult: float = 1.0,
                               settle: int = 100) -> ControlSchedule:
    """Sequential two-arm sleeve fold: left sleeve tip to the body midline,
    release, then the mirrored motion with the right arm."""
    pts = session.get_state(0).positions
    z_top = pts[:, 2].max()
    band = pts[:, 2] > z_top - 0.05
    left_tip = pts[band][np.argmin(pts[band, 0])]
    right_tip = pts[band][np.argmax(pts[band, 0])]
    mid = np.array([0.0, 0.0, left_tip[2]])
    height = 0.35 * (right_tip[0] - left_tip[0])

    def arm_events(name, tip, start_step):
        lift = np.array([tip[0] * 0.6, height, tip[2]])
        land = np.array([mid[0] + 0.1 * (mid[0] - tip[0]), 0.01, tip[2]])
        n1 = max(2, int(round(30 / speed_mult)))
        n2 = max(2, int(round(50 / speed_mult)))
        events = [
            (start_step, Control(name, "add",
                                 {"pose": tip.tolist(), "size": [0.025, 0.025, 0.025]})),
            (start_step + 2, Control(name, "grasp")),
        ]
        moves, step = _interpolated_moves(name, tip, [(lift, n1), (land, n2)], start_step + 3)
        events += moves
        events.append((step, Control(name, "release")))
        return events, step + 1

    left, t1 = arm_events("left", left_tip, 0)
    right, t2 = arm_events("right", right_tip, t1 + 20)
    return ControlSchedule(left + right, duration=t2 + settle)


def pinned_corners_schedule(corner_a, corner_b, duration: int) -> ControlSchedule:
    """Two static closed effectors pinning two cloth corners (a drape rig)."""
    events = []
    for name, corner in (("pin_a", corner_a), ("pin_b", corner_b)):
        events.append((0, Control(name, "add",
                                  {"pose": list(map(float, corner)), "size": [0.012] * 3})))
        events.append((1, Control(name, "grasp")))
    return ControlSchedule(events, duration=duration)


def write_scenario_files(out_dir: str, n: int = 6, size: float = 0.24) -> str:
    """Write a complete file-based towel-fold scenario (OBJ mesh, asset JSON,
    scene JSON, scenario JSON) and return the scenario path."""
    os.makedirs(out_dir, exist_ok=True)
    mesh = make_grid_cloth(n, n, size)
    export_obj(mesh, os.path.join(out_dir, "towel.obj"))
    with open(os.path.join(out_dir, "towel.json"), "w") as fh:
        json.dump({
            "mesh": "towel.obj",
            "element_type": "TRIANGLE",
            "transformation": {"trans": [0, 0, 0], "rotation": [0, 0, 0]},
            "mechanical_props": {"obj_mass": 0.05, "young": 3e4, "poisson": 0.4,
                                 "constitutive": "TRI_ARAP", "bending": 0.2},
        }, fh, indent=2)
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump({
            "timestep": 0.01,
            "gravity": [0, -9.81, 0],
            "linearsolver": {"type": "SPARSE_INVERSE"},
            "constraintsolver": {"type": "LiteNonSmoothNewton", "maxforce": 1e10,
                                 "iterations": 10, "tolerance": 1e-9},
            "planecollisions": [{"point": [0, 0, 0], "normal": [0, 1, 0], "mu": 1.0}],
            "objects": {"towel": "towel.json"},
        }, fh, indent=2)
    schedule = single_arm_fold_schedule(size=size, settle=60)
    controls = [{"step": s, "effector": c.effector, "verb": c.verb, "args": c.args}
                for s, c in schedule.events if c.verb != "add"]
    effectors = [{"name": c.effector, "pose": c.args["pose"], "size": c.args["size"]}
                 for s, c in schedule.events if c.verb == "add"]
    scenario = {
        "scene": "scene.json",
        "duration": schedule.duration,
        "effectors": effectors,
        "controls": controls,
        "exports": {"obj_every": 50, "depth_every": 0, "csv": "diagnostics.csv"},
    }
    path = os.path.join(out_dir, "scenario.json")
    with open(path, "w") as fh:
        json.dump(scenario, fh, indent=2)
    return path
