"""Scene/asset configuration files and the multi-environment session API.

Scene files configure the timestep, gravity, solvers, static plane colliders
and the deformable objects; asset files give each object its mesh, initial
placement, and mechanical properties. Unknown keys are rejected with their
location rather than silently ignored.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import solver as _solver
from .assembly import assemble_from_masses, stack_envs
from .contact import PlaneCollider
from .errors import BadEnvId, InvalidDimension, MissingAsset, ParseError, UnknownSolverType
from .grasp import EffectorRegistry
from .material import ElasticModel, MaterialParams, ProjectiveConstraint, build_constraints
from .mesh import DeformableMesh, ElementType, RigidTransform, apply_transform, load_obj, load_tet_sidecar, lump_masses
from .solver import ContactMetric, SimWorld, SolverConfig, StepDiagnostics

__all__ = [
    "AssetConfig",
    "SceneConfig",
    "StateSnapshot",
    "Session",
    "load_config",
    "save_config",
    "initialize",
    "read_diagnostics_csv",
]

_SCENE_KEYS = {"timestep", "gravity", "linearsolver", "constraintsolver", "planecollisions", "objects"}
_CSOLVER_KEYS = {"type", "maxforce", "iterations", "tolerance"}
_ASSET_KEYS = {"mesh", "element_type", "transformation", "mechanical_props"}
_TRANSFORM_KEYS = {"trans", "rotation"}
_MECH_KEYS = {"obj_mass", "young", "poisson", "constitutive", "bending"}
_PLANE_KEYS = {"point", "normal", "mu"}

DEFAULT_GRAVITY = (0.0, -9.81, 0.0)
DEFAULT_MAXFORCE = 1.0e10
DEFAULT_TOLERANCE = 1.0e-9
DEFAULT_ITERATIONS = 10
DEFAULT_LOCAL_GLOBAL_ITERATIONS = 5


def _reject_unknown(d: dict, allowed: set, path: str, location: str):
    for k in d:
        if k not in allowed:
            raise ParseError(path, f"{location}.{k}", "unknown key")


def _parse_constraint_solver_type(raw: str, path: str):
    name = raw[:-5] if raw.endswith("_CUDA") else raw
    if name == "LiteNonSmoothNewton":
        return ContactMetric.LITE_INERTIA
    if name == "NonSmoothNewton":
        return ContactMetric.FULL_IMPLICIT
    raise UnknownSolverType(f"{path}: constraintsolver.type {raw!r}")


def _parse_linear_solver_type(raw: str, path: str) -> str:
    name = raw[:-5] if raw.endswith("_CUDA") else raw
    if name != "SPARSE_INVERSE":
        raise UnknownSolverType(f"{path}: linearsolver.type {raw!r}")
    return raw


@dataclass
class AssetConfig:
    """One deformable object: loaded mesh, placement, and material."""

    name: str
    mesh_path: str
    element_type: ElementType
    transformation: RigidTransform
    mechanical: MaterialParams
    mesh: DeformableMesh = None

    @classmethod
    def from_mesh(cls, name: str, mesh: DeformableMesh, mechanical: MaterialParams,
                  transformation: RigidTransform = None) -> "AssetConfig":
        """Programmatic asset (no files involved); masses are re-lumped from
        the configured object mass."""
        out = cls(name, f"<procedural:{name}>", mesh.element_type,
                  transformation or RigidTransform(), mechanical,
                  lump_masses(mesh, mechanical.obj_mass))
        return out

    def to_dict(self) -> dict:
        return {
            "mesh": self.mesh_path,
            "element_type": self.element_type.value,
            "transformation": {
                "trans": list(map(float, self.transformation.trans)),
                "rotation": list(map(float, self.transformation.rotation)),
            },
            "mechanical_props": {
                "obj_mass": self.mechanical.obj_mass,
                "young": self.mechanical.young,
                "poisson": self.mechanical.poisson,
                "constitutive": self.mechanical.constitutive.value,
                "bending": self.mechanical.bending,
            },
        }


@dataclass
class SceneConfig:
    timestep: float
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))
    linearsolver_type: str = "SPARSE_INVERSE"
    constraintsolver_type: str = "LiteNonSmoothNewton"
    contact_metric: ContactMetric = ContactMetric.LITE_INERTIA
    maxforce: float = DEFAULT_MAXFORCE
    iterations: int = DEFAULT_ITERATIONS
    tolerance: float = DEFAULT_TOLERANCE
    plane_colliders: list = field(default_factory=list)
    assets: list = field(default_factory=list)
    objects_raw: dict = field(default_factory=dict)
    path: str = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        if self.timestep <= 0:
            raise InvalidDimension(f"timestep must be positive, got {self.timestep}")

    def to_dict(self) -> dict:
        return {
            "timestep": self.timestep,
            "gravity": list(map(float, self.gravity)),
            "linearsolver": {"type": self.linearsolver_type},
            "constraintsolver": {
                "type": self.constraintsolver_type,
                "maxforce": self.maxforce,
                "iterations": self.iterations,
                "tolerance": self.tolerance,
            },
            "planecollisions": [
                {"point": list(map(float, p.point)),
                 "normal": list(map(float, p.normal)),
                 "mu": p.mu}
                for p in self.plane_colliders
            ],
            "objects": dict(self.objects_raw),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneConfig):
            return NotImplemented
        mine, theirs = self.to_dict(), other.to_dict()
        mine_assets = [a.to_dict() for a in self.assets]
        their_assets = [a.to_dict() for a in other.assets]
        return mine == theirs and mine_assets == their_assets

    def solver_config(self, local_global_iterations: int = DEFAULT_LOCAL_GLOBAL_ITERATIONS) -> SolverConfig:
        return SolverConfig(
            h=self.timestep,
            local_global_iterations=local_global_iterations,
            linear_solver_iterations=self.iterations,
            tolerance=self.tolerance,
            maxforce=self.maxforce,
            contact_metric=self.contact_metric,
        )


def _load_asset(name: str, raw_path: str, base_dir: str) -> AssetConfig:
    path = raw_path if os.path.isabs(raw_path) else os.path.join(base_dir, raw_path)
    if not os.path.isfile(path):
        raise MissingAsset(f"object {name!r}: {path}")
    try:
        with open(path, "r") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"line {exc.lineno}", exc.msg) from exc
    _reject_unknown(data, _ASSET_KEYS, path, "$")
    for key in ("mesh", "element_type"):
        if key not in data:
            raise ParseError(path, f"$.{key}", "required key missing")
    try:
        etype = ElementType(data["element_type"])
    except ValueError as exc:
        raise ParseError(path, "$.element_type", str(exc)) from exc
    tdata = data.get("transformation", {})
    _reject_unknown(tdata, _TRANSFORM_KEYS, path, "$.transformation")
    transform = RigidTransform(np.asarray(tdata.get("trans", (0, 0, 0)), dtype=np.float64),
                               np.asarray(tdata.get("rotation", (0, 0, 0)), dtype=np.float64))
    mdata = data.get("mechanical_props", {})
    _reject_unknown(mdata, _MECH_KEYS, path, "$.mechanical_props")
    mech = MaterialParams(
        young=float(mdata.get("young", 3.0e4)),
        poisson=float(mdata.get("poisson", 0.4)),
        bending=float(mdata.get("bending", 0.2)),
        constitutive=mdata.get("constitutive", "TRI_ARAP" if etype == ElementType.TRIANGLE else "TET_ARAP"),
        obj_mass=float(mdata.get("obj_mass", 1.0)),
    )
    mesh_path = data["mesh"]
    mesh_abs = mesh_path if os.path.isabs(mesh_path) else os.path.join(os.path.dirname(path), mesh_path)
    if not os.path.isfile(mesh_abs):
        raise MissingAsset(f"object {name!r}: mesh {mesh_abs}")
    if etype == ElementType.TRIANGLE:
        mesh = load_obj(mesh_abs)
    else:
        mesh = load_tet_sidecar(mesh_abs, mesh_abs + ".tets")
    mesh = lump_masses(mesh, mech.obj_mass)
    return AssetConfig(name, mesh_path, etype, transform, mech, mesh)


def load_config(scene_path: str) -> SceneConfig:
    """Parse a scene file, resolve and load its assets, apply defaults
    (gravity, maxforce, tolerance, iterations) for omitted keys."""
    if not os.path.isfile(scene_path):
        raise MissingAsset(scene_path)
    try:
        with open(scene_path, "r") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(scene_path, f"line {exc.lineno}", exc.msg) from exc
    _reject_unknown(data, _SCENE_KEYS, scene_path, "$")
    if "timestep" not in data:
        raise ParseError(scene_path, "$.timestep", "required key missing")
    lsolver = data.get("linearsolver", {"type": "SPARSE_INVERSE"})
    _reject_unknown(lsolver, {"type"}, scene_path, "$.linearsolver")
    lname = _parse_linear_solver_type(lsolver.get("type", "SPARSE_INVERSE"), scene_path)
    csolver = data.get("constraintsolver", {})
    _reject_unknown(csolver, _CSOLVER_KEYS, scene_path, "$.constraintsolver")
    ctype = csolver.get("type", "LiteNonSmoothNewton")
    metric = _parse_constraint_solver_type(ctype, scene_path)
    planes = []
    for i, p in enumerate(data.get("planecollisions", [])):
        _reject_unknown(p, _PLANE_KEYS, scene_path, f"$.planecollisions[{i}]")
        planes.append(PlaneCollider(
            np.asarray(p.get("point", (0, 0, 0)), dtype=np.float64),
            np.asarray(p.get("normal", (0, 1, 0)), dtype=np.float64),
            float(p.get("mu", 0.0)),
        ))
    base_dir = os.path.dirname(os.path.abspath(scene_path))
    objects_raw = data.get("objects", {})
    assets = [_load_asset(name, raw, base_dir) for name, raw in objects_raw.items()]
    return SceneConfig(
        timestep=float(data["timestep"]),
        gravity=np.asarray(data.get("gravity", DEFAULT_GRAVITY), dtype=np.float64),
        linearsolver_type=lname,
        constraintsolver_type=ctype,
        contact_metric=metric,
        maxforce=float(csolver.get("maxforce", DEFAULT_MAXFORCE)),
        iterations=int(csolver.get("iterations", DEFAULT_ITERATIONS)),
        tolerance=float(csolver.get("tolerance", DEFAULT_TOLERANCE)),
        plane_colliders=planes,
        assets=assets,
        objects_raw=dict(objects_raw),
        path=os.path.abspath(scene_path),
    )


def save_config(config: SceneConfig, path: str) -> None:
    """Write the scene JSON back out (asset files are referenced, not
    rewritten); reparsing from the same directory yields an equal config."""
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass
class StateSnapshot:
    """Read-only copy of one environment after the last completed step."""

    positions: np.ndarray
    velocities: np.ndarray
    contacts: list
    lam: np.ndarray


@dataclass
class _ObjectSlice:
    name: str
    vertex_offset: int
    n_vertices: int
    mesh: DeformableMesh  # transformed instance


class Session:
    """A batched simulation: one asset layout instanced across n_envs
    independent environments, advanced one timestep per ``step`` call.

    Exclusively owned while stepping; ``get_state`` snapshots are safe to
    hand elsewhere afterwards.
    """

    def __init__(self, config: SceneConfig, n_envs: int, material_scale=None,
                 local_global_iterations: int = DEFAULT_LOCAL_GLOBAL_ITERATIONS,
                 contact_margin: float = 0.02):
        if n_envs < 1:
            raise InvalidDimension(f"n_envs must be >= 1, got {n_envs}")
        if not config.assets:
            raise MissingAsset("scene has no objects")
        scales = np.ones(n_envs) if material_scale is None \
            else np.asarray(material_scale, dtype=np.float64).reshape(n_envs)
        if material_scale is not None and (scales.min() < 0.5 or scales.max() > 1.5):
            raise InvalidDimension("material scale factors must lie in [0.5, 1.5]")

        # merge objects into one DoF layout (identical across envs)
        verts, masses, layout = [], [], []
        constraints: list[ProjectiveConstraint] = []
        offset = 0
        for asset in config.assets:
            placed = apply_transform(asset.mesh, asset.transformation)
            layout.append(_ObjectSlice(asset.name, offset, placed.n_vertices, placed))
            verts.append(placed.vertices)
            masses.append(placed.vertex_masses)
            for c in build_constraints(placed, asset.mechanical):
                constraints.append(_shift_constraint(c, 3 * offset))
            offset += placed.n_vertices
        self.n_vertices = offset
        dof = 3 * offset
        x0 = np.concatenate(verts).ravel()
        vertex_masses = np.concatenate(masses)
        model = ElasticModel([_with_dof(c, dof) for c in constraints], dof)

        uniform = material_scale is None or np.all(scales == scales[0])
        if uniform:
            fact = assemble_from_masses(vertex_masses, model, config.timestep,
                                        weight_scale=float(scales[0]))
            blocks = [fact] * n_envs
        else:
            blocks = [assemble_from_masses(vertex_masses, model, config.timestep,
                                           weight_scale=float(s)) for s in scales]
        system = stack_envs(blocks, np.tile(x0, (n_envs, 1)))

        self.config = config
        self.n_envs = n_envs
        self.material_scale = scales
        self.layout = layout
        self.world = SimWorld(
            system=system,
            elastic=model,
            colliders=list(config.plane_colliders),
            effectors=[EffectorRegistry() for _ in range(n_envs)],
            gravity=config.gravity,
            contact_margin=contact_margin,
        )
        self.solver_config = config.solver_config(local_global_iterations)
        self.diagnostics: list[StepDiagnostics] = []

    @property
    def step_count(self) -> int:
        return self.world.step_count

    def _envs(self, env):
        if env is None:
            return range(self.n_envs)
        if not 0 <= env < self.n_envs:
            raise BadEnvId(f"env {env} outside [0, {self.n_envs})")
        return [env]

    def add_ee(self, name: str, pose, size, env: int = None):
        for e in self._envs(env):
            self.world.effectors[e].add_ee(name, pose, size)

    def move_ee(self, name: str, pose, env: int = None):
        for e in self._envs(env):
            self.world.effectors[e].move_ee(name, pose)

    def grasp_ee(self, name: str, close: bool = True, env: int = None):
        for e in self._envs(env):
            positions = self.world.system.x[e].reshape(-1, 3)
            self.world.effectors[e].grasp_ee(name, close, positions)

    def step(self, controls=None) -> list:
        """Advance one timestep for all environments; records and returns
        the per-env diagnostics."""
        diags = _solver.step(self.world, self.solver_config, controls)
        self.diagnostics.extend(diags)
        return diags

    def get_state(self, env_id: int) -> StateSnapshot:
        if not 0 <= env_id < self.n_envs:
            raise BadEnvId(f"env {env_id} outside [0, {self.n_envs})")
        contacts = [ _copy_contact(c) for c in self.world.last_contacts[env_id] ]
        return StateSnapshot(
            positions=self.world.system.x[env_id].reshape(-1, 3).copy(),
            velocities=self.world.system.v[env_id].reshape(-1, 3).copy(),
            contacts=contacts,
            lam=self.world.last_lambda[env_id].copy(),
        )

    def kinetic_energy(self, env_id: int) -> float:
        return _solver.kinetic_energy(self.world, env_id)

    def triangles(self, env_id: int):
        """(vertices, faces, instance_ids) for rendering one environment."""
        pts = self.world.system.x[env_id].reshape(-1, 3)
        faces, ids = [], []
        for oi, sl in enumerate(self.layout):
            tri = sl.mesh.surface_triangles() + sl.vertex_offset
            faces.append(tri)
            ids.append(np.full(len(tri), oi, dtype=np.int32))
        faces = np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64)
        ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int32)
        return pts, faces, ids

    def export_diagnostics_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# softsim-diagnostics v{_solver.DIAGNOSTICS_CSV_VERSION}\n")
            writer = csv.writer(fh)
            writer.writerow(StepDiagnostics.CSV_FIELDS)
            for d in self.diagnostics:
                writer.writerow(d.csv_row())


def read_diagnostics_csv(path: str) -> list:
    """Load an exported diagnostics table back as a list of dict rows."""
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip()
        if not header.startswith("# softsim-diagnostics"):
            raise ParseError(path, "line 1", "missing diagnostics version header")
        reader = csv.DictReader(fh)
        return [dict(row) for row in reader]


def _shift_constraint(c: ProjectiveConstraint, col_offset: int) -> ProjectiveConstraint:
    if col_offset == 0:
        return c
    G = c.G.tocoo()
    shifted = sp.csr_matrix((G.data, (G.row, G.col + col_offset)),
                            shape=(G.shape[0], G.shape[1] + col_offset))
    return ProjectiveConstraint(c.element_id, c.weight, shifted, c.kind, c.rest_target.copy())


def _with_dof(c: ProjectiveConstraint, dof: int) -> ProjectiveConstraint:
    if c.G.shape[1] == dof:
        return c
    G = c.G.tocoo()
    resized = sp.csr_matrix((G.data, (G.row, G.col)), shape=(G.shape[0], dof))
    return ProjectiveConstraint(c.element_id, c.weight, resized, c.kind, c.rest_target.copy())


def _copy_contact(c):
    out = copy.copy(c)
    out.lam = c.lam.copy()
    return out


def initialize(config: SceneConfig, n_envs: int, material_scale=None, **kwargs) -> Session:
    """Build a ready-to-step session: assets placed, constraints built,
    per-env systems factored, all environments starting identical.

    ``material_scale`` optionally supplies one stiffness scale factor in
    [0.5, 1.5] per environment (domain randomization); heterogeneous assets
    across environments are not supported.
    """
    return Session(config, n_envs, material_scale=material_scale, **kwargs)
