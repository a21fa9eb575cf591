"""Batched projective-dynamics soft-body simulation with non-smooth Newton
frictional contact, bilateral grasp constraints, and ray-cast depth rendering.

Quick start::

    from softsim import presets, initialize

    session = initialize(presets.towel_scene(drop=0.05), n_envs=4)
    for _ in range(200):
        session.step()
    state = session.get_state(0)
"""

from . import errors
from .assembly import (MultiEnvSystem, SystemFactorization, assemble_rhs,
                       assemble_system, predict_state, stack_envs)
from .contact import (BoxCollider, ContactConstraint, NewtonLinearization,
                      PlaneCollider, build_linearization, detect_contacts, eval_phi)
from .grasp import BilateralConstraint, EffectorRegistry, EndEffector
from .material import (Constitutive, ElasticModel, MaterialParams,
                       ProjectiveConstraint, build_constraints, elastic_energy,
                       internal_force, project_local)
from .mesh import (DeformableMesh, ElementType, RigidTransform, apply_transform,
                   export_obj, load_obj, lump_masses, make_grid_cloth,
                   make_single_tet, make_tee_cloth)
from .render import (AugmentationConfig, DepthCamera, DepthImage, augment,
                     depth_to_pointcloud, render_depth, write_pgm, write_xyz)
from .scene import (AssetConfig, SceneConfig, Session, StateSnapshot, initialize,
                    load_config, save_config)
from .solver import (ContactMetric, Control, DenseSolverKind, SimWorld,
                     SolverConfig, StepDiagnostics, correct_positions,
                     kinetic_energy, run_throughput_benchmark,
                     schur_complement, solve_constraint_increment, step)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "MultiEnvSystem", "SystemFactorization", "assemble_rhs", "assemble_system",
    "predict_state", "stack_envs",
    "BoxCollider", "ContactConstraint", "NewtonLinearization", "PlaneCollider",
    "build_linearization", "detect_contacts", "eval_phi",
    "BilateralConstraint", "EffectorRegistry", "EndEffector",
    "Constitutive", "ElasticModel", "MaterialParams", "ProjectiveConstraint",
    "build_constraints", "elastic_energy", "internal_force", "project_local",
    "DeformableMesh", "ElementType", "RigidTransform", "apply_transform",
    "export_obj", "load_obj", "lump_masses", "make_grid_cloth", "make_single_tet",
    "make_tee_cloth",
    "AugmentationConfig", "DepthCamera", "DepthImage", "augment",
    "depth_to_pointcloud", "render_depth", "write_pgm", "write_xyz",
    "AssetConfig", "SceneConfig", "Session", "StateSnapshot", "initialize",
    "load_config", "save_config",
    "ContactMetric", "Control", "DenseSolverKind", "SimWorld", "SolverConfig",
    "StepDiagnostics", "correct_positions", "kinetic_energy",
    "run_throughput_benchmark", "schur_complement", "solve_constraint_increment",
    "step",
    "__version__",
]
