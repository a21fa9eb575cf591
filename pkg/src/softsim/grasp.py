"""Virtual end effectors and bilateral attachment constraints.

A closed effector locks every vertex inside its box to the effector pose via
an equality constraint per vertex (a zero-length rigid link with a per-vertex
anchor offset, so the grasped patch keeps its local shape). Opening the
effector drops the rows and restores the vertices' free dynamics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateName, UnknownEffector

__all__ = ["BilateralConstraint", "EndEffector", "EffectorRegistry"]

log = logging.getLogger(__name__)


@dataclass
class BilateralConstraint:
    """Equality row set: vertex position equals target (identity Jacobian,
    zero compliance block)."""

    vertex_id: int
    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)


@dataclass
class EndEffector:
    name: str
    pose: np.ndarray
    size: np.ndarray
    closed: bool = False
    grasp: dict = field(default_factory=dict)  # vertex_id -> grasp-time offset

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)

    @property
    def grasp_set(self) -> set:
        return set(self.grasp)


class EffectorRegistry:
    """Per-environment effector table. Mutated only between solver steps."""

    def __init__(self):
        self.effectors: dict[str, EndEffector] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.effectors

    def __getitem__(self, name: str) -> EndEffector:
        if name not in self.effectors:
            raise UnknownEffector(name)
        return self.effectors[name]

    def add_ee(self, name: str, pose, size) -> EndEffector:
        if name in self.effectors:
            raise DuplicateName(name)
        ee = EndEffector(name, np.asarray(pose, dtype=np.float64),
                         np.asarray(size, dtype=np.float64))
        self.effectors[name] = ee
        return ee

    def move_ee(self, name: str, pose) -> None:
        self[name].pose = np.asarray(pose, dtype=np.float64).reshape(3)

    def grasp_ee(self, name: str, close: bool, positions) -> int:
        """Close onto vertices inside the effector box (pose +/- size), or
        open and clear the grasp set. Returns the number of grasped vertices.

        A vertex already held by another effector is skipped (first grasp
        wins); an empty box is a valid missed grasp.
        """
        ee = self[name]
        if not close:
            ee.grasp = {}
            ee.closed = False
            return 0
        pts = np.asarray(getattr(positions, "vertices", positions), dtype=np.float64).reshape(-1, 3)
        taken = set()
        for other in self.effectors.values():
            if other.name != name:
                taken |= other.grasp_set
        inside = np.nonzero(np.all(np.abs(pts - ee.pose) <= ee.size, axis=1))[0]
        ee.grasp = {}
        for v in inside:
            v = int(v)
            if v in taken:
                log.warning("effector %r skipped vertex %d already grasped", name, v)
                continue
            ee.grasp[v] = pts[v] - ee.pose
        ee.closed = True
        return len(ee.grasp)

    def emit_bilateral_rows(self) -> list:
        """One 3-row identity constraint per grasped vertex, in effector
        insertion order then ascending vertex id (deterministic)."""
        rows = []
        for ee in self.effectors.values():
            if not ee.closed:
                continue
            for v in sorted(ee.grasp):
                rows.append(BilateralConstraint(v, ee.pose + ee.grasp[v]))
        return rows

    def copy(self) -> "EffectorRegistry":
        out = EffectorRegistry()
        for ee in self.effectors.values():
            clone = EndEffector(ee.name, ee.pose.copy(), ee.size.copy(), ee.closed,
                                {v: off.copy() for v, off in ee.grasp.items()})
            out.effectors[ee.name] = clone
        return out
