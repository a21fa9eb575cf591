"""Constitutive models: elastic energies, projective constraint weights,
mapping operators, and the local proximal projection.

Each element contributes a quadratic proximal term ``w/2 ||p - G x||^2`` whose
auxiliary state ``p`` is projected onto the constitutive manifold:

* ARAP (triangles / tets): ``p`` is the rotation (or tangent frame for
  surface elements) closest to the element deformation gradient ``G x``.
* Quadratic bending (interior edges): ``p`` is the rest value of the
  cotangent edge stencil, which is the zero vector for flat rest states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateElement, InvalidDimension, NumericalBreakdown
from .mesh import DeformableMesh, ElementType

__all__ = [
    "Constitutive",
    "ConstraintKind",
    "MaterialParams",
    "ProjectiveConstraint",
    "ElasticModel",
    "build_constraints",
    "project_local",
    "internal_force",
    "elastic_energy",
]


class Constitutive(Enum):
    TRI_ARAP = "TRI_ARAP"
    TET_ARAP = "TET_ARAP"


class ConstraintKind(Enum):
    ARAP = "ARAP"
    BENDING = "BENDING"


@dataclass
class MaterialParams:
    """Mechanical properties of one deformable object."""

    young: float = 3.0e4
    poisson: float = 0.4
    bending: float = 0.2
    constitutive: Constitutive = Constitutive.TRI_ARAP
    obj_mass: float = 1.0

    def __post_init__(self):
        if isinstance(self.constitutive, str):
            self.constitutive = Constitutive(self.constitutive)
        if self.young <= 0:
            raise InvalidDimension(f"young must be positive, got {self.young}")
        if not 0.0 <= self.poisson < 0.5:
            raise InvalidDimension(f"poisson must be in [0, 0.5), got {self.poisson}")
        if self.bending < 0:
            raise InvalidDimension(f"bending must be nonnegative, got {self.bending}")
        if self.obj_mass <= 0:
            raise InvalidDimension(f"obj_mass must be positive, got {self.obj_mass}")

    @property
    def shear_modulus(self) -> float:
        return self.young / (2.0 * (1.0 + self.poisson))


@dataclass
class ProjectiveConstraint:
    """One projective element: weight, mapping operator, and kind.

    ``G`` maps the flat DoF vector (3n, interleaved xyz) into projection
    space: 6 rows for a surface deformation gradient (3x2, row-major),
    9 rows for a volumetric one (3x3), 3 rows for a bending stencil.
    ``rest_target`` is the projection-space value at rest, used as the
    bending manifold point (zero for flat rest stencils).
    """

    element_id: int
    weight: float
    G: sp.csr_matrix
    kind: ConstraintKind
    rest_target: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weight < 0:
            raise InvalidDimension("constraint weight must be nonnegative")
        if self.rest_target is None:
            self.rest_target = np.zeros(self.G.shape[0])


def _flat(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.ravel() if x.ndim > 1 else x


def _tri_gradient_rows(rest: np.ndarray, tri: np.ndarray, dof: int, eid: int) -> sp.csr_matrix:
    """Mapping from positions to the 3x2 surface deformation gradient,
    expressed against the rest triangle's orthonormal tangent frame."""
    x0, x1, x2 = rest[tri]
    e1, e2 = x1 - x0, x2 - x0
    n1 = np.linalg.norm(e1)
    if n1 == 0:
        raise DegenerateElement(eid, "zero-length edge")
    t1 = e1 / n1
    e2p = e2 - (e2 @ t1) * t1
    n2 = np.linalg.norm(e2p)
    if n2 == 0:
        raise DegenerateElement(eid, "collinear triangle")
    t2 = e2p / n2
    dm = np.array([[e1 @ t1, e2 @ t1], [0.0, e2 @ t2]])
    B = np.linalg.inv(dm)
    rows, cols, vals = [], [], []
    for r in range(3):
        for c in range(2):
            row = 2 * r + c
            rows += [row, row, row]
            cols += [3 * tri[1] + r, 3 * tri[2] + r, 3 * tri[0] + r]
            vals += [B[0, c], B[1, c], -B[0, c] - B[1, c]]
    return sp.csr_matrix((vals, (rows, cols)), shape=(6, dof))


def _tet_gradient_rows(rest: np.ndarray, tet: np.ndarray, dof: int, eid: int) -> sp.csr_matrix:
    x = rest[tet]
    dm = np.column_stack([x[1] - x[0], x[2] - x[0], x[3] - x[0]])
    if abs(np.linalg.det(dm)) < 1e-300:
        raise DegenerateElement(eid, "flat tetrahedron")
    B = np.linalg.inv(dm)
    rows, cols, vals = [], [], []
    for r in range(3):
        for c in range(3):
            row = 3 * r + c
            col0 = -B[:, c].sum()
            rows += [row] * 4
            cols += [3 * tet[0] + r, 3 * tet[1] + r, 3 * tet[2] + r, 3 * tet[3] + r]
            vals += [col0, B[0, c], B[1, c], B[2, c]]
    return sp.csr_matrix((vals, (rows, cols)), shape=(9, dof))


def _cot(a: np.ndarray, b: np.ndarray) -> float:
    """Cotangent of the angle between vectors a and b."""
    cross = np.linalg.norm(np.cross(a, b))
    if cross == 0:
        raise DegenerateElement(-1, "degenerate bending stencil")
    return float(a @ b) / cross


def _bending_rows(rest: np.ndarray, stencil: tuple, dof: int) -> tuple:
    """Cotangent-weight stencil for one interior edge (v0, v1, flap_a, flap_b).

    Returns (G, weights k); the stencil annihilates affine maps of a planar
    rest configuration, so flat cloth is force-free under any rigid motion.
    """
    v0, v1, va, vb = stencil
    p0, p1, pa, pb = rest[v0], rest[v1], rest[va], rest[vb]
    L = np.linalg.norm(p1 - p0)
    cot_a0 = _cot(p1 - p0, pa - p0)   # angle at v0 in triangle (v0, v1, va)
    cot_a1 = _cot(p0 - p1, pa - p1)   # angle at v1 in same triangle
    cot_b0 = _cot(p1 - p0, pb - p0)
    cot_b1 = _cot(p0 - p1, pb - p1)
    k = np.array([
        -(cot_a1 + cot_b1),
        -(cot_a0 + cot_b0),
        cot_a0 + cot_a1,
        cot_b0 + cot_b1,
    ]) / L
    verts = [v0, v1, va, vb]
    rows, cols, vals = [], [], []
    for axis in range(3):
        for kv, v in zip(k, verts):
            rows.append(axis)
            cols.append(3 * v + axis)
            vals.append(kv)
    return sp.csr_matrix((vals, (rows, cols)), shape=(3, dof)), k


def _interior_edges(elements: np.ndarray) -> list:
    """(v0, v1, flap_a, flap_b) for every edge shared by exactly two
    triangles, in sorted edge order for determinism."""
    opp = {}
    for tri in elements:
        for i in range(3):
            a, b = int(tri[i]), int(tri[(i + 1) % 3])
            c = int(tri[(i + 2) % 3])
            opp.setdefault((min(a, b), max(a, b)), []).append(c)
    out = []
    for (a, b) in sorted(opp):
        flaps = opp[(a, b)]
        if len(flaps) == 2:
            out.append((a, b, min(flaps), max(flaps)))
    return out


def build_constraints(mesh: DeformableMesh, params: MaterialParams) -> list:
    """One ARAP constraint per element plus one quadratic-bending constraint
    per interior edge of triangle meshes.

    ARAP weight is shear_modulus * rest measure; bending weight is the
    ``bending`` knob times the rest flap area (A1 + A2) / 3.
    """
    if mesh.element_type == ElementType.TRIANGLE and params.constitutive != Constitutive.TRI_ARAP:
        raise InvalidDimension("triangle mesh requires TRI_ARAP constitutive")
    if mesh.element_type == ElementType.TETRAHEDRON and params.constitutive != Constitutive.TET_ARAP:
        raise InvalidDimension("tetrahedral mesh requires TET_ARAP constitutive")
    dof = 3 * mesh.n_vertices
    rest = mesh.rest_vertices
    measures = mesh.rest_measures()
    mu = params.shear_modulus
    out = []
    for eid, elem in enumerate(mesh.elements):
        if measures[eid] <= 0:
            raise DegenerateElement(eid, "zero rest measure")
        if mesh.element_type == ElementType.TRIANGLE:
            G = _tri_gradient_rows(rest, elem, dof, eid)
        else:
            G = _tet_gradient_rows(rest, elem, dof, eid)
        out.append(ProjectiveConstraint(eid, mu * measures[eid], G, ConstraintKind.ARAP))
    if mesh.element_type == ElementType.TRIANGLE and params.bending > 0:
        areas = measures
        tri_of_edge = {}
        for t, tri in enumerate(mesh.elements):
            for i in range(3):
                a, b = int(tri[i]), int(tri[(i + 1) % 3])
                tri_of_edge.setdefault((min(a, b), max(a, b)), []).append(t)
        for eid, stencil in enumerate(_interior_edges(mesh.elements)):
            G, _ = _bending_rows(rest, stencil, dof)
            flap_area = sum(areas[t] for t in tri_of_edge[(stencil[0], stencil[1])])
            w = params.bending * flap_area / 3.0
            target = G @ rest.ravel()
            out.append(ProjectiveConstraint(eid, w, G, ConstraintKind.BENDING, target))
    return out


def _project_arap(F: np.ndarray) -> np.ndarray:
    """Closest rotation (3x3) or tangent frame (3x2) to F, via SVD with a
    reflection fix on the smallest singular direction for volumetric F."""
    try:
        U, _, Vt = np.linalg.svd(F, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"SVD failed on deformation gradient: {exc}") from exc
    R = U @ Vt
    if F.shape[1] == 3 and np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] *= -1
        R = U @ Vt
    return R


def project_local(constraint: ProjectiveConstraint, x: np.ndarray) -> np.ndarray:
    """Minimize the proximal objective over the constitutive manifold for one
    constraint at positions x (flat (3n,) or (n, 3))."""
    xf = _flat(x)
    gx = constraint.G @ xf
    if constraint.kind == ConstraintKind.BENDING:
        return constraint.rest_target.copy()
    cols = 2 if gx.shape[0] == 6 else 3
    return _project_arap(gx.reshape(3, cols)).ravel()


class ElasticModel:
    """Stacked projective constraints with batched local projection.

    Rows are laid out constraint-by-constraint in the order produced by
    build_constraints. Per-environment material randomization scales all
    weights uniformly through ``weight_scale`` arguments.
    """

    def __init__(self, constraints: list, dof: int):
        self.constraints = list(constraints)
        self.dof = dof
        if self.constraints:
            self.G = sp.vstack([c.G for c in self.constraints], format="csr")
        else:
            self.G = sp.csr_matrix((0, dof))
        self.rows = self.G.shape[0]
        w = []
        rest_p = []
        arap6, arap9, bend = [], [], []
        start = 0
        for c in self.constraints:
            r = c.G.shape[0]
            w.append(np.full(r, c.weight))
            rest_p.append(c.rest_target)
            if c.kind == ConstraintKind.ARAP and r == 6:
                arap6.append(start)
            elif c.kind == ConstraintKind.ARAP:
                arap9.append(start)
            else:
                bend.append(start)
            start += r
        self.w_rows = np.concatenate(w) if w else np.zeros(0)
        self.rest_p = np.concatenate(rest_p) if rest_p else np.zeros(0)
        self._arap6 = np.array(arap6, dtype=np.int64)
        self._arap9 = np.array(arap9, dtype=np.int64)
        self._bend = np.array(bend, dtype=np.int64)
        self._rows6 = (self._arap6[:, None] + np.arange(6)[None, :]).ravel()
        self._rows9 = (self._arap9[:, None] + np.arange(9)[None, :]).ravel()
        self._rows_bend = (self._bend[:, None] + np.arange(3)[None, :]).ravel()

    def project(self, x: np.ndarray) -> np.ndarray:
        """Batched local projection of all constraints at positions x."""
        gx = self.G @ _flat(x)
        p = np.empty_like(gx)
        if self._arap6.size:
            F = gx[self._rows6].reshape(-1, 3, 2)
            U, _, Vt = np.linalg.svd(F, full_matrices=False)
            p[self._rows6] = (U @ Vt).reshape(-1)
        if self._arap9.size:
            F = gx[self._rows9].reshape(-1, 3, 3)
            U, _, Vt = np.linalg.svd(F, full_matrices=False)
            R = U @ Vt
            flip = np.linalg.det(R) < 0
            if flip.any():
                U[flip, :, -1] *= -1
                R = U @ Vt
            p[self._rows9] = R.reshape(-1)
        if self._bend.size:
            p[self._rows_bend] = self.rest_p[self._rows_bend]
        return p

    def internal_force(self, x: np.ndarray, weight_scale: float = 1.0) -> np.ndarray:
        """f = sum_i w_i G_i^T (p_i - G_i x), flat (3n,)."""
        xf = _flat(x)
        p = self.project(xf)
        return weight_scale * (self.G.T @ (self.w_rows * (p - self.G @ xf)))

    def energy(self, x: np.ndarray, weight_scale: float = 1.0) -> float:
        """Total proximal elastic energy at x (projections re-minimized)."""
        xf = _flat(x)
        d = self.project(xf) - self.G @ xf
        return 0.5 * weight_scale * float(self.w_rows @ (d * d))


def internal_force(constraints, x: np.ndarray) -> np.ndarray:
    """Elastic force for a constraint list or an ElasticModel; zero at rest."""
    if isinstance(constraints, ElasticModel):
        return constraints.internal_force(x)
    dof = _flat(x).shape[0]
    return ElasticModel(constraints, dof).internal_force(x)


def elastic_energy(constraints, x: np.ndarray) -> float:
    if isinstance(constraints, ElasticModel):
        return constraints.energy(x)
    dof = _flat(x).shape[0]
    return ElasticModel(constraints, dof).energy(x)
