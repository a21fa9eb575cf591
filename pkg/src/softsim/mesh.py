"""Mesh geometry: OBJ i/o, procedural generators, and rigid transforms.

Meshes are immutable after construction within a simulation step; the solver
never mutates ``vertices`` in place, it carries positions separately.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DegenerateElement,
    IndexOutOfRange,
    InvalidDimension,
    IoFailure,
    MalformedRecord,
    MissingFile,
)

__all__ = [
    "ElementType",
    "DeformableMesh",
    "RigidTransform",
    "load_obj",
    "load_tet_sidecar",
    "export_obj",
    "make_grid_cloth",
    "make_tee_cloth",
    "make_single_tet",
    "apply_transform",
    "lump_masses",
    "triangle_areas",
    "tet_volumes",
]


class ElementType(Enum):
    TRIANGLE = "TRIANGLE"
    TETRAHEDRON = "TETRAHEDRON"


@dataclass
class DeformableMesh:
    """A deformable body discretized into triangles or tetrahedra.

    Attributes:
        vertices: (n, 3) current positions in meters.
        elements: (m, 3) or (m, 4) integer connectivity.
        element_type: TRIANGLE or TETRAHEDRON, consistent with element arity.
        rest_vertices: (n, 3) rest positions (copied from vertices at load).
        vertex_masses: (n,) lumped masses in kg, all positive.
    """

    vertices: np.ndarray
    elements: np.ndarray
    element_type: ElementType
    rest_vertices: np.ndarray = field(default=None)
    vertex_masses: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        arity = 3 if self.element_type == ElementType.TRIANGLE else 4
        self.elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, arity)
        if self.rest_vertices is None:
            self.rest_vertices = self.vertices.copy()
        else:
            self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64).reshape(-1, 3)
        if self.vertex_masses is None:
            n = len(self.vertices)
            self.vertex_masses = np.full(n, 1.0 / max(n, 1))
        else:
            self.vertex_masses = np.asarray(self.vertex_masses, dtype=np.float64).ravel()
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def validate(self):
        n = self.n_vertices
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise IndexOutOfRange(
                f"element index range [{self.elements.min()}, {self.elements.max()}] "
                f"invalid for {n} vertices"
            )
        if self.vertex_masses.shape != (n,):
            raise InvalidDimension("vertex_masses length must match vertex count")
        if n and np.any(self.vertex_masses <= 0):
            raise InvalidDimension("all vertex masses must be positive")
        measures = self.rest_measures()
        bad = np.nonzero(measures <= 0)[0]
        if bad.size:
            raise DegenerateElement(int(bad[0]), "zero rest area/volume")

    def rest_measures(self) -> np.ndarray:
        """Per-element rest area (triangles) or volume (tetrahedra)."""
        if self.element_type == ElementType.TRIANGLE:
            return triangle_areas(self.rest_vertices, self.elements)
        return tet_volumes(self.rest_vertices, self.elements)

    def surface_triangles(self) -> np.ndarray:
        """Triangles suitable for rendering: elements themselves, or the
        boundary faces of a tetrahedral mesh (faces used by exactly one tet)."""
        if self.element_type == ElementType.TRIANGLE:
            return self.elements
        faces = {}
        local = [(0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2)]
        for tet in self.elements:
            for a, b, c in local:
                tri = (int(tet[a]), int(tet[b]), int(tet[c]))
                key = tuple(sorted(tri))
                if key in faces:
                    del faces[key]
                else:
                    faces[key] = tri
        if not faces:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(faces.values()), dtype=np.int64)

    def copy(self) -> "DeformableMesh":
        return DeformableMesh(
            self.vertices.copy(),
            self.elements.copy(),
            self.element_type,
            self.rest_vertices.copy(),
            self.vertex_masses.copy(),
        )


@dataclass
class RigidTransform:
    """Translation plus intrinsic ZYX Euler rotation (applied as Rz @ Ry @ Rx)."""

    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)

    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        cx, sx = np.cos(rx), np.sin(rx)
        cy, sy = np.cos(ry), np.sin(ry)
        cz, sz = np.cos(rz), np.sin(rz)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return Rz @ Ry @ Rx

    def is_identity(self) -> bool:
        return not self.trans.any() and not self.rotation.any()

    def apply(self, points: np.ndarray) -> np.ndarray:
        if self.is_identity():
            return np.array(points, dtype=np.float64, copy=True)
        return points @ self.matrix().T + self.trans


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    if triangles.size == 0:
        return np.zeros(0)
    p = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    if tets.size == 0:
        return np.zeros(0)
    p = vertices[tets]
    e = p[:, 1:] - p[:, :1]
    return np.einsum("ij,ij->i", np.cross(e[:, 0], e[:, 1]), e[:, 2]) / 6.0


def load_obj(path: str) -> DeformableMesh:
    """Load a Wavefront OBJ subset: ``v x y z`` and ``f i j k [l]`` records.

    Faces are 1-indexed; ``f i/…`` forms are accepted and only the vertex
    index is used. Quads are fan-triangulated from their first vertex;
    polygons with more than 4 vertices are rejected.
    """
    if not os.path.isfile(path):
        raise MissingFile(path)
    verts = []
    tris = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MalformedRecord(f"vertex record needs 3 coordinates: {line!r}", lineno)
                try:
                    verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
                except ValueError as exc:
                    raise MalformedRecord(f"bad vertex coordinate: {line!r}", lineno) from exc
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    head = t.split("/")[0]
                    try:
                        idx.append(int(head))
                    except ValueError as exc:
                        raise MalformedRecord(f"bad face index: {line!r}", lineno) from exc
                if len(idx) < 3:
                    raise MalformedRecord(f"face needs at least 3 vertices: {line!r}", lineno)
                if len(idx) > 4:
                    raise MalformedRecord(f"only triangles and quads supported: {line!r}", lineno)
                for k in idx:
                    if k < 1:
                        raise IndexOutOfRange(f"line {lineno}: OBJ indices are 1-based, got {k}")
                idx = [k - 1 for k in idx]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
            # other record types (vn, vt, o, g, s, mtllib, usemtl) are ignored
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    tris = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if tris.size and tris.max() >= len(verts):
        raise IndexOutOfRange(
            f"face references vertex {tris.max() + 1} but only {len(verts)} vertices exist"
        )
    return DeformableMesh(verts, tris, ElementType.TRIANGLE)


def load_tet_sidecar(obj_path: str, tet_path: str) -> DeformableMesh:
    """Load a tetrahedral mesh from an OBJ (vertices) plus a sidecar element
    list with one ``t i j k l`` record per tet (1-indexed, like OBJ faces)."""
    surface = load_obj(obj_path)
    if not os.path.isfile(tet_path):
        raise MissingFile(tet_path)
    tets = []
    with open(tet_path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] != "t" or len(tok) != 5:
                raise MalformedRecord(f"expected 't i j k l': {line!r}", lineno)
            try:
                idx = [int(t) for t in tok[1:]]
            except ValueError as exc:
                raise MalformedRecord(f"bad tet index: {line!r}", lineno) from exc
            if any(k < 1 or k > surface.n_vertices for k in idx):
                raise IndexOutOfRange(f"line {lineno}: tet index outside 1..{surface.n_vertices}")
            tets.append([k - 1 for k in idx])
    return DeformableMesh(surface.vertices, np.array(tets, dtype=np.int64), ElementType.TETRAHEDRON)


def export_obj(mesh: DeformableMesh, path: str) -> None:
    """Write vertices and faces as OBJ; tetrahedral meshes export their
    boundary faces. Round-trips through load_obj to 1e-6 m."""
    faces = mesh.surface_triangles()
    try:
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.10g} {v[1]:.10g} {v[2]:.10g}\n")
            for f in faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def make_grid_cloth(nx: int, ny: int, size: float) -> DeformableMesh:
    """Planar cloth grid in the XZ plane (y = 0) spanning size x size meters.

    nx * ny vertices, 2 (nx-1)(ny-1) triangles, uniform vertex masses
    totalling 1 kg (reassigned by lump_masses once the asset mass is known).
    """
    if nx < 2 or ny < 2:
        raise InvalidDimension(f"grid needs nx, ny >= 2, got ({nx}, {ny})")
    if size <= 0:
        raise InvalidDimension(f"grid size must be positive, got {size}")
    xs = np.linspace(0.0, size, nx)
    zs = np.linspace(0.0, size, ny)
    verts = np.zeros((nx * ny, 3))
    verts[:, 0] = np.repeat(xs, ny)
    verts[:, 2] = np.tile(zs, nx)
    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            v00 = i * ny + j
            v01 = v00 + 1
            v10 = v00 + ny
            v11 = v10 + 1
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    masses = np.full(nx * ny, 1.0 / (nx * ny))
    return DeformableMesh(verts, np.array(tris), ElementType.TRIANGLE, vertex_masses=masses)


def make_tee_cloth(body_width: float = 0.2, body_height: float = 0.3,
                   sleeve_length: float = 0.08, sleeve_height: float = 0.08,
                   spacing: float = 0.02) -> DeformableMesh:
    """T-shaped cloth panel in the XZ plane: a body rectangle with two sleeve
    rectangles attached at the top corners. Used by the garment-fold demos."""
    if min(body_width, body_height, sleeve_length, sleeve_height, spacing) <= 0:
        raise InvalidDimension("all tee dimensions must be positive")
    nsx = max(2, round(sleeve_length / spacing) + 1)
    nbx = max(2, round(body_width / spacing) + 1)
    nbz = max(2, round(body_height / spacing) + 1)
    nsz = max(2, round(sleeve_height / spacing) + 1)
    # grid of cells covering sleeve|body|sleeve; mask cells outside the T
    nx = (nsx - 1) + (nbx - 1) + (nsx - 1) + 1
    nz = nbz
    dx = (2 * sleeve_length + body_width) / (nx - 1)
    dz = body_height / (nz - 1)
    inside = np.zeros((nx - 1, nz - 1), dtype=bool)
    inside[nsx - 1:nsx - 1 + nbx - 1, :] = True  # body column
    inside[:, nz - nsz:] = True                  # sleeve band at top
    vid = -np.ones((nx, nz), dtype=np.int64)
    verts = []
    tris = []
    for i in range(nx - 1):
        for j in range(nz - 1):
            if not inside[i, j]:
                continue
            for (a, b) in ((i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)):
                if vid[a, b] < 0:
                    vid[a, b] = len(verts)
                    verts.append([a * dx, 0.0, b * dz])
            v00, v10 = vid[i, j], vid[i + 1, j]
            v01, v11 = vid[i, j + 1], vid[i + 1, j + 1]
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    verts = np.array(verts)
    masses = np.full(len(verts), 1.0 / len(verts))
    return DeformableMesh(verts, np.array(tris), ElementType.TRIANGLE, vertex_masses=masses)


def make_single_tet(scale: float = 1.0) -> DeformableMesh:
    """One regular-ish tetrahedron, handy for volumetric tests."""
    verts = scale * np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    return DeformableMesh(verts, np.array([[0, 1, 2, 3]]), ElementType.TETRAHEDRON)


def apply_transform(mesh: DeformableMesh, t: RigidTransform) -> DeformableMesh:
    """Rotate (ZYX) then translate the current vertices; the rest state is
    left untouched, so rigidly placed assets stay in elastic equilibrium."""
    return DeformableMesh(
        t.apply(mesh.vertices),
        mesh.elements.copy(),
        mesh.element_type,
        mesh.rest_vertices.copy(),
        mesh.vertex_masses.copy(),
    )


def lump_masses(mesh: DeformableMesh, obj_mass: float) -> DeformableMesh:
    """Distribute obj_mass to vertices proportionally to adjacent rest
    element area/volume (standard lumped mass). Returns a new mesh."""
    if obj_mass <= 0:
        raise InvalidDimension(f"obj_mass must be positive, got {obj_mass}")
    measures = mesh.rest_measures()
    share = np.zeros(mesh.n_vertices)
    arity = mesh.elements.shape[1]
    for col in range(arity):
        np.add.at(share, mesh.elements[:, col], measures / arity)
    if not share.all():
        # isolated vertices get an equal share of the smallest element
        share[share == 0] = measures.min() / arity if measures.size else 1.0
    masses = obj_mass * share / share.sum()
    out = mesh.copy()
    out.vertex_masses = masses
    return out
