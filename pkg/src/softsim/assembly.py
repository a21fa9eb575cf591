"""Global system assembly: mass matrix, SPD system matrix, sparse Cholesky
factor, its explicit sparse inverse, and block-diagonal multi-env stacking.

The system matrix A = M + h^2 sum_i w_i G_i^T G_i is assembled and factored
once before the simulation loop. Solves are expressed as two sparse products
with S = L^{-1}: x = P^T S^T S P g, where P is a fill-reducing permutation.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg  # noqa: F401  (sp.linalg access)

from .errors import HeterogeneousTimestep, InvalidDimension, NotPositiveDefinite
from .material import ElasticModel
from .mesh import DeformableMesh

__all__ = [
    "SystemFactorization",
    "MultiEnvSystem",
    "assemble_system",
    "assemble_from_masses",
    "assemble_rhs",
    "stack_envs",
    "predict_state",
    "gravity_force",
    "min_degree_order",
]

PIN_MASS_FACTOR = 1.0e10


def min_degree_order(adjacency: list) -> np.ndarray:
    """Greedy minimum-degree elimination order on an undirected graph given
    as a list of neighbor sets. Ties break on the lowest node index."""
    n = len(adjacency)
    adj = [set(a) - {i} for i, a in enumerate(adjacency)]
    heap = [(len(adj[i]), i) for i in range(n)]
    heapq.heapify(heap)
    eliminated = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if eliminated[v] or deg != len(adj[v]):
            continue
        eliminated[v] = True
        order.append(v)
        nbrs = [u for u in adj[v] if not eliminated[u]]
        for u in nbrs:
            adj[u].discard(v)
        for i, u in enumerate(nbrs):
            others = nbrs[i + 1:]
            adj[u].update(others)
            for w in others:
                adj[w].add(u)
        for u in nbrs:
            heapq.heappush(heap, (len(adj[u]), u))
    return np.array(order, dtype=np.int64)


def _vertex_adjacency(n_vertices: int, G: sp.csr_matrix) -> list:
    """Vertex graph induced by the elastic stencils (pattern of G^T G)."""
    adj = [set() for _ in range(n_vertices)]
    Gc = G.tocsr()
    for r in range(Gc.shape[0]):
        verts = np.unique(Gc.indices[Gc.indptr[r]:Gc.indptr[r + 1]] // 3)
        for a in verts:
            adj[a].update(int(b) for b in verts if b != a)
    return adj


@dataclass
class SystemFactorization:
    """Factored global operator for one environment.

    ``M`` is the (possibly pin-augmented) diagonal mass per DoF, ``A`` the
    SPD system matrix in original ordering, ``L`` the sparse Cholesky factor
    of the permuted matrix A[perm][:, perm], and ``S = L^{-1}`` its explicit
    sparse inverse (exact, no drop tolerance).
    """

    M: np.ndarray
    mass_physical: np.ndarray
    A: sp.csr_matrix
    L: sp.csr_matrix
    S: sp.csr_matrix
    perm: np.ndarray
    h: float
    Gw_T: sp.csr_matrix
    pinned: tuple = ()
    weight_scale: float = 1.0
    _iperm: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._iperm is None:
            self._iperm = np.empty_like(self.perm)
            self._iperm[self.perm] = np.arange(len(self.perm))

    @property
    def dof(self) -> int:
        return self.A.shape[0]

    def permuted_A(self) -> sp.csr_matrix:
        return self.A[self.perm, :][:, self.perm].tocsr()

    def apply_inverse(self, g: np.ndarray) -> np.ndarray:
        """x = A^{-1} g via the explicit sparse inverse: P^T S^T (S (P g))."""
        gp = g[self.perm]
        xp = self.S.T @ (self.S @ gp)
        return xp[self._iperm]

    def apply_inverse_matrix(self, B: sp.spmatrix) -> np.ndarray:
        """A^{-1} B for a sparse matrix of columns, dense result."""
        Bp = B.tocsr()[self.perm, :]
        X = self.S.T @ (self.S @ Bp)
        return np.asarray(X.todense())[self._iperm, :]

    def solve_direct(self, g: np.ndarray) -> np.ndarray:
        """Reference solve via a forward/backward triangular pair (oracle
        path; the production path is apply_inverse)."""
        gp = g[self.perm]
        y = sp.linalg.spsolve_triangular(self.L.tocsr(), gp, lower=True)
        xp = sp.linalg.spsolve_triangular(self.L.T.tocsr(), y, lower=False)
        return xp[self._iperm]

    def predict_state(self, x: np.ndarray, v: np.ndarray, f_ext: np.ndarray) -> np.ndarray:
        return predict_state(x, v, f_ext, self.h, self.M)

    def fill_stats(self) -> dict:
        return {
            "dof": self.dof,
            "nnz_A": int(self.A.nnz),
            "nnz_L": int(self.L.nnz),
            "nnz_S": int(self.S.nnz),
            "fill_S_over_L": float(self.S.nnz) / max(self.L.nnz, 1),
        }


def assemble_system(mesh: DeformableMesh, constraints, h: float,
                    pinned=(), weight_scale: float = 1.0) -> SystemFactorization:
    """Assemble and factor A = M + h^2 sum w_i G_i^T G_i for one mesh.

    ``constraints`` is a list of ProjectiveConstraint or an ElasticModel.
    Pinned vertices are handled by mass augmentation (huge mass), which keeps
    the sparsity pattern fixed across steps. Raises NotPositiveDefinite for
    degenerate meshes or nonpositive masses.
    """
    dof = 3 * mesh.n_vertices
    model = constraints if isinstance(constraints, ElasticModel) else ElasticModel(constraints, dof)
    if model.dof != dof:
        raise InvalidDimension("constraint operator size does not match mesh")
    return assemble_from_masses(mesh.vertex_masses, model, h, pinned=pinned,
                                weight_scale=weight_scale)


def assemble_from_masses(vertex_masses: np.ndarray, model: ElasticModel, h: float,
                         pinned=(), weight_scale: float = 1.0) -> SystemFactorization:
    """assemble_system working from lumped vertex masses plus a stacked
    constraint model (the path used for merged multi-object scenes)."""
    if h < 0:
        raise InvalidDimension(f"timestep must be nonnegative, got {h}")
    mass_v = np.asarray(vertex_masses, dtype=np.float64).copy()
    if 3 * mass_v.shape[0] != model.dof:
        raise InvalidDimension("mass vector does not match constraint operator size")
    if np.any(mass_v <= 0):
        raise NotPositiveDefinite("vertex masses must be positive")
    mass_physical = np.repeat(mass_v, 3)
    mass_aug = mass_v.copy()
    pinned = tuple(sorted(set(int(p) for p in pinned)))
    for p in pinned:
        mass_aug[p] *= PIN_MASS_FACTOR
    M = np.repeat(mass_aug, 3)

    dof = model.dof
    w = model.w_rows * weight_scale
    Gw = sp.diags(w) @ model.G
    A = (sp.diags(M) + (h * h) * (model.G.T @ Gw)).tocsr()
    A.sum_duplicates()

    perm_v = min_degree_order(_vertex_adjacency(mass_v.shape[0], model.G))
    perm = (3 * perm_v[:, None] + np.arange(3)[None, :]).ravel()
    Ap = A[perm, :][:, perm].toarray()
    try:
        L = np.linalg.cholesky(Ap)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky failed: {exc}") from exc
    # dense kernels on the permuted matrix produce exact zeros at structural
    # zeros, so sparsifying afterwards equals a drop-tolerance-0 sparse path
    S = scipy.linalg.solve_triangular(L, np.eye(dof), lower=True)
    return SystemFactorization(
        M=M,
        mass_physical=mass_physical,
        A=A,
        L=sp.csr_matrix(L),
        S=sp.csr_matrix(S),
        perm=perm,
        h=h,
        Gw_T=Gw.T.tocsr(),
        pinned=pinned,
        weight_scale=weight_scale,
    )


def predict_state(x: np.ndarray, v: np.ndarray, f_ext: np.ndarray,
                  h: float, masses: np.ndarray) -> np.ndarray:
    """y = x + h v + h^2 M^{-1} f_ext (all flat per-DoF vectors)."""
    return x + h * v + (h * h) * (f_ext / masses)


def assemble_rhs(fact: SystemFactorization, y: np.ndarray, projections: np.ndarray) -> np.ndarray:
    """b = M y + h^2 sum_i w_i G_i^T p_i with the stacked projection vector."""
    return fact.M * y + (fact.h * fact.h) * (fact.Gw_T @ projections)


def gravity_force(mass_physical: np.ndarray, gravity: np.ndarray) -> np.ndarray:
    """Per-DoF external force for a uniform acceleration field."""
    n = mass_physical.shape[0] // 3
    return mass_physical * np.tile(np.asarray(gravity, dtype=np.float64), n)


@dataclass
class MultiEnvSystem:
    """Block-diagonal batch of environments sharing one asset layout.

    ``blocks`` holds the per-env factorizations (shared objects when the
    environments are identical); ``x``, ``v``, ``y`` are (n_envs, dof) row
    slices of the stacked state. No operator couples two environments.
    """

    blocks: list
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray

    @property
    def n_envs(self) -> int:
        return len(self.blocks)

    @property
    def dof(self) -> int:
        return self.blocks[0].dof

    @property
    def h(self) -> float:
        return self.blocks[0].h

    def stacked_matrix(self) -> sp.csr_matrix:
        return sp.block_diag([b.A for b in self.blocks], format="csr")

    def stacked_x(self) -> np.ndarray:
        return self.x.ravel()

    def apply_inverse(self, g: np.ndarray) -> np.ndarray:
        """Per-block A^{-1} applied to (n_envs, dof) right-hand sides;
        equals the stacked block-diagonal solve."""
        out = np.empty_like(g)
        for e, b in enumerate(self.blocks):
            out[e] = b.apply_inverse(g[e])
        return out


def stack_envs(systems: list, x0: np.ndarray = None) -> MultiEnvSystem:
    """Stack per-env factorizations into one block-diagonal system."""
    if not systems:
        raise InvalidDimension("need at least one environment")
    h = systems[0].h
    dof = systems[0].dof
    for s in systems[1:]:
        if s.h != h:
            raise HeterogeneousTimestep(f"blocks mix timesteps {h} and {s.h}")
        if s.dof != dof:
            raise InvalidDimension("all environments must share the asset layout")
    n = len(systems)
    x = np.zeros((n, dof)) if x0 is None else np.array(x0, dtype=np.float64).reshape(n, dof)
    return MultiEnvSystem(list(systems), x, np.zeros((n, dof)), np.zeros((n, dof)))
