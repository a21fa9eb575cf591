"""Collision detection and the non-smooth contact residual.

Each vertex-collider pair inside the detection margin yields three residual
rows phi = (normal, tangent1, tangent2), all expressed in gap units (meters):

    phi_n = (lam_n - max(0, lam_n - r * gap(x))) / r
    phi_t = (lam_t - proj_{mu lam_n}(lam_t - r * u_t)) / r

with r = m_eff / h^2 the per-contact regularization, u_t the tangential
displacement accumulated over the step, and proj the closest point in the
friction disk. The residual vanishes exactly when the unilateral contact and
Coulomb friction conditions hold. Equality (grasp) rows share the same
machinery with an identity Jacobian and zero compliance.

At non-differentiable points the generalized derivative takes the
contact-active branch (gap treated as touching) and the sticking branch
(friction state on the disk boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grasp import BilateralConstraint
from .mesh import DeformableMesh

__all__ = [
    "PlaneCollider",
    "BoxCollider",
    "ContactConstraint",
    "NewtonLinearization",
    "tangent_basis",
    "detect_contacts",
    "set_regularization",
    "eval_phi",
    "stacked_phi",
    "build_linearization",
]


@dataclass
class PlaneCollider:
    """Half-space boundary through ``point`` with outward unit ``normal``."""

    point: np.ndarray
    normal: np.ndarray
    mu: float = 0.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise ValueError("plane normal must be nonzero")
        self.normal = n / nn

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (points - self.point) @ self.normal

    def contact_frames(self, points: np.ndarray):
        """(normal, offset) of the supporting plane per query point."""
        n = np.broadcast_to(self.normal, points.shape)
        off = np.full(points.shape[0], self.normal @ self.point)
        return n, off


@dataclass
class BoxCollider:
    """Axis-aligned rigid box; contacts use the nearest-face signed distance
    with the face normal frozen at detection time."""

    center: np.ndarray
    half_extents: np.ndarray
    mu: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        d = np.abs(points - self.center) - self.half_extents
        return np.max(d, axis=1)

    def contact_frames(self, points: np.ndarray):
        d = np.abs(points - self.center) - self.half_extents
        axis = np.argmax(d, axis=1)
        sign = np.sign(points[np.arange(len(points)), axis] - self.center[axis])
        sign[sign == 0] = 1.0
        n = np.zeros_like(points)
        n[np.arange(len(points)), axis] = sign
        off = n @ self.center + self.half_extents[axis]
        return n, off


@dataclass
class ContactConstraint:
    """One vertex-collider contact with its orthonormal frame and multiplier.

    ``gap(x) = normal . x_v - offset`` is exact for the supporting face;
    ``anchor`` is the vertex position at detection, the reference for the
    per-step tangential displacement. ``lam = (normal, t1, t2)`` forces in N.
    """

    vertex_id: int
    normal: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    offset: float
    gap: float
    mu: float
    anchor: np.ndarray
    collider_id: int = -1
    lam: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: float = 0.0

    def gap_at(self, x_v: np.ndarray) -> float:
        return float(self.normal @ x_v - self.offset)


def tangent_basis(normal: np.ndarray):
    """Deterministic tangents: t1 = normalize(n x e) with e the global axis
    least aligned with n, t2 = n x t1."""
    e = np.zeros(3)
    e[np.argmin(np.abs(normal))] = 1.0
    t1 = np.cross(normal, e)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return t1, t2


def detect_contacts(positions, colliders, margin: float = 0.0) -> list:
    """One constraint per vertex whose signed distance to a collider is below
    ``margin``, sorted by (collider, vertex) for determinism."""
    pts = np.asarray(getattr(positions, "vertices", positions), dtype=np.float64).reshape(-1, 3)
    out = []
    for ci, col in enumerate(colliders):
        dist = col.signed_distance(pts)
        hits = np.nonzero(dist < margin)[0]
        if not hits.size:
            continue
        normals, offsets = col.contact_frames(pts[hits])
        for k, v in enumerate(hits):
            n = normals[k]
            t1, t2 = tangent_basis(n)
            out.append(ContactConstraint(
                vertex_id=int(v), normal=n.copy(), t1=t1, t2=t2,
                offset=float(offsets[k]), gap=float(dist[v]),
                mu=float(col.mu), anchor=pts[v].copy(), collider_id=ci,
            ))
    return out


def set_regularization(contacts: list, mass_per_dof: np.ndarray, h: float) -> None:
    """r = effective vertex mass / h^2 for every contact."""
    for c in contacts:
        c.r = float(mass_per_dof[3 * c.vertex_id]) / (h * h)


def eval_phi(constraint: ContactConstraint, x: np.ndarray, lam: np.ndarray = None) -> np.ndarray:
    """Contact residual (3,) at positions x; zero iff unilateral contact and
    Coulomb friction conditions hold at this vertex."""
    if constraint.r <= 0:
        raise ValueError("constraint regularization not set (call set_regularization)")
    xf = np.asarray(x, dtype=np.float64).ravel()
    v = constraint.vertex_id
    x_v = xf[3 * v:3 * v + 3]
    lam = constraint.lam if lam is None else np.asarray(lam, dtype=np.float64)
    r = constraint.r
    gap = constraint.gap_at(x_v)
    s = lam[0] - r * gap
    phi = np.empty(3)
    phi[0] = gap if s >= 0 else lam[0] / r
    u = x_v - constraint.anchor
    ut = np.array([constraint.t1 @ u, constraint.t2 @ u])
    sigma = lam[1:] - r * ut
    ns = np.linalg.norm(sigma)
    rho = constraint.mu * max(lam[0], 0.0)
    if ns <= rho:  # rho >= 0, so sigma = 0 always lands here (stick)
        phi[1:] = ut
    else:
        phi[1:] = (lam[1:] - rho * sigma / ns) / r
    return phi


def stacked_phi(contacts: list, bilaterals: list, x: np.ndarray,
                lam: np.ndarray) -> np.ndarray:
    """Residual vector over contact rows then bilateral rows at (x, lam)."""
    xf = np.asarray(x, dtype=np.float64).ravel()
    C, B = len(contacts), len(bilaterals)
    phi = np.zeros(3 * C + 3 * B)
    for i, c in enumerate(contacts):
        phi[3 * i:3 * i + 3] = eval_phi(c, xf, lam[3 * i:3 * i + 3])
    for j, bc in enumerate(bilaterals):
        row0 = 3 * C + 3 * j
        v = bc.vertex_id
        phi[row0:row0 + 3] = xf[3 * v:3 * v + 3] - bc.target
    return phi


@dataclass
class NewtonLinearization:
    """One Newton iteration's constraint data.

    ``D`` is the residual Jacobian wrt positions (branch dependent). ``J`` is
    the geometric contact map (frame rows n/t1/t2 per contact, identity per
    bilateral row) through which multiplier forces enter the balance equation;
    on active-normal and sticking rows the two coincide. ``E`` is the
    block-diagonal compliance: the residual Jacobian wrt multipliers scaled
    by 1/h^2, i.e. the coefficient of the scaled increment h^2*dlam in the
    saddle row D x + E (h^2 dlam) = h_vec. ``g = b + h^2 J^T lam`` and
    ``h_vec = -phi(x, lam) + D x`` are the Newton right-hand sides.
    """

    D: sp.csr_matrix
    J: sp.csr_matrix
    E: sp.csr_matrix
    g: np.ndarray
    h_vec: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    n_contact_rows: int
    contacts: list
    bilaterals: list

    @property
    def rows(self) -> int:
        return self.D.shape[0]


def build_linearization(constraints, x_prev: np.ndarray, lambda_prev: np.ndarray,
                        b: np.ndarray, h: float) -> NewtonLinearization:
    """Assemble D, E, g, h for the current iterate.

    ``constraints`` mixes ContactConstraint and BilateralConstraint entries;
    contact rows always come first, bilateral rows after, each group in the
    given order. ``lambda_prev`` is the stacked multiplier (one per row); if
    None the contacts' stored lam values are used (bilateral rows start at 0).
    """
    contacts = [c for c in constraints if isinstance(c, ContactConstraint)]
    bilaterals = [c for c in constraints if isinstance(c, BilateralConstraint)]
    xf = np.asarray(x_prev, dtype=np.float64).ravel()
    dof = xf.shape[0]
    C, B = len(contacts), len(bilaterals)
    R = 3 * C + 3 * B
    if lambda_prev is None:
        lam = np.zeros(R)
        for i, c in enumerate(contacts):
            lam[3 * i:3 * i + 3] = c.lam
    else:
        lam = np.asarray(lambda_prev, dtype=np.float64).ravel()
        if lam.shape[0] != R:
            raise ValueError(f"lambda length {lam.shape[0]} != rows {R}")

    phi = np.zeros(R)
    d_rows, d_cols, d_vals = [], [], []
    j_rows, j_cols, j_vals = [], [], []
    e_rows, e_cols, e_vals = [], [], []
    inv_h2 = 1.0 / (h * h)

    if C:
        vid = np.array([c.vertex_id for c in contacts])
        n = np.array([c.normal for c in contacts])
        t1 = np.array([c.t1 for c in contacts])
        t2 = np.array([c.t2 for c in contacts])
        off = np.array([c.offset for c in contacts])
        mu = np.array([c.mu for c in contacts])
        r = np.array([c.r for c in contacts])
        if np.any(r <= 0):
            raise ValueError("contact regularization not set (call set_regularization)")
        anchor = np.array([c.anchor for c in contacts])
        lamc = lam[:3 * C].reshape(C, 3)
        xv = xf.reshape(-1, 3)[vid]
        gap = np.einsum("ij,ij->i", n, xv) - off
        s = lamc[:, 0] - r * gap
        active = s >= 0
        phi_c = np.zeros((C, 3))
        phi_c[:, 0] = np.where(active, gap, lamc[:, 0] / r)

        u = xv - anchor
        ut = np.stack([np.einsum("ij,ij->i", t1, u), np.einsum("ij,ij->i", t2, u)], axis=1)
        sigma = lamc[:, 1:] - r[:, None] * ut
        ns = np.linalg.norm(sigma, axis=1)
        rho = mu * np.maximum(lamc[:, 0], 0.0)
        stick = ns <= rho  # includes sigma = 0 since rho >= 0
        slip = ~stick
        ns_safe = np.where(ns > 0, ns, 1.0)
        sig_hat = sigma / ns_safe[:, None]
        phi_c[stick, 1:] = ut[stick]
        phi_c[slip, 1:] = (lamc[slip, 1:] - rho[slip, None] * sig_hat[slip]) / r[slip, None]
        phi[:3 * C] = phi_c.ravel()

        rows3 = 3 * np.arange(C)
        vcols = (3 * vid[:, None] + np.arange(3)[None, :])  # (C, 3)

        for k, frame in ((0, n), (1, t1), (2, t2)):
            j_rows.append(np.repeat(rows3 + k, 3))
            j_cols.append(vcols.ravel())
            j_vals.append(frame.ravel())

        ia = np.nonzero(active)[0]
        if ia.size:
            d_rows.append(np.repeat(rows3[ia], 3))
            d_cols.append(vcols[ia].ravel())
            d_vals.append(n[ia].ravel())
        inact = np.nonzero(~active)[0]
        if inact.size:
            e_rows.append(rows3[inact])
            e_cols.append(rows3[inact])
            e_vals.append(inv_h2 / r[inact])

        ist = np.nonzero(stick)[0]
        if ist.size:
            for k, t in ((1, t1), (2, t2)):
                d_rows.append(np.repeat(rows3[ist] + k, 3))
                d_cols.append(vcols[ist].ravel())
                d_vals.append(t[ist].ravel())
        isl = np.nonzero(slip)[0]
        if isl.size:
            P = np.eye(2)[None, :, :] - sig_hat[isl, :, None] * sig_hat[isl, None, :]
            T = np.stack([t1[isl], t2[isl]], axis=1)  # (k, 2, 3)
            scale = (rho[isl] / ns[isl])
            Dt = scale[:, None, None] * (P @ T)      # (k, 2, 3)
            rr = (rows3[isl, None, None] + np.array([1, 2])[None, :, None])
            d_rows.append(np.broadcast_to(rr, Dt.shape).ravel())
            d_cols.append(np.broadcast_to(vcols[isl][:, None, :], Dt.shape).ravel())
            d_vals.append(Dt.ravel())
            # dphi_t/dlam_t = (I - rho P / ns) / r, dphi_t/dlam_n = -mu sig_hat / r
            Et = (np.eye(2)[None, :, :] - scale[:, None, None] * P) / r[isl, None, None]
            rr2 = rows3[isl, None, None] + np.array([1, 2])[None, :, None]
            cc2 = rows3[isl, None, None] + np.array([1, 2])[None, None, :]
            e_rows.append(np.broadcast_to(rr2, Et.shape).ravel())
            e_cols.append(np.broadcast_to(cc2, Et.shape).ravel())
            e_vals.append(inv_h2 * Et.ravel())
            ip = isl[lamc[isl, 0] > 0]
            if ip.size:
                coup = -(mu[ip, None] * sig_hat[ip]) / r[ip, None]
                e_rows.append((rows3[ip, None] + np.array([1, 2])[None, :]).ravel())
                e_cols.append(np.repeat(rows3[ip], 2))
                e_vals.append(inv_h2 * coup.ravel())

    for j, bc in enumerate(bilaterals):
        row0 = 3 * C + 3 * j
        v = bc.vertex_id
        x_v = xf[3 * v:3 * v + 3]
        phi[row0:row0 + 3] = x_v - bc.target
        rows = np.arange(row0, row0 + 3)
        cols = np.arange(3 * v, 3 * v + 3)
        d_rows.append(rows)
        d_cols.append(cols)
        d_vals.append(np.ones(3))
        j_rows.append(rows)
        j_cols.append(cols)
        j_vals.append(np.ones(3))

    def _csr(rows, cols, vals, shape):
        if not rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=shape,
        )

    D = _csr(d_rows, d_cols, d_vals, (R, dof))
    J = _csr(j_rows, j_cols, j_vals, (R, dof))
    E = _csr(e_rows, e_cols, e_vals, (R, R))

    g = b + (h * h) * (J.T @ lam)
    h_vec = -phi + D @ xf
    return NewtonLinearization(D=D, J=J, E=E, g=g, h_vec=h_vec, phi=phi, lam=lam,
                               n_contact_rows=3 * C, contacts=contacts, bilaterals=bilaterals)
