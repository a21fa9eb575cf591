"""Ray-cast depth rendering from simulation state.

A pinhole camera (x right, y down, z forward; no distortion) shoots one ray
per pixel through integer pixel coordinates ((u - cx)/fx, (v - cy)/fy, 1).
Reported depth is the Euclidean ray length of the nearest triangle hit inside
[near, far]; missed pixels carry the infinity sentinel (0 after 16-bit PGM
quantization). Instance ids index the scene objects, with collider quads
appended after them.

The sim-to-real depth augmentations (random blockout rectangles, boundary
jitter and noise, polygonal self-occlusion masks) are deterministic for a
fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .contact import tangent_basis
from .errors import InvalidDimension, IoFailure

__all__ = [
    "SENTINEL",
    "DepthCamera",
    "DepthImage",
    "AugmentationConfig",
    "TriangleBVH",
    "raycast_triangles",
    "render_depth",
    "depth_to_pointcloud",
    "augment",
    "write_pgm",
    "read_pgm",
    "write_xyz",
    "render_benchmark",
]

SENTINEL = np.inf


@dataclass
class DepthCamera:
    """Pinhole depth camera with a camera-to-world rigid pose."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fx: float = 100.0
    fy: float = 100.0
    cx: float = 32.0
    cy: float = 32.0
    width: int = 64
    height: int = 64
    near: float = 1e-4
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidDimension("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise InvalidDimension("need 0 < near < far")

    @classmethod
    def overhead(cls, height: float, **kwargs) -> "DepthCamera":
        """Camera at (0, height, 0) looking straight down onto the XZ plane,
        image x along world +x."""
        R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        return cls(rotation=R, translation=np.array([0.0, height, 0.0]), **kwargs)

    def ray_directions(self) -> np.ndarray:
        """(H*W, 3) unit world-space directions, row-major pixel order."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                      np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.rotation.T


@dataclass
class DepthImage:
    """Per-pixel ray lengths in meters, SENTINEL where nothing was hit, and
    per-pixel instance ids (-1 for misses)."""

    depth: np.ndarray
    ids: np.ndarray
    near: float
    far: float

    @property
    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def copy(self) -> "DepthImage":
        return DepthImage(self.depth.copy(), self.ids.copy(), self.near, self.far)


class TriangleBVH:
    """Median-split AABB tree over triangles, rebuilt per frame from current
    vertex positions; leaves are tested with a vectorized ray-triangle kernel."""

    def __init__(self, tri_pts: np.ndarray, leaf_size: int = 32):
        self.tri = np.asarray(tri_pts, dtype=np.float64).reshape(-1, 3, 3)
        n = len(self.tri)
        self.order = np.arange(n)
        self.nodes = []  # (lo, hi, left, right, start, count); leaf if left < 0
        self._emitted = 0
        if n:
            lo = self.tri.min(axis=1)
            hi = self.tri.max(axis=1)
            cent = self.tri.mean(axis=1)
            self._build(np.arange(n), lo, hi, cent, leaf_size)

    def _build(self, idx, lo, hi, cent, leaf_size) -> int:
        node_lo = lo[idx].min(axis=0)
        node_hi = hi[idx].max(axis=0)
        me = len(self.nodes)
        self.nodes.append([node_lo, node_hi, -1, -1, 0, 0])
        if len(idx) <= leaf_size:
            start = self._emit(idx)
            self.nodes[me][4:] = [start, len(idx)]
            return me
        axis = int(np.argmax(node_hi - node_lo))
        sort = idx[np.argsort(cent[idx, axis], kind="stable")]
        half = len(sort) // 2
        left = self._build(sort[:half], lo, hi, cent, leaf_size)
        right = self._build(sort[half:], lo, hi, cent, leaf_size)
        self.nodes[me][2:4] = [left, right]
        return me

    def _emit(self, idx) -> int:
        start = self._emitted
        self.order[start:start + len(idx)] = idx
        self._emitted = start + len(idx)
        return start

    def raycast(self, origin: np.ndarray, dirs: np.ndarray, tmin: float, tmax: float):
        """Nearest hit per ray: returns (t, triangle_index) with t = inf and
        index = -1 for misses."""
        n_rays = dirs.shape[0]
        t_best = np.full(n_rays, np.inf)
        idx_best = np.full(n_rays, -1, dtype=np.int64)
        if not len(self.tri):
            return t_best, idx_best
        inv = np.divide(1.0, dirs, out=np.full_like(dirs, np.inf), where=dirs != 0)
        stack = [(0, np.arange(n_rays))]
        while stack:
            node_id, rays = stack.pop()
            lo, hi, left, right, start, count = self.nodes[node_id]
            with np.errstate(invalid="ignore"):
                t0 = (lo[None, :] - origin[None, :]) * inv[rays]
                t1 = (hi[None, :] - origin[None, :]) * inv[rays]
                t_near = np.minimum(t0, t1).max(axis=1)
                t_far = np.maximum(t0, t1).min(axis=1)
            # 0 * inf at a slab boundary gives NaN; never cull those rays
            t_near = np.where(np.isnan(t_near), -np.inf, t_near)
            t_far = np.where(np.isnan(t_far), np.inf, t_far)
            ok = (t_far >= np.maximum(t_near, tmin)) & (t_near <= np.minimum(t_best[rays], tmax))
            rays = rays[ok]
            if not rays.size:
                continue
            if left < 0:
                tris = self.order[start:start + count]
                t, hit = _moller_trumbore(origin, dirs[rays], self.tri[tris], tmin, tmax)
                t = np.where(hit, t, np.inf)
                local = np.argmin(t, axis=1)
                t_hit = t[np.arange(len(rays)), local]
                better = t_hit < t_best[rays]
                upd = rays[better]
                t_best[upd] = t_hit[better]
                idx_best[upd] = tris[local[better]]
            else:
                stack.append((right, rays))
                stack.append((left, rays))
        return t_best, idx_best


def _moller_trumbore(origin, dirs, tris, tmin, tmax, eps=1e-12):
    """Ray-triangle intersection, (R, K) broadcast; no backface culling."""
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("kj,rkj->rk", e1, pvec)
    ok = np.abs(det) > eps
    inv_det = np.where(ok, 1.0 / np.where(det == 0, 1, det), 0.0)
    tvec = origin[None, :] - v0
    u = np.einsum("kj,rkj->rk", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.einsum("rj,kj->rk", dirs, qvec) * inv_det
    t = np.einsum("kj,kj->k", e2, qvec)[None, :] * inv_det
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t >= tmin) & (t <= tmax)
    return t, hit


def raycast_triangles(vertices: np.ndarray, faces: np.ndarray, camera: DepthCamera,
                      face_ids: np.ndarray = None) -> DepthImage:
    """Render an explicit triangle soup (nearest hit in [near, far])."""
    dirs = camera.ray_directions()
    tri_pts = np.asarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)] \
        if len(faces) else np.zeros((0, 3, 3))
    bvh = TriangleBVH(tri_pts)
    t, idx = bvh.raycast(camera.translation, dirs, camera.near, camera.far)
    depth = np.where(np.isfinite(t), t, SENTINEL).reshape(camera.height, camera.width)
    ids = np.full(idx.shape, -1, dtype=np.int32)
    if face_ids is not None and len(faces):
        hit = idx >= 0
        ids[hit] = np.asarray(face_ids, dtype=np.int32)[idx[hit]]
    elif len(faces):
        ids[idx >= 0] = 0
    return DepthImage(depth, ids.reshape(camera.height, camera.width), camera.near, camera.far)


def render_depth(session, env_id: int, camera: DepthCamera,
                 include_colliders: bool = True, collider_extent: float = 10.0) -> DepthImage:
    """Depth + instance-id image of one environment: object triangles plus
    (optionally) a finite quad per plane collider, appended after objects."""
    verts, faces, ids = session.triangles(env_id)
    verts_list = [verts]
    faces_list = [faces]
    ids_list = [ids]
    offset = len(verts)
    n_objects = len(session.layout)
    if include_colliders:
        for ci, col in enumerate(session.world.colliders):
            if not hasattr(col, "normal"):
                continue
            t1, t2 = tangent_basis(col.normal)
            c = col.point
            L = collider_extent
            corners = np.array([c - L * t1 - L * t2, c + L * t1 - L * t2,
                                c + L * t1 + L * t2, c - L * t1 + L * t2])
            verts_list.append(corners)
            faces_list.append(np.array([[0, 1, 2], [0, 2, 3]]) + offset)
            ids_list.append(np.full(2, n_objects + ci, dtype=np.int32))
            offset += 4
    all_verts = np.concatenate(verts_list)
    all_faces = np.concatenate(faces_list)
    all_ids = np.concatenate(ids_list)
    return raycast_triangles(all_verts, all_faces, camera, all_ids)


def depth_to_pointcloud(image: DepthImage, camera: DepthCamera) -> np.ndarray:
    """World-space points for every hit pixel; projecting them back exactly
    reproduces the hit depths."""
    dirs = camera.ray_directions().reshape(camera.height, camera.width, 3)
    mask = image.hit_mask
    return camera.translation[None, :] + image.depth[mask][:, None] * dirs[mask]


@dataclass
class AugmentationConfig:
    """Deterministic depth-image corruption: blockout rectangles, boundary
    erode/dilate jitter, Gaussian depth noise, polygonal occlusion masks."""

    blockout_count: int = 0
    blockout_max_size: int = 0
    blockout_probability: float = 1.0
    boundary_jitter: int = 0
    depth_noise_sigma: float = 0.0
    occlusion_masks: list = field(default_factory=list)  # (K, 2) pixel (col,row) polygons
    seed: int = 0

    def __post_init__(self):
        if min(self.blockout_count, self.blockout_max_size, self.boundary_jitter) < 0 \
                or self.depth_noise_sigma < 0 or not 0 <= self.blockout_probability <= 1:
            raise InvalidDimension("augmentation magnitudes must be nonnegative")


def _points_in_polygon(px: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorized over query points."""
    inside = np.zeros(len(px), dtype=bool)
    x, y = px[:, 0], px[:, 1]
    k = len(poly)
    for i in range(k):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % k]
        crosses = (y0 <= y) != (y1 <= y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xi)
    return inside


def augment(image: DepthImage, config: AugmentationConfig) -> DepthImage:
    """Apply blockout, boundary jitter, depth noise, and occlusion masks in
    that order; fully determined by config.seed, identity at zero magnitudes."""
    rng = np.random.default_rng(config.seed)
    out = image.copy()
    H, W = out.depth.shape

    for _ in range(config.blockout_count):
        draw = rng.random()
        if draw >= config.blockout_probability or config.blockout_max_size < 1:
            continue
        bw = int(rng.integers(1, config.blockout_max_size + 1))
        bh = int(rng.integers(1, config.blockout_max_size + 1))
        x0 = int(rng.integers(0, max(W - bw, 0) + 1))
        y0 = int(rng.integers(0, max(H - bh, 0) + 1))
        out.depth[y0:y0 + bh, x0:x0 + bw] = SENTINEL
        out.ids[y0:y0 + bh, x0:x0 + bw] = -1

    if config.boundary_jitter > 0:
        hits = out.hit_mask
        if hits.any() and (~hits).any():
            dist_in = ndimage.distance_transform_edt(hits)
            dist_out, (iy, ix) = ndimage.distance_transform_edt(~hits, return_indices=True)
            band_in = hits & (dist_in <= config.boundary_jitter)
            band_out = (~hits) & (dist_out <= config.boundary_jitter)
            coin = rng.random((H, W))
            erode = band_in & (coin < 0.5)
            dilate = band_out & (coin < 0.5)
            fill_depth = out.depth[iy, ix]
            fill_ids = out.ids[iy, ix]
            out.depth[erode] = SENTINEL
            out.ids[erode] = -1
            out.depth[dilate] = fill_depth[dilate]
            out.ids[dilate] = fill_ids[dilate]

    if config.depth_noise_sigma > 0:
        hits = out.hit_mask
        noise = rng.normal(0.0, config.depth_noise_sigma, size=(H, W))
        out.depth[hits] = np.clip(out.depth[hits] + noise[hits], out.near, out.far)

    if config.occlusion_masks:
        uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
        px = np.stack([uu.ravel(), vv.ravel()], axis=1)
        for poly in config.occlusion_masks:
            mask = _points_in_polygon(px, np.asarray(poly, dtype=np.float64)).reshape(H, W)
            out.depth[mask] = SENTINEL
            out.ids[mask] = -1
    return out


def write_pgm(image: DepthImage, path: str) -> None:
    """16-bit binary PGM, millimeter quantization, 0 = no-hit sentinel."""
    mm = np.zeros(image.depth.shape, dtype=np.uint16)
    hits = image.hit_mask
    mm[hits] = np.clip(np.rint(image.depth[hits] * 1000.0), 1, 65535).astype(np.uint16)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{image.depth.shape[1]} {image.depth.shape[0]}\n65535\n".encode())
            fh.write(mm.astype(">u2").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_pgm(path: str) -> np.ndarray:
    """Load a 16-bit PGM back as an array of millimeters (0 = sentinel)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise IoFailure(f"{path}: not a binary PGM")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 65535:
            raise IoFailure(f"{path}: expected 16-bit PGM")
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    return data.reshape(h, w).astype(np.uint16)


def write_xyz(points: np.ndarray, path: str) -> None:
    """ASCII XYZ point cloud, one point per line."""
    try:
        np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.9g")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def render_benchmark(config, camera: DepthCamera, n_envs_list, frames: int = 3) -> list:
    """Total render time per frame for each env count (all envs rendered
    once per frame), with the scaling ratio against the first row."""
    from .scene import initialize

    rows = []
    base = None
    for n in n_envs_list:
        session = initialize(config, n_envs=n)
        render_depth(session, 0, camera)  # warm up
        t0 = time.perf_counter()
        for _ in range(frames):
            for e in range(n):
                render_depth(session, e, camera)
        ms = (time.perf_counter() - t0) / frames * 1e3
        if base is None:
            base = ms
        rows.append({"n_envs": n, "ms_per_frame": ms, "ratio_vs_1": ms / base})
    return rows
