"""Quantitative fold-quality and motion metrics for scenario reports."""

from __future__ import annotations

import numpy as np

__all__ = ["projected_overlap_area", "tip_distance", "max_displacement"]


def projected_overlap_area(rest_positions: np.ndarray, positions: np.ndarray,
                           triangles: np.ndarray, axis: int = 0,
                           midline: float = 0.0) -> float:
    """Table-plane (XZ) area of the moved half lying over the target half.

    Triangles whose rest centroid sits below ``midline`` along ``axis`` form
    the moved half; the returned value sums their current projected areas on
    the far side of the midline. Larger means a more complete fold.
    """
    tris = np.asarray(triangles, dtype=np.int64)
    rest_c = rest_positions[tris].mean(axis=1)
    cur = positions[tris]
    cur_c = cur.mean(axis=1)
    moved = rest_c[:, axis] < midline
    landed = cur_c[:, axis] > midline
    pick = moved & landed
    if not pick.any():
        return 0.0
    p = cur[pick][:, :, [0, 2]]  # project to the table plane
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return float(0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]).sum())


def tip_distance(positions: np.ndarray, vertex: int, target) -> float:
    return float(np.linalg.norm(positions[vertex] - np.asarray(target, dtype=np.float64)))


def max_displacement(initial: np.ndarray, final: np.ndarray) -> float:
    """Largest per-vertex displacement magnitude between two (n,3) states."""
    return float(np.linalg.norm(final - initial, axis=1).max())
