"""Uniform-grid geometry shared by fields, profiles, meshes and region selectors.

All grids live on the centered box [-L/2, L/2]^d split into n^d congruent
cells of side h = L/n, indexed row-major (first coordinate slowest).  On a
torus the same coordinates are used and distances wrap.
"""

from __future__ import annotations

import numpy as np


def cell_centers(d: int, n: int, box: float) -> np.ndarray:
    """(n**d, d) array of cell-center coordinates in row-major cell order."""
    h = box / n
    axes = [-0.5 * box + h * (np.arange(n) + 0.5)] * d
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def wrapped_delta(points: np.ndarray, center, box: float, periodic: bool) -> np.ndarray:
    """Displacement points - center, reduced to the principal torus image if periodic."""
    delta = points - np.asarray(center, dtype=float)
    if periodic:
        delta = (delta + 0.5 * box) % box - 0.5 * box
    return delta


def points_in_ball(points: np.ndarray, center, radius: float, box: float,
                   periodic: bool) -> np.ndarray:
    """Flat indices of points within the closed ball B_radius(center)."""
    delta = wrapped_delta(points, center, box, periodic)
    return np.flatnonzero(np.einsum("ij,ij->i", delta, delta) <= radius * radius * (1 + 1e-12))


def cells_in_ball(d: int, n: int, box: float, center, radius: float,
                  periodic: bool) -> np.ndarray:
    """Flat cell indices whose centers lie in the closed ball."""
    return points_in_ball(cell_centers(d, n, box), center, radius, box, periodic)
