"""Structured periodic triangulations of the unit square (the 2-torus)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# corners of the two triangles of cell (i, j), as offsets from the lower-left
# vertex; both share the lower-left to upper-right diagonal
_CELL_TRIANGLES = (
    ((0, 0), (1, 0), (1, 1)),
    ((0, 0), (1, 1), (0, 1)),
)


@dataclass(frozen=True, eq=False)
class PeriodicMesh:
    """Uniform triangulation of [0,1)^2 with periodic identification.

    ``triangles[e]`` holds global vertex indices, ``shifts[e]`` the integer
    periodic shift of each corner, so that ``vertices[triangles] + shifts``
    gives the unwrapped (affine) geometry of every element.
    """

    n: int
    vertices: np.ndarray
    triangles: np.ndarray
    shifts: np.ndarray
    level: int = 0
    _coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = self.vertices[self.triangles] + self.shifts
        coords.setflags(write=False)
        object.__setattr__(self, "_coords", coords)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def h(self) -> float:
        """Cell width 1/n (the legs of every triangle)."""
        return 1.0 / self.n

    @property
    def element_coords(self) -> np.ndarray:
        """Unwrapped corner coordinates, shape (n_elements, 3, 2)."""
        return self._coords

    def vertex_index(self, i, j):
        return (j % self.n) * self.n + (i % self.n)

    def element_index(self, i, j, which):
        """Index of triangle ``which`` (0 below, 1 above the diagonal) of cell (i, j)."""
        return 2 * self.vertex_index(i, j) + which

    def areas(self) -> np.ndarray:
        p = self._coords
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self):
        """Periodic edges as (sorted vertex pair, midpoint in [0,1)^2) per element side.

        Returns ``(edge_ids, n_edges)`` where ``edge_ids[e, s]`` numbers side
        ``s`` of element ``e`` (side s joins local corners s and s+1 mod 3).
        Edges are ordered by sorted endpoint pair, ties (only possible for
        n = 2) broken by midpoint position.
        """
        p = self._coords
        nxt = np.roll(np.arange(3), -1)
        mid = 0.5 * (p + p[:, nxt])
        # midpoints are half-integer multiples of h: exact integer keys
        key = np.rint(np.mod(mid, 1.0) * 2 * self.n).astype(np.int64) % (2 * self.n)
        a = self.triangles
        b = self.triangles[:, nxt]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        m = 2 * self.n
        flat_mid = (key[..., 1] * m + key[..., 0]).ravel()
        uniq_mid, first, inverse = np.unique(flat_mid, return_index=True, return_inverse=True)
        order = np.lexsort((uniq_mid, hi.ravel()[first], lo.ravel()[first]))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        return rank[inverse].reshape(a.shape), len(uniq_mid)

    def locate(self, points):
        """Element index and reference coordinates of points (taken modulo 1)."""
        pts = np.mod(np.atleast_2d(np.asarray(points, dtype=float)), 1.0)
        cell = np.minimum(np.floor(pts * self.n).astype(np.int64), self.n - 1)
        local = pts * self.n - cell
        which = (local[:, 1] > local[:, 0]).astype(np.int64)
        elem = self.element_index(cell[:, 0], cell[:, 1], which)
        origin, jac = element_affine_map(self, elem)
        ref = np.linalg.solve(jac, (pts - origin)[..., None])[..., 0]
        return elem, ref


def build_periodic_mesh(n: int, level: int = 0) -> PeriodicMesh:
    """Split each of the n x n cells of the unit square into two triangles."""
    if int(n) != n or n < 2:
        raise ValueError(f"n must be >= 2 (got {n})")
    n = int(n)
    idx = np.arange(n)
    ii, jj = np.meshgrid(idx, idx, indexing="xy")  # vertex (i, j) -> j*n + i
    vertices = np.stack([ii.ravel() / n, jj.ravel() / n], axis=1)

    ci, cj = ii.ravel(), jj.ravel()
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    shifts = np.empty((2 * n * n, 3, 2), dtype=np.int64)
    for which, corners in enumerate(_CELL_TRIANGLES):
        for c, (di, dj) in enumerate(corners):
            gi, gj = ci + di, cj + dj
            tris[which::2, c] = (gj % n) * n + (gi % n)
            shifts[which::2, c, 0] = gi // n
            shifts[which::2, c, 1] = gj // n
    for a in (vertices, tris, shifts):
        a.setflags(write=False)
    return PeriodicMesh(n, vertices, tris, shifts, level)


def refine_uniform(mesh: PeriodicMesh) -> PeriodicMesh:
    """Red refinement: every triangle splits into four congruent children."""
    return build_periodic_mesh(2 * mesh.n, mesh.level + 1)


def element_affine_map(mesh: PeriodicMesh, elem):
    """Origin and Jacobian of x = origin + J @ xi for the reference triangle.

    ``elem`` may be an integer or an integer array.
    """
    elem = np.asarray(elem)
    if np.any(elem < 0) or np.any(elem >= mesh.n_elements):
        raise IndexError(f"element index out of range [0, {mesh.n_elements})")
    p = mesh.element_coords[elem]
    origin = p[..., 0, :]
    jac = np.stack([p[..., 1, :] - origin, p[..., 2, :] - origin], axis=-1)
    return origin, jac
