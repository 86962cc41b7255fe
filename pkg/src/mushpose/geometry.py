"""Core 3D primitives: rotations, meshes, voxel grids, hulls, visibility, boxes.

Rotation convention used throughout the package: ``rot_matrix(tx, ty)`` is
``R_y(ty) @ R_x(tx)`` and maps world offsets into the canonical (upright)
mushroom frame, i.e. ``R @ (p - c)`` rectifies a point. The matrix that places
canonical geometry into the world is therefore its transpose. The third row of
``R`` is the world-space cap axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError


class DegenerateGeometryError(ValueError):
    """Input points do not span the dimension an operation needs."""


# ---------------------------------------------------------------------------
# rotations


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RotXY:
    """Tilt of a cap as two basic rotations, both within [-pi/2, pi/2]."""

    theta_x: float = 0.0
    theta_y: float = 0.0

    def __post_init__(self):
        for name in ("theta_x", "theta_y"):
            v = getattr(self, name)
            if not math.isfinite(v) or abs(v) > math.pi / 2 + 1e-12:
                raise ValueError(f"{name}={v} outside [-pi/2, pi/2]")

    def matrix(self) -> np.ndarray:
        return rot_matrix(self)

    @property
    def axis(self) -> np.ndarray:
        """World-space unit cap axis (third row of the rectifying matrix)."""
        return rot_matrix(self)[2].copy()


def rot_matrix(r: RotXY) -> np.ndarray:
    """Return ``R_y(theta_y) @ R_x(theta_x)``."""
    return rot_y(r.theta_y) @ rot_x(r.theta_x)


def rot_from_axis(axis) -> RotXY:
    """Inverse of ``RotXY.axis`` for an axis with non-negative z component."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    sy = float(np.clip(-a[0], -1.0, 1.0))
    cy = math.sqrt(max(0.0, 1.0 - sy * sy))
    sx = float(np.clip(a[1] / cy, -1.0, 1.0)) if cy > 0 else 0.0
    return RotXY(math.asin(sx), math.asin(sy))


# ---------------------------------------------------------------------------
# clouds and meshes


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.normals is None else self.normals.copy(),
        )

    def face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def with_vertex_normals(self) -> "TriMesh":
        """Copy with area-weighted vertex normals computed from the faces."""
        acc = np.zeros_like(self.vertices)
        cross = self.face_cross()
        for k in range(3):
            np.add.at(acc, self.faces[:, k], cross)
        n = np.linalg.norm(acc, axis=1, keepdims=True)
        normals = np.divide(acc, n, out=np.zeros_like(acc), where=n > 0)
        return TriMesh(self.vertices.copy(), self.faces.copy(), normals)

    def transformed(self, matrix: np.ndarray, offset=(0.0, 0.0, 0.0)) -> "TriMesh":
        """Apply ``x -> matrix @ x + offset``; normals are recomputed if present."""
        verts = self.vertices @ np.asarray(matrix, dtype=float).T + np.asarray(offset, dtype=float)
        out = TriMesh(verts, self.faces.copy())
        return out.with_vertex_normals() if self.normals is not None else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` points uniformly over the surface (area weighted)."""
        if n <= 0 or len(self.faces) == 0:
            return np.zeros((0, 3))
        cum = np.cumsum(self.face_areas())
        face = np.minimum(np.searchsorted(cum, rng.random(n) * cum[-1], side="right"), len(cum) - 1)
        u = rng.random(n)
        w = rng.random(n)
        flip = u + w > 1.0
        u[flip] = 1.0 - u[flip]
        w[flip] = 1.0 - w[flip]
        tri = self.vertices[self.faces[face]]
        return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + w[:, None] * (tri[:, 2] - tri[:, 0])


def merge_meshes(meshes) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.vstack(verts), np.vstack(faces))


# ---------------------------------------------------------------------------
# voxel grid


def voxel_cells(points: np.ndarray, voxel_size: float):
    """Bucket points into an origin-anchored grid.

    Returns ``(cell_keys, inverse)`` where ``cell_keys`` are the occupied
    integer cells in ascending lexicographic order and ``inverse`` maps each
    input point to its row in ``cell_keys``.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2.0 ** 62:
        # packed scalar keys sort in the same lexicographic order as the rows
        packed = ((keys[:, 0] - lo[0]) * span[1] + (keys[:, 1] - lo[1])) * span[2] + (keys[:, 2] - lo[2])
        uniq, first, inverse = np.unique(packed, return_index=True, return_inverse=True)
        return keys[first], inverse.reshape(-1)
    cells, inverse = np.unique(keys, axis=0, return_inverse=True)
    return cells, inverse.reshape(-1)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid."""
    cells, inverse = voxel_cells(cloud.points, voxel_size)
    if len(cells) == 0:
        return PointCloud(np.zeros((0, 3)))
    counts = np.bincount(inverse, minlength=len(cells)).astype(float)
    centroids = np.stack(
        [np.bincount(inverse, weights=cloud.points[:, k], minlength=len(cells)) for k in range(3)],
        axis=1,
    ) / counts[:, None]
    normals = None
    if cloud.normals is not None:
        acc = np.stack(
            [np.bincount(inverse, weights=cloud.normals[:, k], minlength=len(cells)) for k in range(3)],
            axis=1,
        )
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        # opposing normals cancelling inside a cell fall back to +z
        normals = np.where(norm > 1e-12, acc / np.where(norm > 1e-12, norm, 1.0), [0.0, 0.0, 1.0])
    return PointCloud(centroids, normals)


# ---------------------------------------------------------------------------
# convex hull


@dataclass
class HullMesh:
    """Convex hull as indices into the input points; faces wound outward."""

    vertex_indices: np.ndarray
    faces: np.ndarray
    equations: np.ndarray = field(repr=False)


def _affine_rank(points: np.ndarray, tol: float = 1e-10) -> int:
    if len(points) < 2:
        return 0
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    scale = max(sv[0], 1e-300)
    return int(np.sum(sv > tol * scale))


def convex_hull(points) -> HullMesh:
    """3D convex hull (Qhull quickhull) with outward-oriented triangles."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 4 or _affine_rank(pts) < 3:
        raise DegenerateGeometryError("convex hull needs at least 4 non-coplanar points")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateGeometryError(str(exc)) from exc
    faces = hull.simplices.copy()
    normals = np.cross(pts[faces[:, 1]] - pts[faces[:, 0]], pts[faces[:, 2]] - pts[faces[:, 0]])
    flip = np.einsum("ij,ij->i", normals, hull.equations[:, :3]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return HullMesh(np.sort(hull.vertices), faces, hull.equations.copy())


def _extreme_indices(pts: np.ndarray) -> np.ndarray:
    """Indices of convex-hull vertices for point sets of any affine rank."""
    rank = _affine_rank(pts)
    if rank == 3:
        return convex_hull(pts).vertex_indices
    if rank == 0:
        return np.arange(len(pts))
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:rank].T
    if rank == 1:
        c = coords[:, 0]
        return np.unique(np.concatenate([np.flatnonzero(c == c.min()), np.flatnonzero(c == c.max())]))
    return np.sort(ConvexHull(coords).vertices)


# ---------------------------------------------------------------------------
# hidden point removal


def hidden_point_removal(cloud, viewpoint, radius_factor: float = 100.0) -> np.ndarray:
    """Indices of points visible from ``viewpoint`` (spherical flip + hull)."""
    if radius_factor <= 1:
        raise ValueError("radius_factor must exceed 1")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cloud is empty")
    rel = pts - np.asarray(viewpoint, dtype=float)
    dist = np.linalg.norm(rel, axis=1)
    if np.any(dist == 0):
        raise ValueError("viewpoint coincides with a cloud point")
    radius = radius_factor * dist.max()
    flipped = rel + 2.0 * (radius - dist)[:, None] * rel / dist[:, None]
    stacked = np.vstack([flipped, np.zeros((1, 3))])
    idx = _extreme_indices(stacked)
    return idx[idx < len(pts)]


# ---------------------------------------------------------------------------
# oriented boxes


@dataclass(frozen=True)
class OrientedBox:
    """Box whose local frame is placed by ``rot_matrix(rot).T @ R_z(theta_z)``."""

    center: tuple
    rot: RotXY
    half_extents: tuple
    theta_z: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ValueError("center and half_extents must be 3-vectors")
        if min(self.half_extents) <= 0:
            raise ValueError("half_extents must be positive")

    def basis(self) -> np.ndarray:
        """Local-to-world rotation; columns are the box axes."""
        return rot_matrix(self.rot).T @ rot_z(self.theta_z)

    def volume(self) -> float:
        h = self.half_extents
        return 8.0 * h[0] * h[1] * h[2]

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return np.asarray(self.center) + (signs * np.asarray(self.half_extents)) @ self.basis().T

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        local = (np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(self.center)) @ self.basis()
        return np.all(np.abs(local) <= np.asarray(self.half_extents) + tol, axis=1)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents))


def obb_iou(a: OrientedBox, b: OrientedBox, samples: int = 20000, seed: int = 0) -> float:
    """Monte-Carlo IoU of two oriented boxes.

    The same unit-cube draws are mapped into both boxes, so the estimate is
    exactly symmetric in its arguments.
    """
    if samples < 10_000:
        raise ValueError("samples must be at least 1e4")
    if a == b:
        return 1.0
    gap = np.linalg.norm(np.subtract(a.center, b.center))
    if gap > a.bounding_radius() + b.bounding_radius():
        return 0.0
    u = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(samples, 3))
    pa = np.asarray(a.center) + (u * np.asarray(a.half_extents)) @ a.basis().T
    pb = np.asarray(b.center) + (u * np.asarray(b.half_extents)) @ b.basis().T
    va, vb = a.volume(), b.volume()
    inter = 0.5 * (va * b.contains(pa, tol=0.0).mean() + vb * a.contains(pb, tol=0.0).mean())
    union = va + vb - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0
