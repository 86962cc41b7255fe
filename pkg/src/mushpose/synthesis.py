"""Procedural mushroom scenes with full 3D annotations."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    OrientedBox,
    PointCloud,
    RotXY,
    TriMesh,
    hidden_point_removal,
    merge_meshes,
    rot_matrix,
    rot_z,
    voxel_cells,
)

log = logging.getLogger(__name__)

CAP_HEIGHT = 2.0 / 3.0
GROUND_HALF_EXTENT = 10.0
GROUND_RESOLUTION = 128


# ---------------------------------------------------------------------------
# template


@dataclass
class MushroomTemplate:
    """Upright mushroom: half-ellipsoid cap over a cylindrical stem.

    The cap base sits on z = 0 with semi-axes (1, 1, 2/3); the stem hangs
    below the base plane.
    """

    cap: TriMesh
    stem: TriMesh
    stem_bottom: np.ndarray

    @property
    def cap_vertex_flag(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.cap.vertices), bool), np.zeros(len(self.stem.vertices), bool)])


def make_template(n_azimuth: int = 48, n_rings: int = 16, stem_radius: float = 0.35,
                  stem_height: float = 0.6) -> MushroomTemplate:
    az = np.linspace(0.0, 2.0 * np.pi, n_azimuth, endpoint=False)

    # cap: apex, then rings from just below the apex down to the rim at z = 0
    verts = [[0.0, 0.0, CAP_HEIGHT]]
    for i in range(1, n_rings + 1):
        elev = 0.5 * np.pi * (1.0 - i / n_rings)
        ring = np.stack([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az),
                         np.full_like(az, CAP_HEIGHT * np.sin(elev))], axis=1)
        verts.extend(ring.tolist())
    verts = np.array(verts)
    verts[-n_azimuth:, 2] = 0.0
    faces = []
    for j in range(n_azimuth):
        faces.append([0, 1 + j, 1 + (j + 1) % n_azimuth])
    for i in range(n_rings - 1):
        a0 = 1 + i * n_azimuth
        b0 = a0 + n_azimuth
        for j in range(n_azimuth):
            j1 = (j + 1) % n_azimuth
            faces.append([a0 + j, b0 + j, b0 + j1])
            faces.append([a0 + j, b0 + j1, a0 + j1])
    cap = TriMesh(verts, faces).with_vertex_normals()

    # stem: open tube plus bottom disc
    top = np.stack([stem_radius * np.cos(az), stem_radius * np.sin(az), np.zeros_like(az)], axis=1)
    bottom = top.copy()
    bottom[:, 2] = -stem_height
    sverts = np.vstack([top, bottom, [[0.0, 0.0, -stem_height]]])
    sfaces = []
    n = n_azimuth
    for j in range(n):
        j1 = (j + 1) % n
        sfaces.append([j, n + j, n + j1])
        sfaces.append([j, n + j1, j1])
        sfaces.append([2 * n, n + j1, n + j])
    stem = TriMesh(sverts, sfaces).with_vertex_normals()
    return MushroomTemplate(cap, stem, np.array([0.0, 0.0, -stem_height]))


# ---------------------------------------------------------------------------
# ground


def _grid_xy(resolution: int = GROUND_RESOLUTION, half: float = GROUND_HALF_EXTENT):
    lin = np.linspace(-half, half, resolution)
    gx, gy = np.meshgrid(lin, lin, indexing="xy")
    return gx, gy


def _grid_faces(resolution: int) -> np.ndarray:
    r = resolution
    idx = np.arange(r * r).reshape(r, r)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    return np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])


def _value_noise(gx, gy, cells: int, rng, half: float) -> np.ndarray:
    lattice = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    u = (gx + half) / (2 * half) * cells
    v = (gy + half) / (2 * half) * cells
    i = np.clip(np.floor(u).astype(int), 0, cells - 1)
    j = np.clip(np.floor(v).astype(int), 0, cells - 1)
    fu = u - i
    fv = v - j
    return ((1 - fu) * (1 - fv) * lattice[j, i] + fu * (1 - fv) * lattice[j, i + 1]
            + (1 - fu) * fv * lattice[j + 1, i] + fu * fv * lattice[j + 1, i + 1])


def make_ground(preset: str = "A", seed=0, amplitude_scale: float = 1.0,
                resolution: int = GROUND_RESOLUTION) -> TriMesh:
    """Heightfield soil mesh over [-10, 10]^2, vertices in row-major grid order.

    Preset A sums 40 Gaussian bumps; preset B is two octaves of value noise.
    Heights are kept within [-1, 1].
    """
    rng = np.random.default_rng(seed)
    half = GROUND_HALF_EXTENT
    gx, gy = _grid_xy(resolution, half)
    if preset == "A":
        h = np.zeros_like(gx)
        for _ in range(40):
            cx, cy = rng.uniform(-half, half, size=2)
            sigma = rng.uniform(0.5, 2.0)
            amp = rng.uniform(-0.3, 0.3)
            h += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * sigma ** 2))
        peak = np.abs(h).max()
        if peak > 1.0:
            h /= peak
    elif preset == "B":
        h = 0.4 * _value_noise(gx, gy, 5, rng, half) + 0.15 * _value_noise(gx, gy, 13, rng, half)
    else:
        raise ValueError(f"unknown ground preset {preset!r}")
    h = h * amplitude_scale
    verts = np.stack([gx.ravel(), gy.ravel(), h.ravel()], axis=1)
    return TriMesh(verts, _grid_faces(resolution)).with_vertex_normals()


def ground_height(ground: TriMesh, x: float, y: float, resolution: int = GROUND_RESOLUTION) -> float:
    """Bilinear height of a grid-ordered ground mesh at (x, y)."""
    half = GROUND_HALF_EXTENT
    h = ground.vertices[:, 2].reshape(resolution, resolution)
    step = 2 * half / (resolution - 1)
    u = min(max((x + half) / step, 0.0), resolution - 1 - 1e-9)
    v = min(max((y + half) / step, 0.0), resolution - 1 - 1e-9)
    i, j = int(u), int(v)
    fu, fv = u - i, v - j
    return float((1 - fu) * (1 - fv) * h[j, i] + fu * (1 - fv) * h[j, i + 1]
                 + (1 - fu) * fv * h[j + 1, i] + fu * fv * h[j + 1, i + 1])


def local_deform(mesh: TriMesh, n_seeds: int, max_mag: float, falloff_radius: float, seed=0,
                 magnitudes=None) -> TriMesh:
    """Push neighbourhoods of random seed vertices along their normals.

    Each seed gets a magnitude ``m ~ U(-max_mag, max_mag)`` (or the given
    ``magnitudes``); vertices within ``falloff_radius`` move by
    ``m * 0.5 * (1 + cos(pi * d / falloff_radius))`` along their normal.
    """
    if mesh.normals is None:
        raise ValueError("local_deform needs vertex normals")
    if falloff_radius <= 0:
        raise ValueError("falloff_radius must be positive")
    nv = len(mesh.vertices)
    if n_seeds > nv:
        raise ValueError(f"n_seeds={n_seeds} exceeds vertex count {nv}")
    if n_seeds == 0:
        return mesh.copy()
    rng = np.random.default_rng(seed)
    seeds = rng.choice(nv, size=n_seeds, replace=False)
    if magnitudes is None:
        mags = rng.uniform(-max_mag, max_mag, size=n_seeds)
    else:
        mags = np.broadcast_to(np.asarray(magnitudes, dtype=float), (n_seeds,))
    shift = np.zeros(nv)
    for s, m in zip(seeds, mags):
        d = np.linalg.norm(mesh.vertices - mesh.vertices[s], axis=1)
        near = d < falloff_radius
        shift[near] += m * 0.5 * (1.0 + np.cos(np.pi * d[near] / falloff_radius))
    verts = mesh.vertices + shift[:, None] * mesh.normals
    return TriMesh(verts, mesh.faces.copy()).with_vertex_normals()


# ---------------------------------------------------------------------------
# distractors


def _cube() -> TriMesh:
    v = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriMesh(v, f)


def _cone(n: int = 24) -> TriMesh:
    az = np.linspace(0, 2 * np.pi, n, endpoint=False)
    base = np.stack([0.5 * np.cos(az), 0.5 * np.sin(az), np.full(n, -0.5)], axis=1)
    v = np.vstack([base, [[0, 0, 0.5]], [[0, 0, -0.5]]])
    f = []
    for j in range(n):
        j1 = (j + 1) % n
        f.append([j, j1, n])
        f.append([j1, j, n + 1])
    return TriMesh(v, f)


def spawn_distractors(n: int, seed=0, ground: Optional[TriMesh] = None,
                      scale_range=(0.3, 1.5)) -> list:
    """Randomly posed cubes and cones resting on the ground."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        base = _cube() if rng.random() < 0.5 else _cone()
        scale = rng.uniform(*scale_range)
        rot = Rotation.random(random_state=rng).as_matrix()
        x, y = rng.uniform(-GROUND_HALF_EXTENT, GROUND_HALF_EXTENT, size=2)
        mesh = base.transformed(scale * rot)
        z0 = ground_height(ground, x, y) if ground is not None else 0.0
        sink = rng.uniform(0.0, 0.1) * scale
        offset = np.array([x, y, z0 - sink - mesh.vertices[:, 2].min()])
        out.append(TriMesh(mesh.vertices + offset, mesh.faces))
    return out


# ---------------------------------------------------------------------------
# mushrooms


@dataclass
class MushroomGT:
    id: int
    center: np.ndarray
    rot: RotXY
    scale_s: float
    scale_z: float
    per_axis_scales: np.ndarray
    cap_point_indices: np.ndarray
    obb: OrientedBox
    spin: float = 0.0  # z-rotation applied before tilting; not part of the pose

    @property
    def bounding_sphere(self):
        return np.asarray(self.obb.center), self.obb.bounding_radius()


@dataclass
class SceneAnnotation:
    mushrooms: list
    point_label: np.ndarray
    seg_label: np.ndarray

    def centers(self) -> np.ndarray:
        return np.array([m.center for m in self.mushrooms]).reshape(-1, 3)


@dataclass
class MushroomAugment:
    scale_range: tuple = (0.5, 1.5)
    axis_range: tuple = (0.8, 1.2)
    max_tilt_deg: float = 45.0
    deform_seeds: int = 4
    deform_rel_mag: float = 0.05
    deform_rel_falloff: float = 0.4
    ground_jitter: float = 0.02
    placement_margin: float = 1.0


def spawn_mushroom(template: MushroomTemplate, ground: Optional[TriMesh], seed=0,
                   aug: MushroomAugment = MushroomAugment(), **forced):
    """Build one augmented mushroom.

    Returns ``(cap_mesh, stem_mesh, gt)`` where ``gt`` has empty
    ``cap_point_indices`` and ``id = -1`` until the scene assigns them.
    Any random draw can be pinned through ``forced`` (``scale``,
    ``axis_factors``, ``theta_x``, ``theta_y``, ``phi``, ``xy``,
    ``z_jitter``, ``deform``).
    """
    rng = np.random.default_rng(seed)
    tilt = math.radians(aug.max_tilt_deg)
    s = forced.get("scale", rng.uniform(*aug.scale_range))
    axis_factors = np.asarray(forced.get("axis_factors", rng.uniform(*aug.axis_range, size=3)), dtype=float)
    tx = forced.get("theta_x", rng.uniform(-tilt, tilt))
    ty = forced.get("theta_y", rng.uniform(-tilt, tilt))
    phi = forced.get("phi", rng.uniform(0.0, 2.0 * np.pi))
    lim = GROUND_HALF_EXTENT - aug.placement_margin
    xy = np.asarray(forced.get("xy", rng.uniform(-lim, lim, size=2)), dtype=float)
    jitter = forced.get("z_jitter", rng.uniform(-aug.ground_jitter, aug.ground_jitter))
    deform_seed = int(rng.integers(2 ** 31))
    deform = forced.get("deform", aug.deform_seeds > 0 and aug.deform_rel_mag > 0)

    rot = RotXY(float(tx), float(ty))
    semi = s * axis_factors * np.array([1.0, 1.0, CAP_HEIGHT])
    linear = rot_matrix(rot).T @ rot_z(phi) @ np.diag(s * axis_factors)
    cap = template.cap.transformed(linear)
    stem = template.stem.transformed(linear)
    if deform:
        cap = local_deform(cap, aug.deform_seeds, aug.deform_rel_mag * s,
                           aug.deform_rel_falloff * s, seed=deform_seed)
    bottom = linear @ template.stem_bottom + np.array([xy[0], xy[1], 0.0])
    z0 = ground_height(ground, bottom[0], bottom[1]) if ground is not None else 0.0
    offset = np.array([xy[0], xy[1], z0 + jitter - bottom[2]])
    cap = TriMesh(cap.vertices + offset, cap.faces, cap.normals)
    stem = TriMesh(stem.vertices + offset, stem.faces, stem.normals)

    # the pose omits the spin about the cap axis, so the box lives in the spin-free
    # cap frame: the spun base ellipse's support widths, grown to cover the deformed vertices
    basis = rot_matrix(rot).T
    local = (cap.vertices - offset) @ basis
    c, sn = math.cos(phi), math.sin(phi)
    ext = np.array([math.hypot(semi[0] * c, semi[1] * sn), math.hypot(semi[0] * sn, semi[1] * c)])
    lo = np.minimum(local.min(axis=0), [-ext[0], -ext[1], 0.0])
    hi = np.maximum(local.max(axis=0), [ext[0], ext[1], semi[2]])
    obb = OrientedBox(offset + basis @ ((lo + hi) / 2), rot, (hi - lo) / 2)
    gt = MushroomGT(
        id=-1,
        center=offset.copy(),
        rot=rot,
        scale_s=float(0.5 * (semi[0] + semi[1])),
        scale_z=float(semi[2]),
        per_axis_scales=semi,
        cap_point_indices=np.zeros(0, dtype=np.int64),
        obb=obb,
        spin=float(phi),
    )
    return cap, stem, gt


def collision_free_place(existing, candidate: MushroomGT) -> bool:
    """True when the candidate's cap bounding sphere touches no existing one."""
    c, r = candidate.bounding_sphere
    for other in existing:
        oc, orad = other.bounding_sphere
        if np.linalg.norm(c - oc) <= r + orad:
            return False
    return True


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneConfig:
    seed: int = 0
    n_mushrooms: tuple = (5, 45)
    voxel_base: float = 0.08
    voxel_jitter: tuple = (0.8, 1.2)
    n_distractors: tuple = (0, 6)
    ground_preset: str = "A"
    ground_deform_seeds: int = 30
    ground_deform_mag: float = 0.15
    ground_deform_falloff: float = 1.5
    view_radius: tuple = (15.0, 30.0)
    max_view_tilt_deg: float = 30.0
    density: float = 4000.0
    density_jitter: tuple = (0.9, 1.1)
    min_cap_points: int = 20
    max_retries: int = 50
    hpr_radius_factor: float = 100.0
    augment: MushroomAugment = field(default_factory=MushroomAugment)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = MushroomAugment(**self.augment)
        for name in ("n_mushrooms", "voxel_jitter", "n_distractors", "view_radius", "density_jitter"):
            setattr(self, name, tuple(getattr(self, name)))
        self.augment.scale_range = tuple(self.augment.scale_range)
        self.augment.axis_range = tuple(self.augment.axis_range)
        lo, hi = self.n_mushrooms
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid mushroom count range {self.n_mushrooms}")
        if self.n_distractors[0] < 0 or self.n_distractors[1] < self.n_distractors[0]:
            raise ValueError(f"invalid distractor range {self.n_distractors}")
        if self.voxel_base <= 0:
            raise ValueError("voxel_base must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def undeformed(cls, **kw) -> "SceneConfig":
        """Mushrooms follow the template shape exactly (no deformation, no per-axis jitter)."""
        aug = MushroomAugment(axis_range=(1.0, 1.0), deform_seeds=0, deform_rel_mag=0.0)
        return cls(augment=aug, **kw)


def scene_seed(seed: int, index: int) -> int:
    """Independent per-scene seed derived from a dataset seed and scene index."""
    return int(np.random.SeedSequence((int(seed), int(index))).generate_state(1)[0])


def _majority_label(inverse: np.ndarray, labels: np.ndarray, n_cells: int) -> np.ndarray:
    width = int(labels.max()) + 2
    counts = np.bincount(inverse * width + (labels + 1), minlength=n_cells * width).reshape(n_cells, width)
    return counts.argmax(axis=1) - 1


def _finalize_labels(points, point_label, centers, min_points):
    """Drop under-populated mushrooms until every kept one survives the gap rule."""
    from .segmentation import gap_relabel_labels

    keep = np.ones(len(centers), dtype=bool)
    labels = point_label.copy()
    while True:
        counts = np.bincount(labels[labels >= 0], minlength=len(centers))
        small = keep & (counts < min_points)
        if small.any():
            keep &= ~small
            labels[np.isin(labels, np.flatnonzero(small))] = -1
        seg = gap_relabel_labels(points, labels, centers, active=keep)
        seg_counts = np.bincount(seg[seg >= 0], minlength=len(centers))
        thin = keep & (seg_counts < min_points)
        if not thin.any():
            return labels, seg, keep
        keep &= ~thin
        labels[np.isin(labels, np.flatnonzero(thin))] = -1


def _generate_once(cfg: SceneConfig, rng: np.random.Generator, template: MushroomTemplate):
    def sub():
        return int(rng.integers(2 ** 31))

    ground = make_ground(cfg.ground_preset, sub())
    ground = local_deform(ground, cfg.ground_deform_seeds, cfg.ground_deform_mag,
                          cfg.ground_deform_falloff, seed=sub())
    n_dis = int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))
    distractors = spawn_distractors(n_dis, sub(), ground)

    k = int(rng.integers(cfg.n_mushrooms[0], cfg.n_mushrooms[1] + 1))
    placed, caps, stems = [], [], []
    for i in range(k):
        for _ in range(cfg.max_retries):
            cap, stem, gt = spawn_mushroom(template, ground, sub(), cfg.augment)
            if collision_free_place(placed, gt):
                placed.append(gt)
                caps.append(cap)
                stems.append(stem)
                break
        else:
            log.info("mushroom %d not placed after %d retries", i, cfg.max_retries)

    density = cfg.density * rng.uniform(*cfg.density_jitter)
    chunks, labels = [], []
    background = [ground, *distractors, *stems]
    for mesh in background:
        pts = mesh.sample(int(round(mesh.area() * density)), rng)
        chunks.append(pts)
        labels.append(np.full(len(pts), -1, dtype=np.int64))
    for idx, cap in enumerate(caps):
        pts = cap.sample(int(round(cap.area() * density)), rng)
        chunks.append(pts)
        labels.append(np.full(len(pts), idx, dtype=np.int64))
    raw = np.vstack(chunks)
    raw_label = np.concatenate(labels)

    voxel = cfg.voxel_base * rng.uniform(*cfg.voxel_jitter)
    cells, inverse = voxel_cells(raw, voxel)
    n_cells = len(cells)
    counts = np.bincount(inverse, minlength=n_cells).astype(float)
    centroids = np.stack([np.bincount(inverse, weights=raw[:, j], minlength=n_cells) for j in range(3)],
                         axis=1) / counts[:, None]
    cell_label = _majority_label(inverse, raw_label, n_cells)

    radius = rng.uniform(*cfg.view_radius)
    tilt = rng.uniform(0.0, math.radians(cfg.max_view_tilt_deg))
    azim = rng.uniform(0.0, 2 * np.pi)
    viewpoint = radius * np.array([math.sin(tilt) * math.cos(azim), math.sin(tilt) * math.sin(azim),
                                   math.cos(tilt)])
    visible = np.sort(hidden_point_removal(centroids, viewpoint, cfg.hpr_radius_factor))
    points = centroids[visible]
    point_label = cell_label[visible]

    centers = np.array([g.center for g in placed]).reshape(-1, 3)
    point_label, seg_label, keep = _finalize_labels(points, point_label, centers, cfg.min_cap_points)
    if not keep.any():
        return None

    remap = np.full(len(placed) + 1, -1, dtype=np.int64)
    remap[np.flatnonzero(keep)] = np.arange(keep.sum())
    point_label = remap[point_label]
    seg_label = remap[seg_label]
    mushrooms = []
    for old in np.flatnonzero(keep):
        gt = placed[old]
        gt.id = int(remap[old])
        gt.cap_point_indices = np.flatnonzero(point_label == gt.id)
        mushrooms.append(gt)
    info = {"voxel_size": voxel, "viewpoint": viewpoint.tolist(), "n_placed": len(placed),
            "n_distractors": n_dis, "density": density}
    return PointCloud(points), SceneAnnotation(mushrooms, point_label, seg_label), info


def generate_scene(cfg: SceneConfig, template: Optional[MushroomTemplate] = None, return_info: bool = False):
    """Generate ``(cloud, annotation)`` for one scene; fully determined by ``cfg``."""
    template = template or make_template()
    for attempt in range(5):
        rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), attempt)))
        result = _generate_once(cfg, rng, template)
        if result is not None:
            cloud, ann, info = result
            info["attempt"] = attempt
            return (cloud, ann, info) if return_info else (cloud, ann)
        log.warning("scene seed %d attempt %d left no visible mushrooms", cfg.seed, attempt)
    raise RuntimeError(f"scene seed {cfg.seed}: no visible mushroom after 5 attempts")
