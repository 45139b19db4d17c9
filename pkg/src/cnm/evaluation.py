"""Accuracy heatmaps, forgetting curves, mesh extraction and mesh error."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .field import NetworkParams, evaluate_batched
from .scene import NormalizationTransform

SdfFn = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------
# heatmap / forgetting
# --------------------------------------------------------------------------

@dataclass
class HeatmapMatrix:
    """``mean[m, n]`` / ``std[m, n]``: |f| on frame-m points under checkpoint n (meters).

    Entries with ``n >= m`` measure memory (the frame was seen); ``n < m``
    measures prediction of a frame not yet observed.
    """

    mean: np.ndarray
    std: np.ndarray

    @property
    def size(self) -> int:
        return self.mean.shape[0]

    def memory_mask(self) -> np.ndarray:
        m, n = np.indices(self.mean.shape)
        return n >= m

    def memory_summary(self) -> Tuple[float, float]:
        """Overall mean and std of the memory entries."""
        mask = self.memory_mask()
        return float(self.mean[mask].mean()), float(self.std[mask].mean())


def sdf_error_heatmap(checkpoints: Sequence[NetworkParams], frame_points: Sequence[np.ndarray],
                      scale: float = 1.0) -> HeatmapMatrix:
    """Heatmap over T checkpoints and T point sets (normalized coordinates).

    Values are divided by ``scale`` (the normalization factor) to give meters.
    """
    if len(checkpoints) != len(frame_points):
        raise ValueError("need one point set per checkpoint")
    T = len(checkpoints)
    mean = np.zeros((T, T))
    std = np.zeros((T, T))
    for n, params in enumerate(checkpoints):
        for m, pts in enumerate(frame_points):
            if len(pts) == 0:
                continue
            err = np.abs(evaluate_batched(params, pts)) / scale
            mean[m, n] = err.mean()
            std[m, n] = err.std()
    return HeatmapMatrix(mean, std)


def forgetting_curve(checkpoints: Sequence[NetworkParams], frame0_points: np.ndarray,
                     threshold: float = 0.01) -> np.ndarray:
    """Fraction of first-frame points with ``|f| < threshold`` (normalized units) per checkpoint."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    out = np.zeros(len(checkpoints))
    if len(frame0_points) == 0:
        return out
    for t, params in enumerate(checkpoints):
        out[t] = float((np.abs(evaluate_batched(params, frame0_points)) < threshold).mean())
    return out


def write_matrix_csv(path, matrix: np.ndarray, label: str = "m") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label] + [f"n{n}" for n in range(matrix.shape[1])])
        for m, row in enumerate(matrix):
            w.writerow([m] + [format(float(v), ".17g") for v in row])


def write_curve_csv(path, values: Sequence[float], column: str = "fraction") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", column])
        for t, v in enumerate(values):
            w.writerow([t, format(float(v), ".17g")])


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    normals: Optional[np.ndarray] = None  # (V, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def __len__(self):
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def translated(self, delta) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(delta, dtype=np.float64), self.faces.copy(),
                            None if self.normals is None else self.normals.copy())


@dataclass
class Grid:
    origin: np.ndarray
    spacing: np.ndarray
    shape: Tuple[int, int, int]

    def points(self) -> np.ndarray:
        axes = [self.origin[i] + self.spacing[i] * np.arange(self.shape[i]) for i in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)


def make_grid(bbox, resolution: Union[int, Sequence[int]]) -> Grid:
    """Sampling lattice anchored at the bbox minimum corner.

    A scalar ``resolution`` is the sample count along the longest bbox axis;
    the cells are cubes and the shorter axes get just enough samples to
    cover the box (so a cubic bbox is spanned corner to corner). A triple
    gives the per-axis sample counts over the exact bbox.
    """
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if np.any(bbox[1] <= bbox[0]):
        raise ValueError("degenerate bounding box")
    extent = bbox[1] - bbox[0]
    if np.ndim(resolution) == 0:
        if int(resolution) < 2:
            raise ValueError("resolution must be at least 2 per axis")
        h = extent.max() / (int(resolution) - 1)
        res = np.ceil(extent / h - 1e-9).astype(np.int64) + 1
        return Grid(bbox[0].copy(), np.full(3, h), tuple(int(r) for r in np.maximum(res, 2)))
    res = np.asarray(resolution, dtype=np.int64).reshape(3)
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    return Grid(bbox[0].copy(), extent / (res - 1), tuple(int(r) for r in res))


def network_sdf(params: NetworkParams, transform: Optional[NormalizationTransform] = None) -> SdfFn:
    """World-space SDF in meters backed by a network trained in normalized coordinates."""
    if transform is None:
        return lambda pts: evaluate_batched(params, pts)
    return lambda pts: evaluate_batched(params, transform.apply(pts)) / transform.scale


def _as_sdf(field, transform) -> SdfFn:
    if isinstance(field, NetworkParams):
        return network_sdf(field, transform)
    return field


def sample_grid(field, grid: Grid, transform: Optional[NormalizationTransform] = None) -> np.ndarray:
    sdf = _as_sdf(field, transform)
    return np.asarray(sdf(grid.points()), dtype=np.float64).reshape(grid.shape)


def mesh_from_volume(volume: np.ndarray, grid: Grid, level: float = 0.0) -> Tuple[TriangleMesh, np.ndarray]:
    """Marching cubes with linear edge interpolation.

    Returns the mesh (world coordinates, normals along +grad f) and the
    integer cell index of each face.
    """
    if not (np.nanmin(volume) < level < np.nanmax(volume)):
        return TriangleMesh.empty(), np.zeros((0, 3), dtype=np.int64)
    try:
        verts, faces, normals, _ = marching_cubes(volume, level=level, gradient_direction="ascent",
                                                  allow_degenerate=False)
    except (RuntimeError, ValueError):
        return TriangleMesh.empty(), np.zeros((0, 3), dtype=np.int64)
    verts = verts.astype(np.float64)
    faces = faces.astype(np.int64)
    tri = verts[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area2 > 1e-12]
    cells = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
    cells = np.clip(cells, 0, np.asarray(volume.shape) - 2)
    # ascent gradient gives normals toward increasing f; skimage reports them
    # the other way round, so flip
    normals = -normals.astype(np.float64)
    world = grid.origin + verts * grid.spacing
    mesh = TriangleMesh(world, faces, normals)
    return _orient(mesh), cells


def _orient(mesh: TriangleMesh) -> TriangleMesh:
    """Make face winding agree with the vertex normals (counter-clockwise seen from outside)."""
    if len(mesh.faces) == 0:
        return mesh
    tri = mesh.vertices[mesh.faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = mesh.normals[mesh.faces].sum(axis=1)
    flip = np.einsum("ij,ij->i", fn, vn) < 0
    faces = mesh.faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(mesh.vertices, faces, mesh.normals)


def _compact(mesh: TriangleMesh, keep: np.ndarray) -> TriangleMesh:
    faces = mesh.faces[keep]
    if len(faces) == 0:
        return TriangleMesh.empty()
    used, inverse = np.unique(faces.ravel(), return_inverse=True)
    normals = None if mesh.normals is None else mesh.normals[used]
    return TriangleMesh(mesh.vertices[used], inverse.reshape(-1, 3), normals)


def extract_mesh(field, bbox, resolution, transform: Optional[NormalizationTransform] = None) -> TriangleMesh:
    """Zero level set of ``field`` (network or callable SDF) over a bbox grid."""
    grid = make_grid(bbox, resolution)
    mesh, _ = mesh_from_volume(sample_grid(field, grid, transform), grid)
    return mesh


# --------------------------------------------------------------------------
# occupancy masking
# --------------------------------------------------------------------------

_NEIGHBORS = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class VoxelMask:
    voxel_size: float
    origin: np.ndarray
    occupied: np.ndarray  # (K, 3) int64, sorted unique rows

    def __len__(self):
        return len(self.occupied)

    def _keys(self, idx: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(idx, dtype=np.int64).view([("", np.int64)] * 3).ravel()

    def contains(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        if len(self.occupied) == 0:
            return np.zeros(len(idx), dtype=bool)
        return np.isin(self._keys(idx), self._keys(self.occupied))

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)


def occupied_voxel_mask(points: np.ndarray, voxel_size: float, origin=(0.0, 0.0, 0.0),
                        dilate: int = 1) -> VoxelMask:
    """Voxels holding at least one observed point, grown by ``dilate`` rings."""
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return VoxelMask(float(voxel_size), origin, np.zeros((0, 3), dtype=np.int64))
    idx = np.unique(np.floor((pts - origin) / voxel_size).astype(np.int64), axis=0)
    for _ in range(dilate):
        idx = np.unique((idx[:, None, :] + _NEIGHBORS[None]).reshape(-1, 3), axis=0)
    return VoxelMask(float(voxel_size), origin, idx)


def aligned_mask(points: np.ndarray, bbox, resolution, cells_per_voxel: int = 1, dilate: int = 1) -> VoxelMask:
    """Mask whose voxels are ``cells_per_voxel`` grid cells wide, anchored at the grid origin.

    Needs cubic cells, which a scalar ``resolution`` always gives.
    """
    grid = make_grid(bbox, resolution)
    if not np.allclose(grid.spacing, grid.spacing[0]):
        raise ValueError("aligned masks need isotropic grid spacing")
    return occupied_voxel_mask(points, cells_per_voxel * grid.spacing[0], grid.origin, dilate)


def masked_extract_mesh(field, bbox, resolution, mask: VoxelMask,
                        transform: Optional[NormalizationTransform] = None) -> TriangleMesh:
    """Marching cubes restricted to grid cells lying in occupied voxels."""
    grid = make_grid(bbox, resolution)
    ratio = mask.voxel_size / grid.spacing
    shift = (grid.origin - mask.origin) / grid.spacing
    if not (np.allclose(ratio, np.rint(ratio), atol=1e-6) and np.all(np.rint(ratio) >= 1)
            and np.allclose(shift, np.rint(shift), atol=1e-6)):
        raise ValueError("mask voxels must be an integer number of grid cells and share the grid lattice")
    if len(mask) == 0:
        return TriangleMesh.empty()
    mesh, cells = mesh_from_volume(sample_grid(field, grid, transform), grid)
    if len(mesh) == 0:
        return mesh
    voxel = np.floor_divide(cells + np.rint(shift).astype(np.int64), np.rint(ratio).astype(np.int64))
    return _compact(mesh, mask.contains(voxel))


# --------------------------------------------------------------------------
# cloud-to-mesh distance
# --------------------------------------------------------------------------

def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points ``p`` to triangles ``(a, b, c)`` (row-wise)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        closest = a + ab * v[:, None] + ac * w[:, None]

        # edge regions, then vertex regions; later assignments take precedence
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        closest[m] = (b + (c - b) * t[:, None])[m]
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        closest[m] = (a + ac * t[:, None])[m]
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        closest[m] = (a + ab * t[:, None])[m]
    m = (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    m = (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    return np.linalg.norm(p - closest, axis=1)


def cloud_to_mesh_distances(mesh: TriangleMesh, points: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    """Distance from every point to its nearest triangle.

    Candidate triangles come from a KD-tree over centroids: the nearest
    vertex bounds the answer, and any closer triangle must have its centroid
    within that bound plus the largest centroid-to-corner radius.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(mesh) == 0 or len(pts) == 0:
        raise ValueError("mesh and reference points must be non-empty")
    tri = mesh.triangles()
    cent = tri.mean(axis=1)
    rad = np.linalg.norm(tri - cent[:, None], axis=2).max()
    used = np.unique(mesh.faces)
    upper, _ = cKDTree(mesh.vertices[used]).query(pts)
    cands = cKDTree(cent).query_ball_point(pts, upper + rad + 1e-12)
    counts = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(pts))
    owner = np.repeat(np.arange(len(pts)), counts)
    faces = np.fromiter((f for c in cands for f in c), dtype=np.int64, count=int(counts.sum()))
    best = upper.copy()
    for s in range(0, len(owner), chunk):
        o, f = owner[s:s + chunk], faces[s:s + chunk]
        d = point_triangle_distance(pts[o], tri[f, 0], tri[f, 1], tri[f, 2])
        np.minimum.at(best, o, d)
    return best


def mesh_to_cloud_error(mesh: TriangleMesh, points: np.ndarray) -> Tuple[float, float]:
    """Mean and std of the point-to-mesh distance (one-directional: cloud to mesh)."""
    d = cloud_to_mesh_distances(mesh, points)
    return float(d.mean()), float(d.std())


def write_ply(path, mesh: TriangleMesh) -> None:
    """ASCII PLY with vertex normals (zeros when absent)."""
    normals = mesh.normals if mesh.normals is not None else np.zeros_like(mesh.vertices)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, n in zip(mesh.vertices, normals):
            fh.write("%.9g %.9g %.9g %.6g %.6g %.6g\n" % (*v, *n))
        for f in mesh.faces:
            fh.write("3 %d %d %d\n" % tuple(f))


def read_ply(path) -> TriangleMesh:
    lines = Path(path).read_text().splitlines()
    nv = nf = 0
    i = 0
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        i += 1
    body = lines[i + 1:]
    vals = np.array([[float(x) for x in l.split()] for l in body[:nv]]).reshape(nv, 6)
    faces = np.array([[int(x) for x in l.split()[1:4]] for l in body[nv:nv + nf]], dtype=np.int64).reshape(nf, 3)
    return TriangleMesh(vals[:, :3], faces, vals[:, 3:])


# --------------------------------------------------------------------------
# slices
# --------------------------------------------------------------------------

AXES = {"x": 0, "y": 1, "z": 2}


def export_sdf_slice(field, bbox, axis: str, offset: float, resolution: int,
                     transform: Optional[NormalizationTransform] = None) -> np.ndarray:
    """Raster of f on the plane ``axis = offset`` inside bbox.

    Rows follow the second remaining axis, columns the first (for ``z``:
    rows = y, cols = x), row-major. Values are in the field's units.
    """
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if axis not in AXES:
        raise ValueError("axis must be one of x, y, z")
    k = AXES[axis]
    if not bbox[0, k] <= offset <= bbox[1, k]:
        raise ValueError(f"slice offset {offset} lies outside the bbox along {axis}")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    a, b = [i for i in range(3) if i != k]
    ua = np.linspace(bbox[0, a], bbox[1, a], resolution)
    ub = np.linspace(bbox[0, b], bbox[1, b], resolution)
    B, A = np.meshgrid(ub, ua, indexing="ij")
    pts = np.zeros((resolution * resolution, 3))
    pts[:, a] = A.ravel()
    pts[:, b] = B.ravel()
    pts[:, k] = offset
    sdf = _as_sdf(field, transform)
    return np.asarray(sdf(pts), dtype=np.float64).reshape(resolution, resolution)


def slice_to_gray16(raster: np.ndarray, limit: float) -> np.ndarray:
    """Value-to-gray mapping: ``-limit -> 0``, ``0 -> 32768``, ``+limit -> 65535``, clipped."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    g = (np.clip(raster / limit, -1.0, 1.0) + 1.0) * 32767.5
    return np.rint(g).astype(np.uint16)


def write_pgm16(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint16)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(gray.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.uint16)
