"""Pinhole camera geometry: backprojection, normals, projection and sign labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np

POSITIVE = 1
NEGATIVE = -1


class SignLabel(IntEnum):
    Positive = POSITIVE
    Negative = NEGATIVE


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: ``x_world = R @ x_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        return self.translation


@dataclass
class DepthFrame:
    depth: np.ndarray  # (height, width) meters, 0 = invalid
    intrinsics: Intrinsics
    pose: Pose
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        K = self.intrinsics
        if self.depth.shape != (K.height, K.width):
            raise ValueError(
                f"depth map shape {self.depth.shape} does not match intrinsics {(K.height, K.width)}"
            )
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth values must be finite and non-negative")


@dataclass
class SurfaceSampleSet:
    points: np.ndarray
    normals: np.ndarray
    frames: np.ndarray = field(default=None)  # source frame index per sample

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(self.points.shape)
        if self.frames is None:
            self.frames = np.zeros(len(self.points), dtype=np.int64)
        self.frames = np.broadcast_to(np.asarray(self.frames, dtype=np.int64), (len(self.points),)).copy()

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, dim: int = 3) -> "SurfaceSampleSet":
        return cls(np.zeros((0, dim)), np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    def subset(self, idx) -> "SurfaceSampleSet":
        return SurfaceSampleSet(self.points[idx], self.normals[idx], self.frames[idx])

    @staticmethod
    def concatenate(sets) -> "SurfaceSampleSet":
        sets = list(sets)
        if not sets:
            return SurfaceSampleSet.empty()
        return SurfaceSampleSet(
            np.concatenate([s.points for s in sets]),
            np.concatenate([s.normals for s in sets]),
            np.concatenate([s.frames for s in sets]),
        )


def pixel_rays(K: Intrinsics) -> np.ndarray:
    """Unnormalised camera-frame rays ``((u-cx)/fx, (v-cy)/fy, 1)``, shape (H, W, 3)."""
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)


def camera_points(frame: DepthFrame) -> np.ndarray:
    """Per-pixel camera-frame points (H, W, 3); invalid pixels come out as zeros."""
    return pixel_rays(frame.intrinsics) * frame.depth[..., None]


def backproject(frame: DepthFrame, stride: int = 1) -> SurfaceSampleSet:
    """World-space points of all valid pixels on the ``stride`` grid.

    Normals are left as zeros; see :func:`frame_samples` for oriented samples.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pts = camera_points(frame)[::stride, ::stride]
    valid = frame.depth[::stride, ::stride] > 0
    world = frame.pose.to_world(pts[valid])
    return SurfaceSampleSet(world, np.zeros_like(world), np.full(len(world), frame.index))


def estimate_normals(frame: DepthFrame, max_depth_jump: float = 0.1):
    """Camera-frame normals from central differences of backprojected neighbours.

    Returns ``(normals, valid)`` with ``normals`` of shape (H, W, 3). A pixel gets
    a normal only if it and its four neighbours are valid, the neighbours lie
    within ``max_depth_jump`` (relative) of its depth, and the cross product is
    not degenerate. Normals point toward the camera.
    """
    d = frame.depth
    P = camera_points(frame)
    H, W = d.shape
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, valid

    c = d[1:-1, 1:-1]
    left, right = d[1:-1, :-2], d[1:-1, 2:]
    up, down = d[:-2, 1:-1], d[2:, 1:-1]
    ok = (c > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    if max_depth_jump is not None:
        lim = max_depth_jump * c
        for nb in (left, right, up, down):
            ok &= np.abs(nb - c) <= lim

    du = P[1:-1, 2:] - P[1:-1, :-2]
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    # orient toward the camera: dot(n, -p) > 0
    flip = np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1]) > 0
    n[flip] *= -1.0
    ok &= np.abs(np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1])) > 0

    normals[1:-1, 1:-1][ok] = n[ok]
    valid[1:-1, 1:-1] = ok
    return normals, valid


def frame_samples(frame: DepthFrame, stride: int = 1, max_depth_jump: float = 0.1) -> SurfaceSampleSet:
    """Oriented world-space surface samples (points + unit normals) of one frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    normals, valid = estimate_normals(frame, max_depth_jump)
    P = camera_points(frame)
    sel = np.zeros_like(valid)
    sel[::stride, ::stride] = True
    sel &= valid
    pts = frame.pose.to_world(P[sel])
    nrm = normals[sel] @ frame.pose.rotation.T
    return SurfaceSampleSet(pts, nrm, np.full(len(pts), frame.index))


class Projection(NamedTuple):
    u: int
    v: int
    z: float
    depth: float


def project_points(points: np.ndarray, frame: DepthFrame):
    """Vectorised projection of world points into ``frame``.

    Returns ``(u, v, z, depth, inside)``; ``depth`` is the measured depth at the
    nearest pixel and ``inside`` is False for points behind the camera, off the
    image, or landing on an invalid measurement.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    K = frame.intrinsics
    cam = frame.pose.to_camera(pts)
    z = cam[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = np.rint(cam[:, 0] / zs * K.fx + K.cx)
    v = np.rint(cam[:, 1] / zs * K.fy + K.cy)
    on_img = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    ui = np.where(on_img, u, 0).astype(np.int64)
    vi = np.where(on_img, v, 0).astype(np.int64)
    depth = np.where(on_img, frame.depth[vi, ui], 0.0)
    inside = on_img & (depth > 0)
    return ui, vi, z, depth, inside


def project(point, frame: DepthFrame) -> Optional[Projection]:
    """Project one world point; ``None`` means the point is outside the frustum."""
    u, v, z, depth, inside = project_points(np.asarray(point)[None], frame)
    if not inside[0]:
        return None
    return Projection(int(u[0]), int(v[0]), float(z[0]), float(depth[0]))


def classify_signs(points: np.ndarray, frame: DepthFrame, prev_values: np.ndarray,
                   epsilon: float = 0.01) -> np.ndarray:
    """Sign labels (+1/-1) for off-surface world points.

    Positive when the previous network says positive, or when the point is
    observed in front of the measured surface (beyond ``epsilon``). Remaining
    points follow the previous network's sign, with exact zeros positive.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    prev = np.asarray(prev_values, dtype=np.float64).reshape(-1)
    _, _, z, depth, inside = project_points(points, frame)
    in_front = inside & (z < depth - epsilon)
    behind = inside & (z > depth + epsilon)
    labels = np.full(len(prev), POSITIVE, dtype=np.int8)
    negative = prev < 0
    # observed-behind points with a negative prior, plus every unobserved or
    # in-band point whose prior is negative
    labels[negative & behind] = NEGATIVE
    labels[negative & ~in_front & ~behind] = NEGATIVE
    labels[(prev > 0) | in_front] = POSITIVE
    return labels


def classify_sign(point, frame: DepthFrame, prev_value: float, epsilon: float = 0.01) -> SignLabel:
    return SignLabel(int(classify_signs(np.asarray(point)[None], frame, [prev_value], epsilon)[0]))
