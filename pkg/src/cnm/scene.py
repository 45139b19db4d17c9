"""Sequence loading, synthetic analytic scenes and coordinate normalization."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import DepthFrame, Intrinsics, Pose, pixel_rays

TUM_DEPTH_SCALE = 5000.0


class ParseError(ValueError):
    pass


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def quat_to_matrix(qx, qy, qz, qw) -> np.ndarray:
    x, y, z, w = qx, qy, qz, qw
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> Tuple[float, float, float, float]:
    """Rotation matrix to ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return tuple(float(c) for c in q)


def parse_trajectory(line: str, lineno: int = 1) -> Tuple[float, Pose]:
    """Parse a TUM trajectory line ``timestamp tx ty tz qx qy qz qw``."""
    fields = line.split()
    if len(fields) != 8:
        raise ParseError(f"line {lineno}: expected 8 fields, got {len(fields)}")
    try:
        vals = [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"line {lineno}: non-finite value")
    ts, tx, ty, tz, qx, qy, qz, qw = vals
    q = np.array([qx, qy, qz, qw])
    qn = np.linalg.norm(q)
    if abs(qn - 1.0) >= 1e-3:
        raise ParseError(f"line {lineno}: quaternion norm {qn:.6f} is not close to 1")
    q /= qn
    return ts, Pose(quat_to_matrix(*q), np.array([tx, ty, tz]))


def format_trajectory(timestamp: float, pose: Pose) -> str:
    t = pose.translation
    q = matrix_to_quat(pose.rotation)
    return " ".join(repr(float(v)) for v in (timestamp, *t, *q))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` looking at ``target`` (camera x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(R, eye)


def orbit_poses(center, radius: float, height: float, n: int, arc: float = 2 * np.pi,
                start: float = 0.0) -> List[Pose]:
    """Cameras on a horizontal circle around ``center``, all looking at it."""
    center = np.asarray(center, dtype=np.float64)
    if n <= 0:
        return []
    step = arc / n if np.isclose(arc, 2 * np.pi) else (arc / max(n - 1, 1))
    poses = []
    for i in range(n):
        a = start + i * step
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at(eye, center))
    return poses


def line_poses(start, end, direction, n: int) -> List[Pose]:
    """Lateral sweep from ``start`` to ``end`` with a fixed viewing direction."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if n <= 0:
        return []
    ts = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return [look_at(start + t * (end - start), start + t * (end - start) + direction) for t in ts]


def pan_poses(eye, n: int, yaw_start: float, yaw_end: float, pitch: float = 0.0) -> List[Pose]:
    """Camera rotating in place about the vertical axis."""
    eye = np.asarray(eye, dtype=np.float64)
    yaws = np.linspace(yaw_start, yaw_end, n) if n > 1 else np.array([yaw_start])
    out = []
    for a in yaws[:n]:
        d = np.array([np.cos(a) * np.cos(pitch), np.sin(a) * np.cos(pitch), np.sin(pitch)])
        out.append(look_at(eye, eye + d))
    return out


# --------------------------------------------------------------------------
# depth images
# --------------------------------------------------------------------------

def load_depth_png(path, scale_factor: float = TUM_DEPTH_SCALE) -> np.ndarray:
    """16-bit single-channel PNG to metric depth; raw 0 stays 0 (invalid)."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise ValueError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
        raw = np.array(im)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single channel")
    if raw.dtype != np.uint16:
        if raw.min() < 0 or raw.max() > 65535:
            raise ValueError(f"{path}: values out of 16-bit range")
        raw = raw.astype(np.uint16)
    return raw.astype(np.float64) / scale_factor


def depth_to_raw(depth: np.ndarray, scale_factor: float = TUM_DEPTH_SCALE) -> np.ndarray:
    raw = np.rint(np.asarray(depth) * scale_factor)
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this scale factor")
    return raw.astype(np.uint16)


def save_depth_png(path, depth: np.ndarray, scale_factor: float = TUM_DEPTH_SCALE) -> None:
    save_raw_png(path, depth_to_raw(depth, scale_factor))


def save_raw_png(path, raw: np.ndarray) -> None:
    raw = np.asarray(raw, dtype=np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


def read_raw_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im).astype(np.uint16)


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half: Tuple[float, float, float]

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Plane:
    """Half-space ``dot(n, x) <= offset`` (solid below the plane)."""

    normal: Tuple[float, float, float]
    offset: float

    def sdf(self, x: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return x @ n - self.offset


@dataclass
class SyntheticScene:
    """Union of primitives; the SDF is the minimum over primitives.

    The min rule is exact outside the solids and only a bound inside them.
    """

    primitives: list
    bbox: Optional[np.ndarray] = None  # (2, 3) world meters

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)


def oracle_sdf(scene: SyntheticScene, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    vals = [p.sdf(x) for p in scene.primitives]
    return np.minimum.reduce(vals) if len(vals) > 1 else vals[0]


def box_room(size=(4.0, 4.0, 2.5), wall: float = 0.1, objects: Sequence = ()) -> SyntheticScene:
    """Closed room of slab walls (interior origin-centred) plus optional objects."""
    sx, sy, sz = (s / 2 for s in size)
    w = wall / 2
    prims = [
        Box((0, 0, -sz - w), (sx + wall, sy + wall, w)),
        Box((0, 0, sz + w), (sx + wall, sy + wall, w)),
        Box((-sx - w, 0, 0), (w, sy + wall, sz + wall)),
        Box((sx + w, 0, 0), (w, sy + wall, sz + wall)),
        Box((0, -sy - w, 0), (sx + wall, w, sz + wall)),
        Box((0, sy + w, 0), (sx + wall, w, sz + wall)),
    ]
    prims.extend(objects)
    pad = wall + 0.05
    bbox = np.array([[-sx - pad, -sy - pad, -sz - pad], [sx + pad, sy + pad, sz + pad]])
    return SyntheticScene(prims, bbox)


def _vec(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def parse_scene(text: str) -> SyntheticScene:
    """Parse a scene description.

    One primitive per line, ``#`` comments allowed::

        sphere center=0,0,2 radius=0.5
        box center=0,0,0 half=1,1,1
        plane normal=0,0,1 offset=-1
        bbox min=-2,-2,-2 max=2,2,2
    """
    prims, bbox = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *kvs = line.split()
        try:
            kv = dict(item.split("=", 1) for item in kvs)
            if kind == "sphere":
                prims.append(Sphere(_vec(kv["center"]), float(kv["radius"])))
            elif kind == "box":
                prims.append(Box(_vec(kv["center"]), _vec(kv["half"])))
            elif kind == "plane":
                prims.append(Plane(_vec(kv["normal"]), float(kv["offset"])))
            elif kind == "bbox":
                bbox = np.array([_vec(kv["min"]), _vec(kv["max"])])
            else:
                raise ParseError(f"line {lineno}: unknown primitive '{kind}'")
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"line {lineno}: {exc}") from None
    if not prims:
        raise ParseError("scene has no primitives")
    return SyntheticScene(prims, bbox)


def format_scene(scene: SyntheticScene) -> str:
    def v(t):
        return ",".join(repr(float(c)) for c in t)

    lines = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            lines.append(f"sphere center={v(p.center)} radius={float(p.radius)!r}")
        elif isinstance(p, Box):
            lines.append(f"box center={v(p.center)} half={v(p.half)}")
        elif isinstance(p, Plane):
            lines.append(f"plane normal={v(p.normal)} offset={float(p.offset)!r}")
    if scene.bbox is not None:
        lines.append(f"bbox min={v(scene.bbox[0])} max={v(scene.bbox[1])}")
    return "\n".join(lines) + "\n"


def load_scene(path) -> SyntheticScene:
    return parse_scene(Path(path).read_text())


def render_synthetic_depth(scene: SyntheticScene, intrinsics: Intrinsics, pose: Pose,
                           index: int = 0, timestamp: float = 0.0, tol: float = 1e-5,
                           max_steps: int = 256, max_range: float = 10.0) -> DepthFrame:
    """Sphere-trace every pixel ray against the oracle SDF; misses get depth 0."""
    rays = pixel_rays(intrinsics).reshape(-1, 3)
    ray_len = np.linalg.norm(rays, axis=1)
    dirs_cam = rays / ray_len[:, None]
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation
    if oracle_sdf(scene, origin[None])[0] <= 0:
        raise ValueError("camera must be outside all solids")

    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = oracle_sdf(scene, origin + t[active, None] * dirs[active])
        done = np.abs(d) < tol
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, d)
        keep = ~done & (t[active] < max_range)
        active = active[keep]

    depth = np.where(hit & (t < max_range), t / ray_len, 0.0)
    return DepthFrame(depth.reshape(intrinsics.height, intrinsics.width), intrinsics, pose,
                      index=index, timestamp=timestamp)


def render_sequence(scene: SyntheticScene, intrinsics: Intrinsics, poses: Sequence[Pose]) -> List[DepthFrame]:
    return [render_synthetic_depth(scene, intrinsics, p, index=i, timestamp=float(i))
            for i, p in enumerate(poses)]


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationTransform:
    """Isotropic map ``x -> x * scale + offset`` from world meters into [-1, 1]^d.

    SDF values in normalized units convert to meters by dividing by ``scale``.
    """

    scale: float
    offset: np.ndarray

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset

    def invert(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.offset) / self.scale

    def to_meters(self, value):
        return np.asarray(value) / self.scale


def fit_normalization(bbox, margin: float = 0.9) -> NormalizationTransform:
    """Map the longest bbox axis onto ``[-margin, margin]``, centred on the bbox."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, -1)
    extent = bbox[1] - bbox[0]
    if not np.all(np.isfinite(bbox)) or np.any(extent <= 0):
        raise ValueError("degenerate bounding box")
    scale = 2.0 * margin / extent.max()
    center = bbox.mean(axis=0)
    return NormalizationTransform(float(scale), -center * scale)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass
class SequenceManifest:
    """Posed depth sequence on disk.

    File layout (paths relative to the manifest's directory)::

        intrinsics fx fy cx cy width height
        depth_scale 5000
        bbox xmin ymin zmin xmax ymax zmax
        depth/000000.png  timestamp tx ty tz qx qy qz qw
    """

    intrinsics: Intrinsics
    entries: List[Tuple[str, float, Pose]] = field(default_factory=list)
    depth_scale: float = TUM_DEPTH_SCALE
    bbox: Optional[np.ndarray] = None
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def frame(self, i: int) -> DepthFrame:
        path, ts, pose = self.entries[i]
        p = self.root / path
        try:
            depth = load_depth_png(p, self.depth_scale)
        except OSError as exc:
            raise OSError(f"frame {i}: cannot read {p}: {exc}") from exc
        return DepthFrame(depth, self.intrinsics, pose, index=i, timestamp=ts)

    def frames(self) -> Iterator[DepthFrame]:
        for i in range(len(self.entries)):
            yield self.frame(i)


MANIFEST_NAME = "manifest.txt"


def write_manifest(path, manifest: SequenceManifest) -> None:
    K = manifest.intrinsics
    lines = ["# cnm sequence manifest",
             "intrinsics " + " ".join(repr(float(v)) for v in K.as_tuple()[:4]) + f" {K.width} {K.height}",
             f"depth_scale {float(manifest.depth_scale)!r}"]
    if manifest.bbox is not None:
        lines.append("bbox " + " ".join(repr(float(v)) for v in np.ravel(manifest.bbox)))
    for rel, ts, pose in manifest.entries:
        lines.append(f"{rel} {format_trajectory(ts, pose)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> SequenceManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    K, scale, bbox, entries = None, TUM_DEPTH_SCALE, None, []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        if head == "intrinsics":
            v = rest.split()
            if len(v) != 6:
                raise ParseError(f"line {lineno}: intrinsics needs 6 values")
            K = Intrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))
        elif head == "depth_scale":
            scale = float(rest)
        elif head == "bbox":
            bbox = np.array([float(v) for v in rest.split()]).reshape(2, 3)
        else:
            ts, pose = parse_trajectory(rest, lineno)
            entries.append((head, ts, pose))
    if K is None:
        raise ParseError(f"{path}: missing intrinsics header")
    for rel, _, _ in entries:
        if not (path.parent / rel).exists():
            raise FileNotFoundError(f"depth image listed in manifest does not exist: {path.parent / rel}")
    return SequenceManifest(K, entries, scale, bbox, path.parent)


def write_sequence(out_dir, frames: Sequence[DepthFrame], bbox=None,
                   depth_scale: float = TUM_DEPTH_SCALE) -> SequenceManifest:
    """Write depth PNGs plus a manifest; returns the manifest."""
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    if frames:
        K = frames[0].intrinsics
    else:
        K = Intrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
    entries = []
    for f in frames:
        rel = os.path.join("depth", f"{f.index:06d}.png")
        save_depth_png(out / rel, f.depth, depth_scale)
        entries.append((rel, f.timestamp, f.pose))
    m = SequenceManifest(K, entries, depth_scale, None if bbox is None else np.asarray(bbox), out)
    write_manifest(out / MANIFEST_NAME, m)
    return m


TRANSFORM_TAG = b"NRM1"


def transform_to_bytes(t: NormalizationTransform) -> bytes:
    off = np.asarray(t.offset, dtype="<f8")
    return np.array([t.scale, len(off)], dtype="<f8").tobytes() + off.tobytes()


def transform_from_bytes(payload: bytes) -> NormalizationTransform:
    head = np.frombuffer(payload[:16], dtype="<f8")
    off = np.frombuffer(payload[16:16 + 8 * int(head[1])], dtype="<f8").copy()
    return NormalizationTransform(float(head[0]), off)
