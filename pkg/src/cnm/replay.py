"""Fixed-size memory of past surface observations and sign-labeled off-surface samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import NetworkParams, evaluate_batched
from .geometry import DepthFrame, SurfaceSampleSet, classify_signs
from .scene import NormalizationTransform


class ReplayBuffer:
    """Reservoir of surface samples (point, normal, source frame).

    Every sample ever offered has the same probability ``capacity / seen``
    of being stored, whatever frame it came from.
    """

    def __init__(self, capacity: int, dim: int = 3):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.dim = dim
        self.points = np.zeros((0, dim))
        self.normals = np.zeros((0, dim))
        self.frames = np.zeros(0, dtype=np.int64)
        self.seen = 0

    def __len__(self):
        return len(self.points)

    def integrate(self, samples: SurfaceSampleSet, rng: np.random.Generator) -> "ReplayBuffer":
        """Algorithm R, one sample at a time, so the result depends only on the seed."""
        n = len(samples)
        if n == 0 or self.capacity == 0:
            self.seen += n
            return self
        size = len(self)
        room = min(self.capacity - size, n)
        pts = [self.points, samples.points[:room]]
        nrm = [self.normals, samples.normals[:room]]
        frm = [self.frames, samples.frames[:room]]
        self.points = np.concatenate(pts)
        self.normals = np.concatenate(nrm)
        self.frames = np.concatenate(frm)
        self.seen += room
        if room < n:
            rest = np.arange(room, n)
            # candidate slot for the i-th remaining sample: uniform in [0, seen_i]
            seen_i = self.seen + np.arange(len(rest))
            slots = rng.integers(0, seen_i + 1)
            take = slots < self.capacity
            # later writes to the same slot must win, as in the sequential algorithm
            for src, dst in zip(rest[take], slots[take]):
                self.points[dst] = samples.points[src]
                self.normals[dst] = samples.normals[src]
                self.frames[dst] = samples.frames[src]
            self.seen += len(rest)
        return self

    def sample(self, k: int, rng: np.random.Generator) -> SurfaceSampleSet:
        """``k`` uniform draws with replacement."""
        if k <= 0 or len(self) == 0:
            return SurfaceSampleSet.empty(self.dim)
        idx = rng.integers(0, len(self), size=k)
        return SurfaceSampleSet(self.points[idx], self.normals[idx], self.frames[idx])

    def snapshot(self) -> SurfaceSampleSet:
        return SurfaceSampleSet(self.points.copy(), self.normals.copy(), self.frames.copy())

    def copy(self) -> "ReplayBuffer":
        other = ReplayBuffer(self.capacity, self.dim)
        other.points, other.normals, other.frames = self.points.copy(), self.normals.copy(), self.frames.copy()
        other.seen = self.seen
        return other


def integrate_frame(buffer: ReplayBuffer, samples: SurfaceSampleSet, rng) -> ReplayBuffer:
    return buffer.integrate(samples, rng)


def sample_surface_replay(buffer: ReplayBuffer, k: int, rng) -> SurfaceSampleSet:
    return buffer.sample(k, rng)


def draw_off_surface(k: int, rng: np.random.Generator, dim: int = 3, low: float = -1.0,
                     high: float = 1.0) -> np.ndarray:
    """``k`` points uniform in the normalized domain ``[low, high]^dim``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return rng.uniform(low, high, size=(k, dim))


@dataclass
class OffSurfaceBatch:
    points: np.ndarray  # normalized coordinates
    labels: np.ndarray  # +1 / -1
    prev_values: np.ndarray

    def __len__(self):
        return len(self.points)


def label_off_surface(points: np.ndarray, prev_params: NetworkParams, frame: DepthFrame,
                      transform: NormalizationTransform, epsilon: float = 0.01) -> OffSurfaceBatch:
    """Label normalized points with the previous network and the current depth map.

    ``epsilon`` is in meters, like the depth map.
    """
    points = np.asarray(points, dtype=np.float64)
    prev = evaluate_batched(prev_params, points) if len(points) else np.zeros(0)
    world = transform.invert(points)
    labels = classify_signs(world, frame, prev, epsilon) if len(points) else np.zeros(0, dtype=np.int8)
    return OffSurfaceBatch(points, labels, prev)


BUFFER_TAG = b"BUF1"


def buffer_to_bytes(buffer: ReplayBuffer) -> bytes:
    """``capacity, seen, size, dim`` (u64) then f32 points, f32 normals, i32 frames."""
    head = np.array([buffer.capacity, buffer.seen, len(buffer), buffer.dim], dtype="<u8").tobytes()
    return (head + buffer.points.astype("<f4").tobytes() + buffer.normals.astype("<f4").tobytes()
            + buffer.frames.astype("<i4").tobytes())


def buffer_from_bytes(payload: bytes) -> ReplayBuffer:
    capacity, seen, size, dim = (int(v) for v in np.frombuffer(payload[:32], dtype="<u8"))
    buf = ReplayBuffer(capacity, dim)
    off = 32
    n = size * dim
    buf.points = np.frombuffer(payload[off:off + 4 * n], dtype="<f4").astype(np.float64).reshape(size, dim)
    off += 4 * n
    buf.normals = np.frombuffer(payload[off:off + 4 * n], dtype="<f4").astype(np.float64).reshape(size, dim)
    off += 4 * n
    buf.frames = np.frombuffer(payload[off:off + 4 * size], dtype="<i4").astype(np.int64)
    buf.seen = seen
    return buf
