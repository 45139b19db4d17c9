import numpy as np
import pytest
from scipy.stats import chisquare

from cnm.field import NetworkParams
from cnm.geometry import DepthFrame, Intrinsics, Pose, SurfaceSampleSet
from cnm.replay import (ReplayBuffer, buffer_from_bytes, buffer_to_bytes, draw_off_surface,
                        integrate_frame, label_off_surface, sample_surface_replay)
from cnm.scene import fit_normalization


def frame_set(frame, n, dim=3):
    pts = np.column_stack([np.full(n, float(frame)), np.arange(n, dtype=float), np.zeros(n)])[:, :dim]
    return SurfaceSampleSet(pts, np.tile(np.eye(dim)[-1], (n, 1)), np.full(n, frame))


def test_fills_to_capacity_with_first_frame():
    buf = integrate_frame(ReplayBuffer(100), frame_set(0, 100), np.random.default_rng(0))
    assert len(buf) == 100 and buf.seen == 100
    np.testing.assert_array_equal(buf.points, frame_set(0, 100).points)


def test_size_is_min_of_capacity_and_seen():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(250)
    for t in range(5):
        buf.integrate(frame_set(t, 100), rng)
        assert len(buf) == min(250, 100 * (t + 1))


def test_ten_frame_shares_within_three_sigma():
    rng = np.random.default_rng(5)
    buf = ReplayBuffer(1000)
    for t in range(10):
        buf.integrate(frame_set(t, 1000), rng)
    assert len(buf) == 1000
    counts = np.bincount(buf.frames, minlength=10)
    assert np.all(np.abs(counts - 100) <= 3 * np.sqrt(1000 * 0.1 * 0.9))


def test_elements_are_exact_past_samples():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(64)
    history = []
    for t in range(6):
        s = frame_set(t, 50)
        history.append(s)
        buf.integrate(s, rng)
    allp = SurfaceSampleSet.concatenate(history)
    keys = {tuple(p) + (f,) for p, f in zip(allp.points, allp.frames)}
    assert all(tuple(p) + (f,) in keys for p, f in zip(buf.points, buf.frames))
    # a sample's frame tag matches the frame its coordinates came from
    np.testing.assert_array_equal(buf.points[:, 0].astype(int), buf.frames)


def test_same_seed_same_buffer():
    def run(seed):
        rng = np.random.default_rng(seed)
        buf = ReplayBuffer(100)
        for t in range(8):
            buf.integrate(frame_set(t, 70), rng)
        return buf
    a, b = run(3), run(3)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, run(4).points)


def test_reservoir_inclusion_is_uniform():
    # every offered sample should be kept with probability capacity / seen
    hits = np.zeros(40)
    trials = 3000
    rng = np.random.default_rng(11)
    for _ in range(trials):
        buf = ReplayBuffer(10)
        for t in range(4):
            buf.integrate(frame_set(t, 10), rng)
        hits[(buf.frames * 10 + buf.points[:, 1].astype(int))] += 1
    p = 10 / 40
    sd = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(hits - trials * p) < 4 * sd)


def test_zero_capacity_keeps_nothing():
    buf = ReplayBuffer(0).integrate(frame_set(0, 10), np.random.default_rng(0))
    assert len(buf) == 0 and buf.seen == 10


def test_negative_capacity_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer(-1)


def test_sample_single_element():
    buf = ReplayBuffer(5).integrate(frame_set(2, 1), np.random.default_rng(0))
    s = sample_surface_replay(buf, 3, np.random.default_rng(0))
    assert len(s) == 3
    np.testing.assert_array_equal(s.points, np.repeat(buf.points, 3, axis=0))


def test_sample_zero_and_empty():
    assert len(ReplayBuffer(5).sample(3, np.random.default_rng(0))) == 0
    buf = ReplayBuffer(5).integrate(frame_set(0, 5), np.random.default_rng(0))
    assert len(buf.sample(0, np.random.default_rng(0))) == 0


def test_sample_uniformity_chi_square():
    buf = ReplayBuffer(100).integrate(frame_set(0, 100), np.random.default_rng(0))
    s = buf.sample(100_000, np.random.default_rng(2))
    counts = np.bincount(s.points[:, 1].astype(int), minlength=100)
    assert chisquare(counts).pvalue > 0.01


def test_off_surface_draws():
    rng = np.random.default_rng(0)
    assert draw_off_surface(0, rng).shape == (0, 3)
    x = draw_off_surface(100_000, rng)
    assert x.shape == (100_000, 3)
    assert x.min() >= -1 and x.max() <= 1
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    with pytest.raises(ValueError):
        draw_off_surface(-1, rng)


def test_buffer_serialisation_roundtrip():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(30)
    for t in range(3):
        buf.integrate(frame_set(t, 20), rng)
    back = buffer_from_bytes(buffer_to_bytes(buf))
    assert (back.capacity, back.seen, len(back)) == (30, 60, 30)
    np.testing.assert_array_equal(back.points, buf.points.astype(np.float32))
    np.testing.assert_array_equal(back.frames, buf.frames)


# ---- labeling ------------------------------------------------------------------

K = Intrinsics(60.0, 60.0, 39.5, 29.5, 80, 60)
WALL = 2.0  # meters in front of an identity camera at the origin
BBOX = np.array([[-3.0, -3.0, -1.0], [3.0, 3.0, 5.0]])


def plane_network(transform, eps=1e-4):
    """One sine neuron that is the plane SDF f = 2 - z (normalized units) to O(eps^2)."""
    s, off = transform.scale, transform.offset
    # world sdf 2 - z  ->  normalized: s * (2 - (y_z - off_z) / s) = 2 s + off_z - y_z
    w = np.array([[0.0, 0.0, -1.0]])
    b = np.array([2.0 * s + off[2]])
    return NetworkParams.from_arrays([w, [[1.0 / eps]]], [b, [0.0]], omega0=eps)


def wall_frame():
    return DepthFrame(np.full((K.height, K.width), WALL), K, Pose.identity())


def test_label_out_of_frustum_positive_prior():
    t = fit_normalization(BBOX)
    net = plane_network(t)
    pts = t.apply([[0.0, 0.0, -0.5]])  # behind the camera, free space (f > 0)
    batch = label_off_surface(pts, net, wall_frame(), t, 0.01)
    assert batch.prev_values[0] > 0 and batch.labels[0] == 1


def test_label_in_front_overrides_negative_prior():
    t = fit_normalization(BBOX)
    # a stale network claiming everything is inside
    stale = NetworkParams.from_arrays([np.zeros((1, 3)), [[0.0]]], [[0.0], [-0.1]])
    pts = t.apply([[0.1, -0.2, 1.0]])
    batch = label_off_surface(pts, stale, wall_frame(), t, 0.01)
    assert batch.prev_values[0] < 0 and batch.labels[0] == 1


def test_accurate_prior_agrees_with_true_sign():
    t = fit_normalization(BBOX)
    net = plane_network(t)
    pts = np.random.default_rng(0).uniform(-1, 1, (20_000, 3))
    batch = label_off_surface(pts, net, wall_frame(), t, 0.01)
    truth = np.where(WALL - t.invert(pts)[:, 2] >= 0, 1, -1)
    assert len(batch) == len(pts)
    assert (batch.labels == truth).mean() >= 0.99


def test_label_empty_batch():
    t = fit_normalization(BBOX)
    batch = label_off_surface(np.zeros((0, 3)), plane_network(t), wall_frame(), t)
    assert len(batch) == 0
