"""Per-frame continual training with experience replay, plus comparison baselines."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import field as fm
from .field import AdamState, LossBatch, LossWeights, NetworkParams
from .geometry import DepthFrame, SurfaceSampleSet, frame_samples
from .replay import BUFFER_TAG, ReplayBuffer, buffer_to_bytes, draw_off_surface, label_off_surface
from .scene import (TRANSFORM_TAG, NormalizationTransform, fit_normalization, transform_from_bytes,
                    transform_to_bytes)

log = logging.getLogger(__name__)

MODES = ("replay", "finetune", "retrain", "reinit")


@dataclass
class TrainConfig:
    dims: Tuple[int, ...] = (3, 256, 256, 256, 256, 1)
    omega0: float = 30.0
    epochs_per_frame: int = 1500
    first_frame_epochs: int = 10000
    learning_rate: float = 1e-4
    batch_size: int = 4096
    current_fraction: float = 0.5
    off_surface_fraction: float = 0.5
    replay_weight: float = 1.0
    label_off_surface: bool = True
    eikonal_on_surface: bool = True
    eikonal_on_replay: bool = True
    eikonal_off_surface: bool = True
    weight_data: float = 3000.0
    weight_normal: float = 100.0
    weight_eikonal: float = 50.0
    weight_off: float = 100.0
    alpha: float = 100.0
    epsilon: float = 0.01
    seed: int = 0
    frame_stride: int = 10
    pixel_stride: int = 4
    max_depth_jump: float = 0.1
    buffer_capacity: int = 0  # 0: size of the first frame's sample set
    bbox: Optional[Tuple[float, ...]] = None  # xmin ymin zmin xmax ymax zmax, meters

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.bbox is not None:
            self.bbox = tuple(float(v) for v in self.bbox)
            if len(self.bbox) != 6:
                raise ValueError("bbox needs 6 values")
        for name in ("epochs_per_frame", "first_frame_epochs", "learning_rate", "batch_size",
                     "frame_stride", "pixel_stride", "alpha"):
            if getattr(self, name) < 0 or (name in ("batch_size", "frame_stride", "pixel_stride") and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")
        if not 0 < self.current_fraction < 1:
            raise ValueError("current_fraction must lie in (0, 1)")
        if not 0 <= self.off_surface_fraction < 1:
            raise ValueError("off_surface_fraction must lie in [0, 1)")
        if self.replay_weight < 0 or self.buffer_capacity < 0 or self.epsilon < 0:
            raise ValueError("replay_weight, buffer_capacity and epsilon must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.weight_data, self.weight_normal, self.weight_eikonal, self.weight_off)

    @property
    def n_off(self) -> int:
        return int(round(self.batch_size * self.off_surface_fraction))

    @property
    def n_surface(self) -> int:
        return max(self.batch_size - self.n_off, 1)

    @property
    def n_current(self) -> int:
        return max(int(round(self.n_surface * self.current_fraction)), 1)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# ---- config file: "key = value" lines -------------------------------------

def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: TrainConfig) -> str:
    lines = ["# cnm training config"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f for f in dataclasses.fields(TrainConfig)}
    defaults = TrainConfig()
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        ref = getattr(defaults, key)
        try:
            if value.lower() == "none":
                kw[key] = None
            elif key == "dims":
                kw[key] = tuple(int(v) for v in value.split())
            elif key == "bbox":
                kw[key] = tuple(float(v) for v in value.split())
            elif isinstance(ref, bool):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value}")
                kw[key] = value.lower() in ("true", "1", "yes")
            elif isinstance(ref, int):
                kw[key] = int(value)
            else:
                kw[key] = float(value)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(format_config(cfg))


# ---- state and reports ------------------------------------------------------

@dataclass
class LossReport:
    frame: int
    mode: str
    epochs: List[dict] = field(default_factory=list)  # per-epoch mean terms
    train_set_size: int = 0
    steps: int = 0
    wall_time: float = 0.0

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


@dataclass
class MappingState:
    params: NetworkParams
    adam: AdamState
    buffer: ReplayBuffer
    transform: NormalizationTransform
    rng: np.random.Generator
    prev_params: Optional[NetworkParams] = None
    t: int = 0


def new_state(cfg: TrainConfig, transform: NormalizationTransform) -> MappingState:
    params = fm.init_siren(cfg.dims, cfg.omega0, cfg.seed)
    return MappingState(params, AdamState.for_params(params, cfg.learning_rate),
                        ReplayBuffer(cfg.buffer_capacity, cfg.dims[0]), transform,
                        np.random.default_rng(cfg.seed))


def prepare_samples(frame: DepthFrame, cfg: TrainConfig, transform: NormalizationTransform) -> SurfaceSampleSet:
    """Oriented surface samples of ``frame`` in normalized coordinates."""
    s = frame_samples(frame, cfg.pixel_stride, cfg.max_depth_jump)
    pts = transform.apply(s.points)
    if len(pts) and np.abs(pts).max() > 1.0:
        log.warning("frame %d: %d samples fall outside the normalized domain and are dropped",
                    frame.index, int((np.abs(pts) > 1.0).any(axis=1).sum()))
        keep = (np.abs(pts) <= 1.0).all(axis=1)
        return SurfaceSampleSet(pts[keep], s.normals[keep], s.frames[keep])
    return SurfaceSampleSet(pts, s.normals, s.frames)


def _episode(state: MappingState, cfg: TrainConfig, current: SurfaceSampleSet, epochs: int, *,
             n_current: int, replay: bool, labeler=None) -> Tuple[List[dict], int]:
    """Run ``epochs`` passes over ``current``; one Adam step per batch.

    Each batch holds ``n_current`` current samples, ``n_surface - n_current``
    buffer draws when ``replay`` is on, and ``n_off`` fresh off-surface points.
    """
    rng = state.rng
    n = len(current)
    rows: List[dict] = []
    if n == 0:
        return rows, 0
    n_batches = math.ceil(n / n_current)
    n_replay = cfg.n_surface - n_current if replay else 0
    dim = current.points.shape[1]
    lw = cfg.loss_weights
    steps = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        acc = dict.fromkeys((*fm.TERMS, "total"), 0.0)
        for b in range(n_batches):
            surf = current.subset(perm[b * n_current:(b + 1) * n_current])
            weights = None
            eik = np.full(len(surf), cfg.eikonal_on_surface)
            if n_replay:
                rep = state.buffer.sample(n_replay, rng)
                weights = np.concatenate([np.ones(len(surf)), np.full(len(rep), cfg.replay_weight)])
                eik = np.concatenate([eik, np.full(len(rep), cfg.eikonal_on_replay)])
                surf = SurfaceSampleSet.concatenate([surf, rep])
            off = draw_off_surface(cfg.n_off, rng, dim)
            labels = labeler(off) if labeler is not None else np.zeros(len(off), dtype=np.int8)
            batch = LossBatch(surf.points, surf.normals, off, labels, surface_weights=weights,
                              weights=lw, alpha=cfg.alpha, surface_eikonal=eik,
                              eikonal_off_surface=cfg.eikonal_off_surface)
            try:
                terms, grads = fm.loss_and_param_grads(state.params, batch)
            except fm.DivergenceError as exc:
                raise fm.DivergenceError(exc.term, f"frame {state.t}, epoch {epoch}: {exc}") from None
            fm.adam_step(state.adam, state.params, grads)
            steps += 1
            for k in acc:
                acc[k] += terms[k]
        rows.append({"epoch": epoch, **{k: v / n_batches for k, v in acc.items()}})
    return rows, steps


def _finish(state: MappingState, cfg: TrainConfig, samples: SurfaceSampleSet, report: LossReport,
            t0: float) -> Tuple[MappingState, LossReport]:
    if state.buffer.capacity == 0 and cfg.buffer_capacity == 0 and len(samples):
        state.buffer.capacity = len(samples)
    state.buffer.integrate(samples, state.rng)
    state.t += 1
    report.wall_time = time.perf_counter() - t0
    return state, report


def train_first_frame(state: MappingState, frame: DepthFrame, cfg: TrainConfig,
                      samples: Optional[SurfaceSampleSet] = None) -> Tuple[MappingState, LossReport]:
    """Initial episode: ``first_frame_epochs`` on one frame with the unlabeled off-surface term."""
    if state.t != 0:
        raise ValueError("train_first_frame expects a fresh state")
    t0 = time.perf_counter()
    if samples is None:
        samples = prepare_samples(frame, cfg, state.transform)
    report = LossReport(frame.index, "first", train_set_size=len(samples))
    if len(samples) == 0:
        log.warning("frame %d has no valid samples; skipped", frame.index)
    report.epochs, report.steps = _episode(state, cfg, samples, cfg.first_frame_epochs,
                                           n_current=cfg.n_surface, replay=False)
    return _finish(state, cfg, samples, report, t0)


def train_frame(state: MappingState, frame: DepthFrame, cfg: TrainConfig,
                samples: Optional[SurfaceSampleSet] = None, *, fresh_params: bool = False,
                mode: str = "replay") -> Tuple[MappingState, LossReport]:
    """One continual episode on a new frame.

    The network is warm-started from the previous one (unless
    ``fresh_params``), batches mix current samples with buffer replays, and
    off-surface samples are signed using the frozen previous network and the
    new depth map. The frame joins the buffer after the episode.
    """
    if state.t == 0:
        return train_first_frame(state, frame, cfg, samples)
    t0 = time.perf_counter()
    state.prev_params = state.params.copy()
    if samples is None:
        samples = prepare_samples(frame, cfg, state.transform)
    report = LossReport(frame.index, mode)
    if len(samples) == 0:
        log.warning("frame %d has no valid samples; skipped", frame.index)
        return _finish(state, cfg, samples, report, t0)
    if fresh_params:
        state.params = fm.init_siren(cfg.dims, cfg.omega0, cfg.seed)
        state.adam = AdamState.for_params(state.params, cfg.learning_rate)

    labeler = None
    if cfg.label_off_surface:
        prev, transform, eps = state.prev_params, state.transform, cfg.epsilon

        def labeler(pts):
            return label_off_surface(pts, prev, frame, transform, eps).labels

    replay = cfg.replay_weight > 0 and len(state.buffer) > 0
    report.train_set_size = len(samples) + (len(state.buffer) if replay else 0)
    report.epochs, report.steps = _episode(state, cfg, samples, cfg.epochs_per_frame,
                                           n_current=cfg.n_current, replay=replay, labeler=labeler)
    return _finish(state, cfg, samples, report, t0)


def _retrain(cfg: TrainConfig, history: List[SurfaceSampleSet], transform, index: int) -> Tuple[MappingState, LossReport]:
    """Fresh network trained jointly on every frame seen so far."""
    t0 = time.perf_counter()
    state = new_state(cfg, transform)
    pool = SurfaceSampleSet.concatenate(history)
    # from scratch at every step, so each retrain gets the full first-frame budget
    epochs = cfg.first_frame_epochs
    report = LossReport(index, "retrain", train_set_size=len(pool))
    report.epochs, report.steps = _episode(state, cfg, pool, epochs, n_current=cfg.n_surface, replay=False)
    state.t = len(history)
    report.wall_time = time.perf_counter() - t0
    return state, report


def resolve_transform(cfg: TrainConfig, bbox=None) -> NormalizationTransform:
    box = cfg.bbox if cfg.bbox is not None else bbox
    if box is None:
        raise ValueError("a scene bounding box is required (config 'bbox' or manifest)")
    return fit_normalization(np.asarray(box, dtype=np.float64).reshape(2, 3))


def config_for_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    if mode == "finetune":
        return cfg.replace(replay_weight=0.0, label_off_surface=False)
    return cfg


@dataclass
class RunResult:
    checkpoints: List[NetworkParams]
    reports: List[LossReport]
    samples: List[SurfaceSampleSet]  # normalized surface samples of each processed frame
    transform: NormalizationTransform
    buffers: List[ReplayBuffer] = field(default_factory=list)

    @property
    def cumulative_time(self) -> np.ndarray:
        return np.cumsum([r.wall_time for r in self.reports])

    @property
    def cumulative_steps(self) -> np.ndarray:
        return np.cumsum([r.steps for r in self.reports])


def run_sequence(cfg: TrainConfig, frames: Iterable[DepthFrame], mode: str = "replay",
                 out_dir=None, bbox=None) -> RunResult:
    """Train over a frame stream, keeping every ``frame_stride``-th frame.

    A checkpoint is produced after each processed frame and, when
    ``out_dir`` is given, written as ``theta_{t:04d}.cnm`` together with
    the CSV reports.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}' (expected one of {', '.join(MODES)})")
    cfg = config_for_mode(cfg, mode)
    transform = resolve_transform(cfg, bbox)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(out / "config.txt", cfg)

    state = new_state(cfg, transform)
    result = RunResult([], [], [], transform)
    for k, frame in enumerate(frames):
        if k % cfg.frame_stride:
            continue
        samples = prepare_samples(frame, cfg, transform)
        result.samples.append(samples)
        if mode == "retrain":
            state, report = _retrain(cfg, result.samples, transform, frame.index)
        else:
            state, report = train_frame(state, frame, cfg, samples, mode=mode,
                                        fresh_params=(mode == "reinit"))
        t = len(result.checkpoints)
        ckpt = fm.quantize(state.params)
        result.checkpoints.append(ckpt)
        result.reports.append(report)
        if mode != "retrain":
            result.buffers.append(state.buffer.copy())
        log.info("%s frame %d (t=%d): %d steps, loss %.4g, %.1fs", mode, frame.index, t, report.steps,
                 report.final.get("total", float("nan")), report.wall_time)
        if out is not None:
            sections = {TRANSFORM_TAG: transform_to_bytes(transform)}
            if mode != "retrain":
                sections[BUFFER_TAG] = buffer_to_bytes(state.buffer)
            try:
                fm.save_checkpoint(out / checkpoint_name(t), ckpt, sections)
            except OSError as exc:
                raise OSError(f"frame {frame.index}: cannot write checkpoint: {exc}") from exc
    if out is not None:
        write_reports(out, result.reports)
    return result


def run_baseline(mode: str, cfg: TrainConfig, frames: Iterable[DepthFrame], out_dir=None, bbox=None) -> RunResult:
    return run_sequence(cfg, frames, mode=mode, out_dir=out_dir, bbox=bbox)


def checkpoint_name(t: int) -> str:
    return f"theta_{t:04d}.cnm"


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def write_reports(out_dir, reports: Sequence[LossReport]) -> None:
    """``losses.csv`` (per epoch) and ``frames.csv`` (per frame) are deterministic;
    wall-clock times go to ``timing.csv``."""
    out = Path(out_dir)
    cols = ("epoch", "total", *fm.TERMS)
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "frame", *cols))
        for t, r in enumerate(reports):
            for row in r.epochs:
                w.writerow((t, r.frame, *(_fmt(row[c]) for c in cols)))
    with open(out / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "frame", "mode", "train_set_size", "steps", "final_total"))
        for t, r in enumerate(reports):
            w.writerow((t, r.frame, r.mode, r.train_set_size, r.steps, _fmt(r.final.get("total", float("nan")))))
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "frame", "wall_time_s", "cumulative_s"))
        cum = 0.0
        for t, r in enumerate(reports):
            cum += r.wall_time
            w.writerow((t, r.frame, f"{r.wall_time:.6f}", f"{cum:.6f}"))


def load_run(ckpt_dir):
    """Checkpoints of a run directory, in order, with the stored transform."""
    paths = sorted(Path(ckpt_dir).glob("theta_*.cnm"))
    params, transform = [], None
    for p in paths:
        net, sections = fm.load_checkpoint(p)
        params.append(net)
        if TRANSFORM_TAG in sections:
            transform = transform_from_bytes(sections[TRANSFORM_TAG])
    return params, transform
