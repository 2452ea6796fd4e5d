"""Pose metrics, evaluation protocols, prediction-after-loss decay and latency benchmark."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from . import rotmath
from .model import ReliaAvatar, ScenarioSpec, TrackerFrame, apply_mask, apply_scenario, stack_poses
from .skeleton import DEFAULT_TREE, MotionSequence, extract_tracker_stream, forward_kinematics, make_rng, motion_targets

DECAY_OFFSETS = (1, 3, 7, 10, 20, 30, 40)
DEFAULT_RUNS = 5

CONVENTIONS = {
    "mpjpe": "world frame, no alignment; predicted positions are FK of predicted local rotations "
             "placed at the decoded root position",
    "mpjre": "geodesic angle of local rotations (joint 0 carries the global orientation)",
    "mpjve": "frame differences times fps, frames >= 1",
    "masked_frames": "included in every metric",
}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: prediction {a.shape} vs ground truth {b.shape}")
    if a.size == 0:
        raise ValueError(f"{what}: empty input")


def mpjpe(pred_pos, gt_pos) -> float:
    """Mean per-joint position error in cm; inputs (..., 22, 3) in metres."""
    pred_pos, gt_pos = np.asarray(pred_pos, dtype=np.float64), np.asarray(gt_pos, dtype=np.float64)
    _check_pair(pred_pos, gt_pos, "mpjpe")
    return float(np.linalg.norm(pred_pos - gt_pos, axis=-1).mean() * 100.0)


def _as_matrices(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return rotmath.rot6d_to_matrix(r) if r.shape[-1] == 6 else r


def mpjre(pred_rots, gt_rots) -> float:
    """Mean per-joint geodesic rotation error in degrees; 6D (..., 6) or matrices (..., 3, 3)."""
    a, b = _as_matrices(pred_rots), _as_matrices(gt_rots)
    _check_pair(a, b, "mpjre")
    return float(rotmath.geodesic_angle_deg(a, b).mean())


def mpjve(pred_pos, gt_pos, fps: float) -> float:
    """Mean per-joint velocity error in cm/s; frame axis is -3."""
    pred_pos, gt_pos = np.asarray(pred_pos, dtype=np.float64), np.asarray(gt_pos, dtype=np.float64)
    _check_pair(pred_pos, gt_pos, "mpjve")
    if pred_pos.ndim < 3 or pred_pos.shape[-3] < 2:
        raise ValueError("mpjve needs at least two frames")
    dv = (np.diff(pred_pos, axis=-3) - np.diff(gt_pos, axis=-3)) * fps
    return float(np.linalg.norm(dv, axis=-1).mean() * 100.0)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    protocol: str
    mpjre: float
    mpjpe: float
    mpjve: float
    params: dict = field(default_factory=dict)
    runs: int = 1
    seeds: list = field(default_factory=list)
    clips: int = 0
    frames: int = 0
    per_run: list = field(default_factory=list)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mpjre", "mpjpe", "mpjve"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'protocol':<20} {'MPJRE [deg]':>12} {'MPJPE [cm]':>11} {'MPJVE [cm/s]':>13} {'runs':>5}"
        row = f"{self.protocol:<20} {self.mpjre:>12.3f} {self.mpjpe:>11.3f} {self.mpjve:>13.3f} {self.runs:>5d}"
        return head + "\n" + row


@dataclass
class _Sums:
    """Running sums so that metrics pool every frame of every clip."""

    pos: float = 0.0
    n_pos: int = 0
    rot: float = 0.0
    n_rot: int = 0
    vel: float = 0.0
    n_vel: int = 0
    clips: int = 0
    frames: int = 0

    def add(self, pred_R, gt_R, pred_P, gt_P, fps: float) -> None:
        d = np.linalg.norm(pred_P - gt_P, axis=-1)
        self.pos += float(d.sum()) * 100.0
        self.n_pos += d.size
        ang = rotmath.geodesic_angle_deg(pred_R, gt_R)
        self.rot += float(ang.sum())
        self.n_rot += ang.size
        dv = np.linalg.norm((np.diff(pred_P, axis=-3) - np.diff(gt_P, axis=-3)) * fps, axis=-1)
        self.vel += float(dv.sum()) * 100.0
        self.n_vel += dv.size
        self.clips += pred_P.shape[0]
        self.frames += pred_P.shape[0] * pred_P.shape[1]

    def metrics(self) -> tuple[float, float, float]:
        return self.rot / self.n_rot, self.pos / self.n_pos, self.vel / max(self.n_vel, 1)


# --------------------------------------------------------------------------
# inference over clips
# --------------------------------------------------------------------------

def _group_by_length(motions: Sequence[MotionSequence]) -> list[list[MotionSequence]]:
    groups: dict[tuple, list] = {}
    for m in motions:
        groups.setdefault((m.num_frames, m.fps), []).append(m)
    return [groups[k] for k in sorted(groups)]


def predict(model: ReliaAvatar, x_seq: np.ndarray):
    """Roll the model over already-masked signals (B, T, |J|, 18) without recording.

    Returns predicted local rotation matrices and FK positions, (B, T, 22, 3, 3)
    and (B, T, 22, 3), plus the raw decoded pose.
    """
    with nc.no_record():
        state = model.initial_state(x_seq.shape[0])
        poses = []
        for t in range(x_seq.shape[1]):
            pose, state = model.step(x_seq[:, t], state)
            poses.append(pose)
        P = stack_poses(poses)
    rot = P.rot.data.astype(np.float64)
    root = P.pos.data[..., 0, :].astype(np.float64)
    R = rotmath.rot6d_to_matrix(rot)
    _, pos = forward_kinematics(DEFAULT_TREE, R, root)
    return R, pos, P


def _prepare(model: ReliaAvatar, group: Sequence[MotionSequence]):
    dt = nc.default_dtype()
    x = np.stack([extract_tracker_stream(m, model.config.trackers) for m in group]).astype(dt)
    gt_R = np.stack([rotmath.rot6d_to_matrix(m.local_rot6d) for m in group])
    gt_P = np.stack([motion_targets(m)["pos"] for m in group])
    return x, gt_R, gt_P


def _as_spec(protocol) -> ScenarioSpec:
    return ScenarioSpec.parse(protocol) if isinstance(protocol, str) else protocol


def run_protocol(model: ReliaAvatar, motions: Sequence[MotionSequence], protocol="standard",
                 runs: int = DEFAULT_RUNS, seed: int = 0, config: dict | None = None) -> MetricReport:
    """Evaluate under one data-loss scenario.

    ``standard`` and ``prolonged:M`` are single deterministic passes;
    ``instantaneous:P`` averages ``runs`` passes with seeds seed, seed+1, ...
    """
    if not motions:
        raise ValueError("empty evaluation dataset")
    spec = _as_spec(protocol)
    prepared = [_prepare(model, g) + (g[0].fps,) for g in _group_by_length(motions)]
    seeds = [seed + i for i in range(runs)] if spec.kind == "instantaneous" else []
    if spec.kind == "instantaneous" and runs < 1:
        raise ValueError("runs must be >= 1")

    per_run = []
    for s in (seeds or [None]):
        sums = _Sums()
        rng = make_rng(s) if s is not None else None
        for x, gt_R, gt_P, fps in prepared:
            masked, _ = apply_scenario(x, spec, rng)
            R, P, _ = predict(model, masked)
            sums.add(R, gt_R, P, gt_P, fps)
        per_run.append(sums.metrics())
    # fsum is exactly rounded, so the average does not depend on seed order
    avg = [math.fsum(r[i] for r in per_run) / len(per_run) for i in range(3)]
    params = {"p": spec.p} if spec.kind == "instantaneous" else {"M": spec.M, "period": spec.period} \
        if spec.kind == "prolonged_eval" else {}
    return MetricReport(spec.label(), *avg, params=params, runs=len(per_run), seeds=seeds,
                        clips=sums.clips, frames=sums.frames,
                        per_run=[dict(zip(("mpjre", "mpjpe", "mpjve"), r)) for r in per_run],
                        config=dict(config or {}))


# --------------------------------------------------------------------------
# prediction after signal loss
# --------------------------------------------------------------------------

@dataclass
class DecayReport:
    offsets: list
    mpjpe: list
    warmup: int
    span: int
    clips: int
    interruptions: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = "offset      " + " ".join(f"{o:>7d}" for o in self.offsets)
        row = "MPJPE [cm]  " + " ".join(f"{v:>7.3f}" for v in self.mpjpe)
        return head + "\n" + row


def interruption_schedule(n_frames: int, warmup: int = 60, span: int = 40) -> np.ndarray:
    """Frames since signal loss began (1-based) or 0 while signals are present.

    Cycles of ``warmup`` tracked frames followed by ``span`` lost frames.
    """
    if warmup < 1 or span < 1:
        raise ValueError("warmup and span must be positive")
    phase = np.arange(n_frames) % (warmup + span)
    return np.where(phase >= warmup, phase - warmup + 1, 0)


def prediction_decay(model: ReliaAvatar, motions: Sequence[MotionSequence],
                     offsets: Sequence[int] = DECAY_OFFSETS, warmup: int = 60, span: int = 40,
                     config: dict | None = None) -> DecayReport:
    """MPJPE at given frame offsets after all trackers drop out.

    Each clip alternates ``warmup`` tracked frames and ``span`` lost frames;
    errors at each offset are pooled over every interruption of every clip.
    """
    if not motions:
        raise ValueError("empty evaluation dataset")
    if max(offsets) > span:
        raise ValueError(f"offset {max(offsets)} exceeds the loss span {span}")
    sums = np.zeros(len(offsets))
    counts = np.zeros(len(offsets), dtype=np.int64)
    clips = interruptions = 0
    for group in _group_by_length(motions):
        x, _, gt_P = _prepare(model, group)
        since = interruption_schedule(x.shape[1], warmup, span)
        mask = np.broadcast_to((since > 0)[None, :, None], x.shape[:-1])
        _, P, _ = predict(model, apply_mask(x, mask))
        err = np.linalg.norm(P - gt_P, axis=-1).mean(axis=-1) * 100.0  # (B, T)
        for i, o in enumerate(offsets):
            frames = np.flatnonzero(since == o)
            sums[i] += err[:, frames].sum()
            counts[i] += err[:, frames].size
        clips += len(group)
        interruptions += len(group) * int(np.count_nonzero(since == 1))
    if np.any(counts == 0):
        raise ValueError("clips too short for one full interruption; need warmup + span frames")
    return DecayReport(list(offsets), (sums / counts).tolist(), warmup, span, clips, interruptions,
                       dict(config or {}))


# --------------------------------------------------------------------------
# latency
# --------------------------------------------------------------------------

@dataclass
class BenchResult:
    mean_ms: float
    fps: float
    runs: int
    warmup: int
    parameters: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def bench_fps(model: ReliaAvatar, warmup: int = 100, runs: int = 10000,
              config: dict | None = None) -> BenchResult:
    """Mean single-stream step latency on zero input with the state threaded through."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    J = model.config.n_trackers
    dt = nc.default_dtype()
    frame = TrackerFrame.masked(np.zeros((J, 18), dtype=dt), np.ones(J, dtype=bool))
    x = frame.signals[None]
    with nc.no_record():
        state = model.initial_state(1)
        for _ in range(warmup):
            _, state = model.step(x, state)
        t0 = time.perf_counter()
        for _ in range(runs):
            _, state = model.step(x, state)
        elapsed = time.perf_counter() - t0
    mean_ms = elapsed / runs * 1000.0
    return BenchResult(mean_ms, 1000.0 / mean_ms, runs, warmup, model.num_parameters(), dict(config or {}))
