"""Dual-pathway autoregressive pose network and data-loss scenarios."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import rotmath
from .layers import (DECODERS, FUSIONS, GRUCell, JointRelationTransformer, Module, SFC,
                     TokenExpand, fuse, make_decoder)
from .numcore import Tensor
from .skeleton import NUM_JOINTS, TrackerConfig, make_rng

SIGNAL_WIDTH = 18
POSE_WIDTH = NUM_JOINTS * 18  # 396
PROLONGED_PERIOD = 80


# --------------------------------------------------------------------------
# state types
# --------------------------------------------------------------------------

@dataclass
class TrackerFrame:
    """One frame of tracker rows (|J|, 18) plus a presence bit per tracker."""

    signals: np.ndarray
    present: np.ndarray

    @classmethod
    def masked(cls, raw: np.ndarray, present: np.ndarray) -> "TrackerFrame":
        present = np.asarray(present, dtype=bool)
        return cls(np.where(present[..., None], raw, 0.0).astype(raw.dtype), present)


@dataclass
class PoseState:
    """Local 6D rotations, their frame-to-frame velocity, positions, linear velocity.

    Fields are numpy arrays or tensors with shapes (..., 22, 6|6|3|3).
    """

    rot: object
    rotvel: object
    pos: object
    vel: object

    def flat(self) -> Tensor:
        """The 396-wide recycled input, ordered [rot, rotvel, pos, vel]."""
        parts = [_as_t(self.rot), _as_t(self.rotvel), _as_t(self.pos), _as_t(self.vel)]
        lead = parts[0].shape[:-2]
        return nc.concat([nc.reshape(p, lead + (-1,)) for p in parts], axis=-1)

    def numpy(self) -> "PoseState":
        return PoseState(*(np.asarray(_as_t(v).data) for v in (self.rot, self.rotvel, self.pos, self.vel)))


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class ReliaState:
    h_x: Tensor
    h_y: Tensor
    pose: PoseState
    prev_R: Tensor  # rotation matrices of ``pose.rot`` (identity at cold start)
    prev_raw: np.ndarray | None = None
    frame: int = 0


def pose_velocities(rot: np.ndarray, pos: np.ndarray, prev_rot=None, prev_pos=None):
    """Velocity fields along the frame axis (-3) using the cold-start convention.

    Before the first frame the previous rotation is identity and the previous
    position is zero, matching what :meth:`ReliaAvatar.step` does at frame 0.
    """
    R = rotmath.rot6d_to_matrix(rot)
    Rp = np.empty_like(R)
    Rp[..., 1:, :, :, :] = R[..., :-1, :, :, :]
    Rp[..., 0, :, :, :] = np.eye(3) if prev_rot is None else rotmath.rot6d_to_matrix(prev_rot)
    rotvel = rotmath.matrix_to_rot6d(np.swapaxes(Rp, -1, -2) @ R)
    pp = np.empty_like(pos)
    pp[..., 1:, :, :] = pos[..., :-1, :, :]
    pp[..., 0, :, :] = 0.0 if prev_pos is None else prev_pos
    return rotvel, pos - pp


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "standard"  # standard | instantaneous | prolonged_train | prolonged_eval
    p: float = 0.0
    M: int = 0
    period: int = PROLONGED_PERIOD
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "instantaneous", "prolonged_train", "prolonged_eval"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"loss probability must lie in [0, 1], got {self.p}")
        if self.kind == "prolonged_eval" and not 0 < self.M < self.period:
            raise ValueError(f"M must satisfy 0 < M < {self.period}, got {self.M}")

    @classmethod
    def parse(cls, text: str, seed: int | None = None) -> "ScenarioSpec":
        """``standard``, ``instantaneous:P`` or ``prolonged:M``."""
        name, _, arg = text.partition(":")
        if name == "standard" and not arg:
            return cls("standard", seed=seed)
        if name == "instantaneous" and arg:
            return cls("instantaneous", p=float(arg), seed=seed)
        if name == "prolonged" and arg:
            return cls("prolonged_eval", M=int(arg), seed=seed)
        raise ValueError(f"bad scenario {text!r}; expected standard | instantaneous:P | prolonged:M")

    def label(self) -> str:
        if self.kind == "instantaneous":
            return f"instantaneous:{self.p:g}"
        if self.kind == "prolonged_eval":
            return f"prolonged:{self.M}"
        return self.kind


STANDARD = ScenarioSpec()
TRAIN_INSTANTANEOUS_P = 0.1


def apply_mask(x_seq: np.ndarray, masked: np.ndarray) -> np.ndarray:
    """Zero whole tracker rows where ``masked`` (shape ``x_seq.shape[:-1]``) is True."""
    return np.where(masked[..., None], 0.0, x_seq).astype(x_seq.dtype, copy=False)


def apply_instantaneous_mask(x_seq: np.ndarray, p: float, rng: np.random.Generator):
    """Independent Bernoulli(p) loss per tracker per frame.  Returns (masked, mask)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    mask = rng.random(x_seq.shape[:-1]) < p
    return apply_mask(x_seq, mask), mask


def apply_prolonged_mask_train(x_seq: np.ndarray):
    """Zero the latter half of the frame axis (-3)."""
    L = x_seq.shape[-3]
    if L % 2:
        raise ValueError(f"sequence length must be even, got {L}")
    mask = np.zeros(x_seq.shape[:-1], dtype=bool)
    mask[..., L // 2:, :] = True
    return apply_mask(x_seq, mask), mask


def prolonged_eval_frames(n_frames: int, M: int, period: int = PROLONGED_PERIOD) -> np.ndarray:
    """Boolean per frame: in every window of ``period``, the last ``M`` frames are lost."""
    if not 0 < M < period:
        raise ValueError(f"M must satisfy 0 < M < {period}, got {M}")
    return (np.arange(n_frames) % period) >= period - M


def apply_prolonged_mask_eval(x_seq: np.ndarray, M: int, period: int = PROLONGED_PERIOD):
    lost = prolonged_eval_frames(x_seq.shape[-3], M, period)
    mask = np.broadcast_to(lost[:, None], x_seq.shape[-3:-1])
    mask = np.broadcast_to(mask, x_seq.shape[:-1]).copy()
    return apply_mask(x_seq, mask), mask


def apply_scenario(x_seq: np.ndarray, spec: ScenarioSpec, rng: np.random.Generator | None = None):
    if spec.kind == "standard":
        return x_seq, np.zeros(x_seq.shape[:-1], dtype=bool)
    if spec.kind == "instantaneous":
        if rng is None:
            rng = make_rng(spec.seed or 0)
        return apply_instantaneous_mask(x_seq, spec.p, rng)
    if spec.kind == "prolonged_train":
        return apply_prolonged_mask_train(x_seq)
    return apply_prolonged_mask_eval(x_seq, spec.M, spec.period)


TRAINING_SCENARIOS = (
    ScenarioSpec("standard"),
    ScenarioSpec("instantaneous", p=TRAIN_INSTANTANEOUS_P),
    ScenarioSpec("prolonged_train"),
)


def choose_training_scenario(rng: np.random.Generator) -> ScenarioSpec:
    """Each treatment with probability 1/3."""
    return TRAINING_SCENARIOS[int(rng.integers(3))]


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    n_trackers: int = 3
    d: int = 256
    tf_layers: int = 4
    heads: int = 8
    ffn: int = 2048
    dec_hidden: int = 256
    fusion: str = "concat_feat"
    decoder: str = "sfc"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.d % 4:
            raise ValueError("d must be divisible by 4 (four equal SFC blocks)")
        TrackerConfig.with_count(self.n_trackers)

    @property
    def width(self) -> int:
        return 2 * self.d if self.fusion == "concat_feat" else self.d

    @property
    def n_tokens(self) -> int:
        return 2 * NUM_JOINTS if self.fusion == "concat_joint" else NUM_JOINTS

    @property
    def trackers(self) -> TrackerConfig:
        return TrackerConfig.with_count(self.n_trackers)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Narrow variant that trains in minutes on one CPU core."""
        base = dict(d=64, tf_layers=4, heads=4, ffn=256, dec_hidden=64)
        base.update(kw)
        return cls(**base)


class ReliaAvatar(Module):
    """Regression pathway (trackers) + prediction pathway (previous pose) -> pose."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        rng = make_rng((seed, 0))
        d, q = config.d, config.d // 4
        J = config.n_trackers
        self.reg_sfc = SFC([(6, q), (6, q), (3, q), (3, q)], rng)
        self.reg_gru = GRUCell(d, d, rng)
        self.upsample = TokenExpand(J, d, NUM_JOINTS, rng)
        n6, n3 = NUM_JOINTS * 6, NUM_JOINTS * 3
        self.pred_sfc = SFC([(n6, q), (n6, q), (n3, q), (n3, q)], rng)
        self.pred_gru = GRUCell(d, d, rng)
        self.expand = TokenExpand(1, d, NUM_JOINTS, rng)
        self.transformer = JointRelationTransformer(
            config.n_tokens, config.width, config.tf_layers, config.heads, config.ffn, rng)
        self.decoder = make_decoder(config.decoder, NUM_JOINTS, config.width, config.dec_hidden, rng)

    def initial_state(self, batch: int = 1) -> ReliaState:
        c = self.config
        dt = nc.default_dtype()
        z = lambda *s: Tensor(np.zeros(s, dtype=dt))
        pose = PoseState(z(batch, NUM_JOINTS, 6), z(batch, NUM_JOINTS, 6),
                         z(batch, NUM_JOINTS, 3), z(batch, NUM_JOINTS, 3))
        eye = Tensor(np.broadcast_to(np.eye(3, dtype=dt), (batch, NUM_JOINTS, 3, 3)).copy())
        return ReliaState(z(batch, c.n_trackers, c.d), z(batch, c.d), pose, eye)

    def step(self, x, state: ReliaState, detach_recycled: bool = True,
             attention: list | None = None) -> tuple[PoseState, ReliaState]:
        """One frame.  ``x`` is the already-masked (B, |J|, 18) signal or a TrackerFrame."""
        if isinstance(x, TrackerFrame):
            x = x.signals[None]
        raw = x.data if isinstance(x, Tensor) else np.asarray(x)
        x = _as_t(x) if isinstance(x, Tensor) else Tensor(raw)
        if x.shape[-2:] != (self.config.n_trackers, SIGNAL_WIDTH):
            raise nc.ShapeError(f"step: expected (B, {self.config.n_trackers}, 18) signals, got {x.shape}")

        h_x, _ = self.reg_gru(self.reg_sfc(x), state.h_x)
        t_x = self.upsample(h_x)

        recycled = state.pose.flat()
        if detach_recycled:
            recycled = nc.detach(recycled)
        h_y, _ = self.pred_gru(self.pred_sfc(recycled), state.h_y)
        t_y = self.expand(h_y)

        tokens = self.transformer(fuse(t_x, t_y, self.config.fusion), attention)
        if self.config.fusion == "concat_joint":
            tokens = nc.affine(nc.add(tokens[..., :NUM_JOINTS, :], tokens[..., NUM_JOINTS:, :]), 0.5)
        out = self.decoder(tokens)
        rot, pos = out[..., :6], out[..., 6:]

        if not np.isfinite(out.data).all():
            raise FloatingPointError(f"non-finite decoder output at frame {state.frame}")
        R = rotmath.gram_schmidt(rot)
        rotvel = rotmath.to_rot6d(rotmath.relative_rotation(state.prev_R, R))
        vel = nc.sub(pos, _as_t(state.pose.pos))
        pose = PoseState(rot, rotvel, pos, vel)
        return pose, ReliaState(h_x, h_y, pose, R, raw, state.frame + 1)

    def rollout(self, x_seq, scenario: ScenarioSpec = STANDARD, initial_state: ReliaState | None = None,
                rng: np.random.Generator | None = None, detach_recycled: bool = True):
        """Mask ``x_seq`` (B, T, |J|, 18) per ``scenario`` and fold :meth:`step` over it.

        Returns (list of per-frame PoseState, final state).
        """
        x_seq = np.asarray(x_seq)
        if x_seq.ndim == 3:
            x_seq = x_seq[None]
        if x_seq.shape[1] == 0:
            raise ValueError("rollout needs a non-empty sequence")
        masked, _ = apply_scenario(x_seq, scenario, rng)
        state = initial_state or self.initial_state(x_seq.shape[0])
        poses = []
        for t in range(masked.shape[1]):
            pose, state = self.step(masked[:, t], state, detach_recycled)
            poses.append(pose)
        return poses, state


def stack_poses(poses: list[PoseState], axis: int = 1) -> PoseState:
    """Stack per-frame tensor poses along a new time axis."""
    return PoseState(*(nc.stack([getattr(p, f) for p in poses], axis=axis)
                       for f in ("rot", "rotvel", "pos", "vel")))
