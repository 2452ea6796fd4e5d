"""22-joint kinematic tree, forward kinematics and synthetic motion.

Joint order follows the usual SMPL body convention::

    0 pelvis   1 l_hip    2 r_hip    3 spine1   4 l_knee   5 r_knee
    6 spine2   7 l_ankle  8 r_ankle  9 spine3  10 l_foot  11 r_foot
   12 neck    13 l_collar 14 r_collar 15 head  16 l_shoulder 17 r_shoulder
   18 l_elbow 19 r_elbow  20 l_wrist 21 r_wrist

Positions are in metres, y up.  Joint 0's local rotation is the global body
orientation and its position is the root translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import rotmath
from .numcore import Tensor

NUM_JOINTS = 22

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19], dtype=np.int32)

# ~1.7 m humanoid, child offset from parent at rest
REST_OFFSETS = np.array([
    [0.000, 0.000, 0.000],
    [0.070, -0.090, 0.000],
    [-0.070, -0.090, 0.000],
    [0.000, 0.110, -0.020],
    [0.030, -0.380, 0.000],
    [-0.030, -0.380, 0.000],
    [0.000, 0.130, 0.010],
    [0.000, -0.400, -0.040],
    [0.000, -0.400, -0.040],
    [0.000, 0.050, 0.020],
    [0.020, -0.060, 0.120],
    [-0.020, -0.060, 0.120],
    [0.000, 0.210, -0.030],
    [0.080, 0.120, -0.020],
    [-0.080, 0.120, -0.020],
    [0.000, 0.090, 0.050],
    [0.110, 0.030, -0.010],
    [-0.110, 0.030, -0.010],
    [0.260, -0.010, -0.020],
    [-0.260, -0.010, -0.020],
    [0.250, 0.010, 0.000],
    [-0.250, 0.010, 0.000],
])

PELVIS_HEIGHT = 0.93

HEAD, LEFT_WRIST, RIGHT_WRIST, PELVIS = 15, 20, 21, 0


@dataclass(frozen=True)
class KinematicTree:
    parents: np.ndarray = field(default_factory=lambda: SMPL_PARENTS.copy())
    offsets: np.ndarray = field(default_factory=lambda: REST_OFFSETS.copy())

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int32)
        offsets = np.asarray(self.offsets, dtype=float)
        if parents.shape != (NUM_JOINTS,) or offsets.shape != (NUM_JOINTS, 3):
            raise ValueError(f"tree needs {NUM_JOINTS} parents and offsets, got {parents.shape}, {offsets.shape}")
        if parents[0] != -1 or np.sum(parents < 0) != 1:
            raise ValueError("tree must have exactly one root at joint 0")
        if np.any(parents[1:] >= np.arange(1, NUM_JOINTS)):
            raise ValueError("parents must precede children")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def levels(self) -> list[np.ndarray]:
        """Joint indices grouped by depth, root first."""
        depth = np.zeros(NUM_JOINTS, dtype=int)
        for j in range(1, NUM_JOINTS):
            depth[j] = depth[self.parents[j]] + 1
        return [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]


DEFAULT_TREE = KinematicTree()


@dataclass(frozen=True)
class TrackerConfig:
    joints: tuple[int, ...] = (HEAD, LEFT_WRIST, RIGHT_WRIST)

    def __post_init__(self):
        if len(self.joints) not in (3, 4):
            raise ValueError(f"tracker count must be 3 or 4, got {len(self.joints)}")
        for j in self.joints:
            if not 0 <= j < NUM_JOINTS:
                raise IndexError(f"tracker joint {j} out of range")

    @classmethod
    def with_count(cls, n: int) -> "TrackerConfig":
        if n == 3:
            return cls((HEAD, LEFT_WRIST, RIGHT_WRIST))
        if n == 4:
            return cls((HEAD, LEFT_WRIST, RIGHT_WRIST, PELVIS))
        raise ValueError(f"tracker count must be 3 or 4, got {n}")

    def __len__(self) -> int:
        return len(self.joints)


@dataclass
class MotionSequence:
    fps: float
    local_rot6d: np.ndarray  # (F, 22, 6)
    root: np.ndarray  # (F, 3)
    tree: KinematicTree = DEFAULT_TREE

    def __post_init__(self):
        f = self.local_rot6d.shape[0]
        if self.local_rot6d.shape != (f, NUM_JOINTS, 6) or self.root.shape != (f, 3):
            raise ValueError(f"bad motion shapes {self.local_rot6d.shape}, {self.root.shape}")
        if f < 2:
            raise ValueError("a motion needs at least 2 frames")

    @property
    def num_frames(self) -> int:
        return self.local_rot6d.shape[0]


# --------------------------------------------------------------------------
# forward kinematics
# --------------------------------------------------------------------------

def _fk_arrays(parents, offsets, levels, local_R, root):
    G = np.empty_like(local_R)
    P = np.empty(local_R.shape[:-1], dtype=local_R.dtype)
    off = offsets.astype(local_R.dtype)
    G[..., 0, :, :] = local_R[..., 0, :, :]
    P[..., 0, :] = root
    for js in levels[1:]:
        ps = parents[js]
        Gp = G[..., ps, :, :]
        G[..., js, :, :] = Gp @ local_R[..., js, :, :]
        P[..., js, :] = P[..., ps, :] + np.einsum("...jab,jb->...ja", Gp, off[js])
    return G, P


def forward_kinematics(tree: KinematicTree, local_rots, root_pos):
    """Global rotations (..., 22, 3, 3) and positions (..., 22, 3).

    ``local_rots`` may be 6D (..., 22, 6) or matrices (..., 22, 3, 3).
    """
    local_rots = np.asarray(local_rots)
    if local_rots.shape[-1] == 6:
        local_rots = rotmath.rot6d_to_matrix(local_rots)
    root_pos = np.asarray(root_pos, dtype=local_rots.dtype)
    return _fk_arrays(tree.parents, tree.offsets, tree.levels, local_rots, root_pos)


def forward_kinematics_t(tree: KinematicTree, local_R: Tensor, root: Tensor):
    """Differentiable FK on tensors: local matrices (..., 22, 3, 3), root (..., 3)."""
    parents, levels = tree.parents, tree.levels
    R, r0 = local_R.data, root.data
    G, P = _fk_arrays(parents, tree.offsets, levels, R, r0)
    off = tree.offsets.astype(R.dtype)
    gt, pt = nc._new(G), nc._new(P)

    def back(gG, gP):
        gG = gG.copy()
        gP = gP.copy()
        gR = np.zeros_like(R)
        for js in reversed(levels[1:]):
            ps = parents[js]
            gGj = gG[..., js, :, :]
            gR[..., js, :, :] = np.swapaxes(G[..., ps, :, :], -1, -2) @ gGj
            contrib = gGj @ np.swapaxes(R[..., js, :, :], -1, -2)
            contrib += gP[..., js, :, None] * off[js][:, None, :]
            for k, p in enumerate(ps):  # parents repeat within a level
                gG[..., p, :, :] += contrib[..., k, :, :]
                gP[..., p, :] += gP[..., js[k], :]
        gR[..., 0, :, :] = gG[..., 0, :, :]
        return gR, gP[..., 0, :]

    nc.record("forward_kinematics", (local_R, root), (gt, pt), back)
    return gt, pt


# --------------------------------------------------------------------------
# synthetic motion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    """Band-limited synthetic motion.

    ``style_seed`` fixes the per-joint rotation axes and gains so that clips
    generated with different ``seed`` values share one "performer"; the clip
    seed drives the harmonics and the root path.
    """

    num_harmonics: int = 3
    max_amp_deg: float = 20.0
    max_freq_hz: float = 1.0
    root_speed: float = 0.5
    style_seed: int = 0

    def validate(self, fps: float) -> None:
        if self.num_harmonics < 1:
            raise ValueError("num_harmonics must be >= 1")
        if self.max_amp_deg < 0 or self.root_speed < 0:
            raise ValueError("amplitude and root speed must be non-negative")
        if not 0 < self.max_freq_hz < fps / 4:
            raise ValueError(f"max_freq_hz must lie in (0, fps/4) = (0, {fps / 4})")


def make_rng(seed: int) -> np.random.Generator:
    """Project-wide generator: numpy PCG64."""
    return np.random.Generator(np.random.PCG64(seed))


RNG_NAME = "numpy.random.PCG64"


def joint_style(style_seed: int):
    rng = make_rng(style_seed)
    axes = rng.normal(size=(NUM_JOINTS, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    gains = rng.uniform(0.4, 1.0, NUM_JOINTS) * rng.choice([-1.0, 1.0], NUM_JOINTS)
    return axes, gains


def synth_motion(seed: int, num_frames: int, fps: float = 60.0,
                 params: SynthParams = SynthParams(), tree: KinematicTree = DEFAULT_TREE) -> MotionSequence:
    """Each joint rotates about its own fixed axis by a gain times a shared sum of sinusoids."""
    if num_frames < 2:
        raise ValueError("num_frames must be >= 2")
    if fps <= 0:
        raise ValueError("fps must be positive")
    params.validate(fps)
    rng = make_rng(seed)
    K = params.num_harmonics
    amps = np.radians(rng.uniform(0.0, params.max_amp_deg, K))
    freqs = rng.uniform(0.25, 1.0, K) * params.max_freq_hz
    phases = rng.uniform(0.0, 2 * np.pi, K)

    t = np.arange(num_frames) / fps
    wave = (amps * np.sin(2 * np.pi * freqs * t[:, None] + phases)).sum(axis=1)
    axes, gains = joint_style(params.style_seed)
    theta = wave[:, None] * gains  # (F, 22)
    R = rotmath.axis_angle_to_matrix(np.broadcast_to(axes, theta.shape + (3,)), theta)

    # root: bounded wander, speed <= sum_k 2*pi*nu_k*|c_k| <= root_speed
    nu = rng.uniform(0.2, 0.5, 2) * params.max_freq_hz
    dirs = rng.normal(size=(2, 3)) * np.array([1.0, 0.2, 1.0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    share = rng.dirichlet([1.0, 1.0]) * rng.uniform(0.5, 1.0) * params.root_speed
    c = dirs * (share / (2 * np.pi * nu))[:, None]
    psi = rng.uniform(0.0, 2 * np.pi, 2)
    root = np.array([0.0, PELVIS_HEIGHT, 0.0]) + np.einsum(
        "tk,kd->td", np.sin(2 * np.pi * nu * t[:, None] + psi) - np.sin(psi), c)

    return MotionSequence(fps=float(fps), local_rot6d=rotmath.matrix_to_rot6d(R), root=root, tree=tree)


# --------------------------------------------------------------------------
# tracker signals
# --------------------------------------------------------------------------

def extract_tracker_stream(motion: MotionSequence, cfg: TrackerConfig = TrackerConfig()) -> np.ndarray:
    """Per-frame tracker signals, shape (F, |J|, 18).

    Row layout: global orientation 6D, rotation velocity 6D, position,
    linear velocity (metres per frame).  Frame 0 carries identity / zero
    velocities.
    """
    for j in cfg.joints:
        if not 0 <= j < NUM_JOINTS:
            raise IndexError(f"tracker joint {j} out of range")
    G, P = forward_kinematics(motion.tree, motion.local_rot6d, motion.root)
    js = list(cfg.joints)
    Gt, Pt = G[:, js], P[:, js]
    rot = rotmath.matrix_to_rot6d(Gt)
    rotvel = np.empty_like(rot)
    rotvel[0] = rotmath.IDENTITY_6D
    rotvel[1:] = rotmath.matrix_to_rot6d(np.swapaxes(Gt[:-1], -1, -2) @ Gt[1:])
    linvel = np.zeros_like(Pt)
    linvel[1:] = Pt[1:] - Pt[:-1]
    return np.concatenate([rot, rotvel, Pt, linvel], axis=-1)


def motion_targets(motion: MotionSequence) -> dict[str, np.ndarray]:
    """Ground-truth arrays for supervision and metrics."""
    G, P = forward_kinematics(motion.tree, motion.local_rot6d, motion.root)
    return {
        "rot": motion.local_rot6d,
        "global_rot": rotmath.matrix_to_rot6d(G),
        "pos": P,
    }
