"""Losses, simulated-data-loss training loop and loss history."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from . import rotmath
from .model import (ModelConfig, PoseState, ReliaAvatar, apply_scenario, choose_training_scenario,
                    pose_velocities, stack_poses)
from .numcore import Tensor
from .skeleton import (DEFAULT_TREE, KinematicTree, MotionSequence, extract_tracker_stream,
                       forward_kinematics_t, make_rng, motion_targets)

log = logging.getLogger(__name__)

COMPONENTS = ("ori", "rot", "pos_smpl", "pos_dec", "vec")


@dataclass(frozen=True)
class LossWeights:
    ori: float = 0.02
    rot: float = 1.0
    pos_smpl: float = 1.0
    pos_dec: float = 1.0
    vec: float = 0.5

    def __post_init__(self):
        for name in COMPONENTS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in COMPONENTS)


@dataclass(frozen=True)
class TrainConfig:
    window: int = 32
    batch: int = 32
    lr: float = 5e-4
    lr_half_period: int = 15000
    iters: int = 5000
    seed: int = 0
    masking: bool = True  # simulation training; False trains on clean signals only
    detach_recycled: bool = True
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.window < 2 or self.window % 2:
            raise ValueError(f"window length must be even and >= 2, got {self.window}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


# --------------------------------------------------------------------------
# targets and windows
# --------------------------------------------------------------------------

@dataclass
class Targets:
    """Supervision for a batch of windows; arrays shaped (B, L, 22, c)."""

    rot: np.ndarray
    global_rot: np.ndarray
    pos: np.ndarray
    rotvel: np.ndarray
    vel: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.rot.shape[:2]


def window_targets(rot: np.ndarray, global_rot: np.ndarray, pos: np.ndarray) -> Targets:
    """Targets for windows that start from a cold state (identity / zero before frame 0)."""
    rotvel, vel = pose_velocities(rot, pos)
    return Targets(rot, global_rot, pos, rotvel, vel)


class WindowDataset:
    """Random fixed-length windows cut from a set of motion clips."""

    def __init__(self, motions: Sequence[MotionSequence], trackers, window: int, dtype=np.float32):
        if not motions:
            raise ValueError("dataset is empty")
        self.window = window
        self.streams, self.targets = [], []
        for m in motions:
            if m.num_frames < window:
                continue
            self.streams.append(extract_tracker_stream(m, trackers).astype(dtype))
            self.targets.append({k: v.astype(dtype) for k, v in motion_targets(m).items()})
        if not self.streams:
            raise ValueError(f"no clip has at least {window} frames")

    @property
    def num_windows(self) -> int:
        return sum(s.shape[0] - self.window + 1 for s in self.streams)

    def window_at(self, clip: int, start: int):
        sl = slice(start, start + self.window)
        t = self.targets[clip]
        return self.streams[clip][sl], t["rot"][sl], t["global_rot"][sl], t["pos"][sl]

    def sample(self, rng: np.random.Generator, batch: int):
        """A clip uniformly, then a uniform window start inside it, per batch element."""
        xs, rots, grots, poss = [], [], [], []
        for _ in range(batch):
            c = int(rng.integers(len(self.streams)))
            s = int(rng.integers(self.streams[c].shape[0] - self.window + 1))
            x, r, g, p = self.window_at(c, s)
            xs.append(x), rots.append(r), grots.append(g), poss.append(p)
        return np.stack(xs), window_targets(np.stack(rots), np.stack(grots), np.stack(poss))


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def compute_loss(pred, gt: Targets, weights: LossWeights = LossWeights(),
                 tree: KinematicTree = DEFAULT_TREE) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of five mean-L1 terms over frames x joints x channels.

    ``pred`` is a PoseState of (B, L, 22, c) tensors or a list of per-frame
    PoseStates.
    """
    if isinstance(pred, (list, tuple)):
        pred = stack_poses(pred)
    rot = pred.rot if isinstance(pred.rot, Tensor) else Tensor(pred.rot)
    if rot.shape[:2] != gt.rot.shape[:2]:
        raise ValueError(f"prediction covers {rot.shape[:2]} (batch, frames) but targets {gt.rot.shape[:2]}")
    pos = pred.pos if isinstance(pred.pos, Tensor) else Tensor(pred.pos)
    rotvel = pred.rotvel if isinstance(pred.rotvel, Tensor) else Tensor(pred.rotvel)
    vel = pred.vel if isinstance(pred.vel, Tensor) else Tensor(pred.vel)

    G, P = forward_kinematics_t(tree, rotmath.gram_schmidt(rot), pos[..., 0, :])
    terms = [
        nc.l1(rotmath.to_rot6d(G), gt.global_rot),
        nc.l1(rot, gt.rot),
        nc.l1(P, gt.pos),
        nc.l1(pos, gt.pos),
        nc.l1(nc.concat([rotvel, vel], axis=-1), np.concatenate([gt.rotvel, gt.vel], axis=-1)),
    ]
    total = nc.weighted_sum(terms, weights.as_tuple())
    if not np.isfinite(total.data).all():
        raise FloatingPointError("non-finite loss")
    return total, {n: float(t.data) for n, t in zip(COMPONENTS, terms)}


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass
class TrainResult:
    model: ReliaAvatar
    config: TrainConfig
    optimizer: nc.AdamState
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def history_row(iteration: int, lr: float, total: float, parts: dict[str, float]) -> dict:
    return {"iteration": iteration, "lr": lr, "total": total, **parts}


def write_history(rows: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def train(config: TrainConfig, dataset: WindowDataset | Sequence[MotionSequence],
          model: ReliaAvatar | None = None, on_iteration: Callable[[dict], None] | None = None,
          fixed_batch=None) -> TrainResult:
    """Simulation training.

    Each iteration samples ``batch`` windows, draws one scenario per window
    (standard / instantaneous p=0.1 / latter-half loss, 1/3 each) when
    ``config.masking`` is on, unrolls the network over all frames and
    supervises every frame against clean ground truth.

    ``fixed_batch`` = (x, Targets) trains on the same windows every
    iteration (the single-window overfit check).  ``on_iteration`` receives
    each history row; a truthy return ends training early.
    """
    if not isinstance(dataset, WindowDataset) and fixed_batch is None:
        dataset = WindowDataset(dataset, config.model.trackers, config.window)
    model = model or ReliaAvatar(config.model, seed=config.seed)
    params = model.parameters()
    opt = nc.AdamState.init(params, base_lr=config.lr, half_period=config.lr_half_period)
    rng = make_rng((config.seed, 1))
    result = TrainResult(model, config, opt)
    t0 = time.perf_counter()

    for it in range(1, config.iters + 1):
        if fixed_batch is not None:
            x, gt = fixed_batch
        else:
            x, gt = dataset.sample(rng, config.batch)
        if config.masking:
            x = np.stack([apply_scenario(x[b], choose_training_scenario(rng), rng)[0]
                          for b in range(x.shape[0])])
        lr = opt.lr
        with nc.Graph() as g:
            try:
                state = model.initial_state(x.shape[0])
                poses = []
                for t in range(x.shape[1]):
                    pose, state = model.step(x[:, t], state, config.detach_recycled)
                    poses.append(pose)
                total, parts = compute_loss(poses, gt, config.weights)
            except FloatingPointError as e:
                raise DivergenceError(it, str(e)) from e
        nc.backward(g, total)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        nc.adam_step(params, grads, opt)
        nc.zero_grad(params.values())
        row = history_row(it, lr, float(total.data), parts)
        result.history.append(row)
        if on_iteration is not None and on_iteration(row):
            break
        if it % 100 == 0:
            log.info("iter %d total %.5f", it, row["total"])
    result.seconds = time.perf_counter() - t0
    return result



# --------------------------------------------------------------------------
# gradient-check suite
# --------------------------------------------------------------------------

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


def _probe(out: Tensor, seed: int = 7) -> Tensor:
    """Scalar ``sum(out * w)`` with fixed random ``w`` so every output coordinate matters.

    ``w`` is scaled by 1/size to keep the scalar below 1: coordinates whose true
    gradient is exactly zero (e.g. key biases under softmax) then show
    finite-difference roundoff below the relative-error floor.
    """
    w = make_rng(seed).normal(size=out.shape) / out.data.size
    return nc.sum_(nc.mul(out, Tensor(w)))


def tiny_model_config() -> ModelConfig:
    """Widths <= 8 everywhere: d=4 so fused tokens are 8 wide."""
    return ModelConfig(d=4, tf_layers=1, heads=2, ffn=8, dec_hidden=8)


def tiny_model_case(seed: int = 0, frames: int = 3, batch: int = 2):
    """A 64-bit tiny model, a short clean window and its loss closure."""
    from .skeleton import synth_motion

    model = ReliaAvatar(tiny_model_config(), seed=seed)
    # with zero biases a width-8 decoder can emit near-zero 6D vectors, where
    # Gram-Schmidt is too curved for central differences; check around the rest pose
    bias = model.decoder.fc2.bias.data.reshape(-1, 9)
    bias[:, :6] = rotmath.IDENTITY_6D
    motion = synth_motion(seed, frames + 8)
    ds = WindowDataset([motion], model.config.trackers, frames, dtype=np.float64)
    x, gt = ds.sample(make_rng(seed), batch)

    def loss(*_):
        # finite differences see the recycled pose's dependence on the weights,
        # so the analytic side must not detach it either
        state = model.initial_state(batch)
        poses = []
        for t in range(frames):
            pose, state = model.step(x[:, t], state, detach_recycled=False)
            poses.append(pose)
        return compute_loss(poses, gt)[0]

    return model, loss


def gradient_check_suite(max_coords: int = 24) -> list[tuple[str, float, float, bool, dict]]:
    """Finite-difference checks for every layer type and the full tiny model.

    Returns (name, max relative error, tolerance, passed, stats) rows; stats
    counts checked coordinates and those replaced for straddling a kink.
    """
    from . import layers as L
    from .skeleton import DEFAULT_TREE

    rows = []
    with nc.float64_mode():
        rng = make_rng(2024)

        def t(*shape):
            return nc.parameter(rng.normal(size=shape))

        def check(name, f, inputs, tol=LAYER_TOL):
            st: dict = {}
            err = nc.grad_check(f, list(inputs), max_coords=max_coords, rng=make_rng(len(rows)),
                                avoid_kinks=True, stats=st)
            rows.append((name, err, tol, err < tol, st))

        def layer(name, module, *xs, call=None):
            call = call or module
            check(name, lambda *_: _probe(call(*xs)), [*xs, *module.parameters().values()])

        layer("linear", L.Linear(5, 4, rng), t(2, 3, 5))
        layer("sfc_equal_blocks", L.SFC([(3, 2)] * 3, rng), t(2, 9))
        layer("sfc_mixed_blocks", L.SFC([(6, 2), (6, 2), (3, 2), (3, 2)], rng), t(2, 3, 18))
        gru = L.GRUCell(4, 3, rng)
        h = t(2, 3)
        layer("gru_cell", gru, t(2, 4), h, call=lambda x, h: gru(x, h)[0])
        layer("layer_norm", L.LayerNorm(6), t(2, 3, 6))
        layer("self_attention", L.SelfAttention(8, 2, rng), t(2, 5, 8))
        layer("encoder_layer", L.EncoderLayer(8, 2, 8, rng), t(2, 5, 8))
        layer("joint_transformer", L.JointRelationTransformer(22, 8, 1, 2, 8, rng), t(1, 22, 8))
        layer("token_expand", L.TokenExpand(3, 4, 22, rng), t(2, 3, 4))
        for kind in L.DECODERS:
            layer(f"decoder_{kind}", L.make_decoder(kind, 22, 8, 8, rng), t(1, 22, 8))
        x = t(2, 4, 6)
        check("gram_schmidt_to_6d", lambda x: _probe(rotmath.to_rot6d(rotmath.gram_schmidt(x))), [x])
        r6, root = t(2, 22, 6), t(2, 3)

        def fk(r6, root):
            G, P = forward_kinematics_t(DEFAULT_TREE, rotmath.gram_schmidt(r6), root)
            return nc.add(_probe(G, 1), _probe(P, 2))

        check("forward_kinematics", fk, [r6, root])
        a = t(3, 7)
        check("softmax", lambda a: _probe(nc.softmax(a)), [a])

        model, loss = tiny_model_case()
        check("full_model_loss", loss, list(model.parameters().values()), tol=MODEL_TOL)
    return rows
