"""Motion and checkpoint files, flat config files and the command-line interface."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import struct
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .model import ModelConfig, ReliaAvatar, ScenarioSpec, apply_scenario
from .skeleton import (NUM_JOINTS, RNG_NAME, KinematicTree, MotionSequence, SynthParams, extract_tracker_stream,
                       make_rng, synth_motion)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MOTION_MAGIC = b"RMOT"
CKPT_MAGIC = b"RCKP"
_MOTION_HEADER = struct.Struct("<4sIIIf")
_FRAME_FLOATS = NUM_JOINTS * 6 + 3


class FormatError(ValueError):
    """Base class for file-format problems."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class LayoutMismatchError(FormatError):
    """Header arithmetic does not agree with the payload or the expected layout."""


class CheckpointMismatchError(nc.ShapeError):
    """Checkpoint tensors do not fit the configured architecture."""


# --------------------------------------------------------------------------
# motion files
# --------------------------------------------------------------------------

def motion_file_size(num_frames: int, num_joints: int = NUM_JOINTS) -> int:
    return _MOTION_HEADER.size + 4 * num_joints + 12 * num_joints + num_frames * 4 * (num_joints * 6 + 3)


def encode_motion(motion: MotionSequence) -> bytes:
    F = motion.num_frames
    head = _MOTION_HEADER.pack(MOTION_MAGIC, FORMAT_VERSION, F, NUM_JOINTS, motion.fps)
    frames = np.concatenate([motion.local_rot6d.reshape(F, -1), motion.root], axis=1)
    return b"".join([
        head,
        np.asarray(motion.tree.parents, dtype="<i4").tobytes(),
        np.asarray(motion.tree.offsets, dtype="<f4").tobytes(),
        frames.astype("<f4").tobytes(),
    ])


def decode_motion(buf: bytes) -> MotionSequence:
    if len(buf) < 4 or buf[:4] != MOTION_MAGIC:
        raise BadMagicError(f"not a motion file (magic {bytes(buf[:4])!r}, expected {MOTION_MAGIC!r})")
    if len(buf) < _MOTION_HEADER.size:
        raise TruncatedFileError(f"motion header truncated: {len(buf)} bytes")
    _, version, F, J, fps = _MOTION_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"motion format version {version} not supported (expected {FORMAT_VERSION})")
    if J != NUM_JOINTS:
        raise LayoutMismatchError(f"motion declares {J} joints; this format carries {NUM_JOINTS}")
    expected = motion_file_size(F, J)
    if len(buf) < expected:
        raise TruncatedFileError(f"motion file truncated: {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise LayoutMismatchError(f"motion file has {len(buf) - expected} trailing bytes beyond the header-implied length")
    off = _MOTION_HEADER.size
    parents = np.frombuffer(buf, "<i4", J, off)
    off += 4 * J
    offsets = np.frombuffer(buf, "<f4", 3 * J, off).reshape(J, 3)
    off += 12 * J
    frames = np.frombuffer(buf, "<f4", F * _FRAME_FLOATS, off).reshape(F, _FRAME_FLOATS)
    tree = KinematicTree(parents.copy(), offsets.astype(np.float64))
    return MotionSequence(float(fps), frames[:, :NUM_JOINTS * 6].reshape(F, NUM_JOINTS, 6).astype(np.float64),
                          frames[:, NUM_JOINTS * 6:].astype(np.float64), tree)


def write_motion(path, motion: MotionSequence) -> None:
    Path(path).write_bytes(encode_motion(motion))


def read_motion(path) -> MotionSequence:
    return decode_motion(Path(path).read_bytes())


def read_motion_dir(path) -> list[MotionSequence]:
    files = sorted(Path(path).glob("*.rmot"))
    if not files:
        raise FileNotFoundError(f"no .rmot files in {path}")
    return [read_motion(f) for f in files]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def encode_checkpoint(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.off} (needed {n} more)")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r})")
    r = _Reader(buf)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} not supported (expected {FORMAT_VERSION})")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), "<f4").reshape(dims)
        if name in tensors:
            raise CheckpointMismatchError(f"tensor {name!r} appears more than once")
        tensors[name] = data.astype(np.float32)
    if r.off != len(buf):
        raise LayoutMismatchError(f"{len(buf) - r.off} trailing bytes after the last tensor")
    return tensors, metadata


def checkpoint_metadata(model: ReliaAvatar, train_config=None, training: dict | None = None,
                        extra: dict | None = None) -> dict:
    meta = {
        "format": "reliavatar-checkpoint",
        "rng": RNG_NAME,
        "model": dataclasses.asdict(model.config),
        "seed": train_config.seed if train_config is not None else None,
        "train": train_config.to_dict() if train_config is not None else None,
        "training_state": dict(training or {}),
    }
    meta.update(extra or {})
    return meta


def save_checkpoint(path, model: ReliaAvatar, metadata: dict | None = None) -> None:
    meta = dict(metadata) if metadata is not None else checkpoint_metadata(model)
    meta.setdefault("model", dataclasses.asdict(model.config))
    meta.setdefault("rng", RNG_NAME)
    tensors = {k: p.data for k, p in model.named_parameters()}
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_weights(model: ReliaAvatar, tensors: dict[str, np.ndarray]) -> None:
    """Copy tensors into ``model``; every parameter must be present once with its exact shape."""
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointMismatchError(
                f"tensor {name!r} {p.shape} required by the architecture is missing from the checkpoint")
        if tensors[name].shape != p.shape:
            raise CheckpointMismatchError(
                f"tensor {name!r}: checkpoint shape {tensors[name].shape} vs architecture {p.shape}")
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise CheckpointMismatchError(f"tensor {extra[0]!r} in the checkpoint has no place in the architecture")
    for name, p in params.items():
        p.data = np.array(tensors[name], dtype=p.data.dtype)


def load_checkpoint(path, model: ReliaAvatar | None = None) -> tuple[ReliaAvatar, dict]:
    """Read a checkpoint; builds the model from its metadata unless one is given."""
    tensors, meta = decode_checkpoint(Path(path).read_bytes())
    if model is None:
        model = ReliaAvatar(ModelConfig(**meta["model"]))
    load_weights(model, tensors)
    return model, meta


# --------------------------------------------------------------------------
# flat config files
# --------------------------------------------------------------------------

def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        out[key.strip().replace("-", "_")] = _coerce(value.strip())
    return out


def read_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()))


# --------------------------------------------------------------------------
# command line
# --------------------------------------------------------------------------

# train settings settable from a config file or the command line
TRAIN_KEYS = {
    "iters": int, "batch": int, "window": int, "lr": float, "lr_half_period": int, "seed": int,
    "masking": bool, "detach_recycled": bool,
    "trackers": int, "fusion": str, "decoder": str, "d": int, "tf_layers": int, "heads": int,
    "ffn": int, "dec_hidden": int,
    "w_ori": float, "w_rot": float, "w_pos_smpl": float, "w_pos_dec": float, "w_vec": float,
}


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def train_config_from(settings: dict):
    from .trainer import LossWeights, TrainConfig

    unknown = sorted(set(settings) - set(TRAIN_KEYS))
    if unknown:
        raise ValueError(f"unknown train setting(s): {', '.join(unknown)}")
    s = {k: (_bool(v) if TRAIN_KEYS[k] is bool else TRAIN_KEYS[k](v)) for k, v in settings.items()}
    base = TrainConfig()
    model = base.model.replace(**{k: s[k] for k in ("fusion", "decoder", "d", "tf_layers", "heads",
                                                    "ffn", "dec_hidden") if k in s},
                               **({"n_trackers": s["trackers"]} if "trackers" in s else {}))
    weights = LossWeights(**{k[2:]: s[k] for k in s if k.startswith("w_")})
    return base.replace(model=model, weights=weights,
                        **{k: s[k] for k in ("iters", "batch", "window", "lr", "lr_half_period", "seed",
                                             "masking", "detach_recycled") if k in s})


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reliavatar", description="Tracker-to-avatar pose estimation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic motion dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clips", type=int, default=20)
    s.add_argument("--frames", type=int, default=600)
    s.add_argument("--fps", type=float, default=60.0)
    s.add_argument("--style-seed", type=int, default=0)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model; writes a checkpoint and a JSONL loss history")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    for key, kind in TRAIN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if key == "trackers":
            t.add_argument(flag, type=int, choices=(3, 4))
        elif key == "fusion":
            t.add_argument(flag, choices=("concat_feat", "add", "concat_joint"))
        elif key == "decoder":
            t.add_argument(flag, choices=("sfc", "multifc", "shared"))
        else:
            t.add_argument(flag, type=_bool if kind is bool else kind)

    e = sub.add_parser("eval", help="evaluate a checkpoint under a data-loss protocol")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", default="standard", help="standard | instantaneous:P | prolonged:M")
    e.add_argument("--runs", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    d = sub.add_parser("decay", help="error at fixed offsets after all trackers drop out")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)

    st = sub.add_parser("stream", help="offline streaming: tracker signals of a motion file to predicted motion")
    st.add_argument("--ckpt", required=True)
    st.add_argument("--input", required=True)
    st.add_argument("--scenario", default="standard")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="single-stream step latency")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--runs", type=int, default=10000)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--out")

    sub.add_parser("gradcheck", help="run the gradient-check suite; nonzero exit on failure")
    return p


def _need_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _effective(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = SynthParams(style_seed=args.style_seed)
    for i in range(args.clips):
        m = synth_motion(make_clip_seed(args.seed, i), args.frames, args.fps, params)
        write_motion(out / f"clip_{i:04d}.rmot", m)
    _write_json(out / "synth.json", {"config": _effective(args), "rng": RNG_NAME,
                                     "synth_params": dataclasses.asdict(params)})
    print(f"wrote {args.clips} clips of {args.frames} frames to {out}")
    return 0


def make_clip_seed(seed: int, index: int) -> int:
    """Clip seeds derived from one dataset seed; distinct datasets never share clips for distinct seeds."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def cmd_train(args) -> int:
    from .trainer import train, write_history

    data = _need_file(args.data, "data directory")
    settings = read_config(_need_file(args.config, "config file")) if args.config else {}
    for key in TRAIN_KEYS:
        val = getattr(args, key)
        if val is not None:
            settings[key] = val
    config = train_config_from(settings)
    motions = read_motion_dir(data)
    result = train(config, motions)
    last = result.history[-1] if result.history else {}
    meta = checkpoint_metadata(result.model, config, {
        "iterations": len(result.history), "adam_step": result.optimizer.step,
        "skipped_updates": result.optimizer.skipped, "final_loss": last.get("total")})
    meta["cli"] = {"command": "train", "data": str(args.data), "config_file": args.config,
                   "effective": {k: settings[k] for k in sorted(settings)}}
    save_checkpoint(args.out, result.model, meta)
    hist = Path(str(args.out) + ".loss.jsonl")
    write_history(result.history, hist)
    print(f"trained {config.iters} iterations in {result.seconds:.1f} s; checkpoint {args.out}, history {hist}")
    return 0


def cmd_eval(args) -> int:
    from .evalbench import run_protocol

    spec = ScenarioSpec.parse(args.protocol)
    model, meta = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    motions = read_motion_dir(_need_file(args.data, "data directory"))
    report = run_protocol(model, motions, spec, runs=args.runs, seed=args.seed,
                          config={"cli": _effective(args), "checkpoint": meta})
    _write_json(args.out, report.to_dict())
    print(report.table())
    return 0


def cmd_decay(args) -> int:
    from .evalbench import prediction_decay

    model, meta = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    motions = read_motion_dir(_need_file(args.data, "data directory"))
    report = prediction_decay(model, motions, config={"cli": _effective(args), "checkpoint": meta})
    _write_json(args.out, report.to_dict())
    print(report.table())
    return 0


def cmd_stream(args) -> int:
    from .evalbench import predict

    spec = ScenarioSpec.parse(args.scenario)
    model, meta = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    motion = read_motion(_need_file(args.input, "input motion"))
    x = extract_tracker_stream(motion, model.config.trackers).astype(nc.default_dtype())[None]
    masked, mask = apply_scenario(x, spec, make_rng(args.seed))
    _, _, pose = predict(model, masked)
    out = MotionSequence(motion.fps, pose.rot.data[0].astype(np.float64),
                         pose.pos.data[0, :, 0, :].astype(np.float64), motion.tree)
    write_motion(args.out, out)
    _write_json(str(args.out) + ".json", {"config": _effective(args), "checkpoint": meta,
                                          "masked_tracker_frames": int(mask.sum())})
    print(f"wrote {out.num_frames} predicted frames to {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .evalbench import bench_fps

    model, meta = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    res = bench_fps(model, warmup=args.warmup, runs=args.runs, config={"cli": _effective(args)})
    print(f"{res.mean_ms:.3f} ms/frame  {res.fps:.1f} fps  ({res.runs} runs, {res.parameters} parameters)")
    if args.out:
        _write_json(args.out, res.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    from .trainer import gradient_check_suite

    ok = True
    for name, err, tol, passed, st in gradient_check_suite():
        print(f"{'PASS' if passed else 'FAIL'}  {name:<22} max rel err {err:.2e} (tol {tol:g})  "
              f"{st['checked']} coords, {st['kink_skipped']} straddled a kink")
        ok &= passed
    return 0 if ok else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "decay": cmd_decay,
            "stream": cmd_stream, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def cli(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, ValueError) as e:
        parser.print_usage(sys.stderr)
        print(f"reliavatar {args.command}: error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(cli())
