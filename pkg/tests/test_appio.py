import json
import struct

import numpy as np
import pytest

from reliavatar import appio as A
from reliavatar.model import ModelConfig, ReliaAvatar
from reliavatar.skeleton import synth_motion

SMALL = ModelConfig(d=16, tf_layers=1, heads=2, ffn=32, dec_hidden=16)


# ---------------------------------------------------------------- motion files

def test_two_frame_file_size(tmp_path):
    m = synth_motion(0, 2)
    A.write_motion(tmp_path / "a.rmot", m)
    size = 4 + 4 + 4 + 4 + 4 + 88 + 264 + 2 * (528 + 12)
    assert (tmp_path / "a.rmot").stat().st_size == size == 1452 == A.motion_file_size(2)


def test_motion_header_layout():
    buf = A.encode_motion(synth_motion(0, 3, fps=50.0))
    magic, version, frames, joints, fps = struct.unpack_from("<4sIIIf", buf)
    assert (magic, version, frames, joints, fps) == (b"RMOT", 1, 3, 22, 50.0)
    parents = struct.unpack_from("<22i", buf, 20)
    assert parents[:4] == (-1, 0, 0, 0)


def test_motion_round_trip_bit_identical(tmp_path):
    m = synth_motion(1, 30)
    A.write_motion(tmp_path / "a.rmot", m)
    back = A.read_motion(tmp_path / "a.rmot")
    assert back.local_rot6d.tobytes() == m.local_rot6d.astype(np.float32).astype(np.float64).tobytes()
    A.write_motion(tmp_path / "b.rmot", back)
    assert (tmp_path / "a.rmot").read_bytes() == (tmp_path / "b.rmot").read_bytes()
    assert back.fps == 60.0 and np.array_equal(back.tree.parents, m.tree.parents)


def test_motion_errors_are_distinct():
    buf = A.encode_motion(synth_motion(0, 4))
    with pytest.raises(A.BadMagicError):
        A.decode_motion(b"XMOT" + buf[4:])
    with pytest.raises(A.TruncatedFileError):
        A.decode_motion(buf[:-5])
    with pytest.raises(A.TruncatedFileError):
        A.decode_motion(buf[:10])
    with pytest.raises(A.LayoutMismatchError):
        A.decode_motion(buf + b"\0\0\0\0")
    with pytest.raises(A.LayoutMismatchError):
        A.decode_motion(buf[:12] + struct.pack("<I", 21) + buf[16:])
    with pytest.raises(A.UnsupportedVersionError):
        A.decode_motion(buf[:4] + struct.pack("<I", 2) + buf[8:])
    kinds = {A.BadMagicError, A.TruncatedFileError, A.LayoutMismatchError, A.UnsupportedVersionError}
    assert all(issubclass(k, A.FormatError) for k in kinds) and len(kinds) == 4


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bytes_and_outputs(tmp_path, rng):
    model = ReliaAvatar(SMALL, seed=3)
    x = rng.normal(size=(1, 6, 3, 18)).astype(np.float32)
    before = model.rollout(x)[0][-1].flat().data
    A.save_checkpoint(tmp_path / "a.rckp", model)
    loaded, meta = A.load_checkpoint(tmp_path / "a.rckp")
    assert meta["rng"] == "numpy.random.PCG64" and meta["model"]["d"] == 16
    after = loaded.rollout(x)[0][-1].flat().data
    assert before.tobytes() == after.tobytes()
    A.save_checkpoint(tmp_path / "b.rckp", loaded, meta)
    assert (tmp_path / "a.rckp").read_bytes() == (tmp_path / "b.rckp").read_bytes()


def test_checkpoint_layout(tmp_path):
    model = ReliaAvatar(SMALL)
    buf = A.encode_checkpoint({k: p.data for k, p in model.named_parameters()}, {"a": 1})
    assert buf[:4] == b"RCKP"
    version, meta_len = struct.unpack_from("<II", buf, 4)
    assert version == 1 and json.loads(buf[12:12 + meta_len]) == {"a": 1}
    (count,) = struct.unpack_from("<I", buf, 12 + meta_len)
    assert count == len(model.parameters())


def test_mismatched_decoder_names_tensor(tmp_path):
    A.save_checkpoint(tmp_path / "sfc.rckp", ReliaAvatar(SMALL))
    with pytest.raises(A.CheckpointMismatchError, match="decoder"):
        A.load_checkpoint(tmp_path / "sfc.rckp", ReliaAvatar(SMALL.replace(decoder="multifc")))
    with pytest.raises(A.CheckpointMismatchError, match="'transformer.joint_embed'"):
        A.load_checkpoint(tmp_path / "sfc.rckp", ReliaAvatar(SMALL.replace(fusion="concat_joint")))


def test_checkpoint_errors():
    model = ReliaAvatar(SMALL)
    buf = A.encode_checkpoint({k: p.data for k, p in model.named_parameters()}, {})
    with pytest.raises(A.BadMagicError):
        A.decode_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(A.TruncatedFileError):
        A.decode_checkpoint(buf[:-3])
    with pytest.raises(A.UnsupportedVersionError):
        A.decode_checkpoint(buf[:4] + struct.pack("<I", 9) + buf[8:])
    tensors, _ = A.decode_checkpoint(buf)
    tensors["extra.weight"] = np.zeros(2, np.float32)
    with pytest.raises(A.CheckpointMismatchError, match="extra.weight"):
        A.load_weights(model, tensors)


# ---------------------------------------------------------------- config files

def test_config_parse_and_format():
    cfg = A.parse_config_text("iters = 10  # short\nlr=0.001\nmasking = false\n\nfusion = add\n")
    assert cfg == {"iters": 10, "lr": 0.001, "masking": False, "fusion": "add"}
    assert A.parse_config_text(A.format_config(cfg)) == cfg
    with pytest.raises(ValueError):
        A.parse_config_text("iters 10")


def test_train_config_from_settings():
    c = A.train_config_from({"iters": 3, "trackers": 4, "decoder": "shared", "w_vec": 0.25, "masking": "no"})
    assert c.iters == 3 and c.model.n_trackers == 4 and c.model.decoder == "shared"
    assert c.weights.vec == 0.25 and c.masking is False
    with pytest.raises(ValueError):
        A.train_config_from({"bogus": 1})


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert A.cli(["synth", "--seed", "1", "--clips", "2", "--frames", "100", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    cfg = d / "train.cfg"
    cfg.write_text("iters = 50\nbatch = 2\nwindow = 8\nd = 16\ntf_layers = 1\nheads = 2\nffn = 32\ndec_hidden = 16\n")
    out = d / "m.rckp"
    assert A.cli(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(out), "--iters", "2"]) == 0
    return out


def test_cli_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert A.cli(["synth", "--seed", "1", "--clips", "2", "--frames", "64", "--out", str(out)]) == 0
    for name in ("clip_0000.rmot", "clip_0001.rmot"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ja, jb = (json.loads((d / "synth.json").read_text()) for d in (a, b))
    assert ja["config"].pop("out") != jb["config"].pop("out") and ja == jb
    assert A.read_motion(a / "clip_0000.rmot").num_frames == 64


def test_cli_train_outputs(ckpt):
    _, meta = A.load_checkpoint(ckpt)
    assert meta["train"]["iters"] == 2  # command line overrides the config file
    assert meta["cli"]["effective"]["d"] == 16 and meta["seed"] == 0
    rows = [json.loads(l) for l in open(str(ckpt) + ".loss.jsonl")]
    assert [r["iteration"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"iteration", "lr", "total", "ori", "rot", "pos_smpl", "pos_dec", "vec"}


def test_cli_eval_instantaneous(ckpt, dataset, tmp_path):
    out = tmp_path / "r.json"
    assert A.cli(["eval", "--ckpt", str(ckpt), "--data", str(dataset), "--protocol", "instantaneous:0.5",
                  "--runs", "5", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["runs"] == 5 and len(rep["seeds"]) == 5 and rep["params"] == {"p": 0.5}
    assert rep["config"]["cli"]["protocol"] == "instantaneous:0.5"


def test_cli_eval_rejects_long_prolonged(ckpt, dataset, tmp_path, capsys):
    code = A.cli(["eval", "--ckpt", str(ckpt), "--data", str(dataset), "--protocol", "prolonged:90",
                  "--out", str(tmp_path / "r.json")])
    assert code != 0 and "usage" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_cli_decay(ckpt, tmp_path):
    data = tmp_path / "long"
    assert A.cli(["synth", "--seed", "3", "--clips", "1", "--frames", "200", "--out", str(data)]) == 0
    out = tmp_path / "d.json"
    assert A.cli(["decay", "--ckpt", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["offsets"] == [1, 3, 7, 10, 20, 30, 40]


def test_cli_stream(ckpt, dataset, tmp_path):
    out = tmp_path / "p.rmot"
    assert A.cli(["stream", "--ckpt", str(ckpt), "--input", str(dataset / "clip_0000.rmot"),
                  "--scenario", "prolonged:20", "--out", str(out)]) == 0
    pred = A.read_motion(out)
    assert pred.num_frames == 100
    side = json.loads((tmp_path / "p.rmot.json").read_text())
    assert side["masked_tracker_frames"] == 20 * 3 and side["config"]["scenario"] == "prolonged:20"


def test_cli_bench(ckpt, tmp_path):
    out = tmp_path / "b.json"
    assert A.cli(["bench", "--ckpt", str(ckpt), "--runs", "5", "--warmup", "1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["runs"] == 5


def test_cli_errors(tmp_path, capsys):
    assert A.cli(["synth", "--bogus", "1", "--out", str(tmp_path)]) != 0
    assert "usage" in capsys.readouterr().err
    assert A.cli(["eval", "--ckpt", str(tmp_path / "missing.rckp"), "--data", str(tmp_path),
                  "--out", str(tmp_path / "r.json")]) != 0
    assert "not found" in capsys.readouterr().err
    assert A.cli([]) != 0


def test_cli_gradcheck_passes(capsys):
    assert A.cli(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines)
