"""Binary motion and checkpoint files, and the command line driving them.

Run:  python3 demos/05_files_and_cli.py
"""
import json
import tempfile
from pathlib import Path

import numpy as np

from reliavatar import ModelConfig, ReliaAvatar, synth_motion
from reliavatar.appio import (cli, decode_checkpoint, load_checkpoint, motion_file_size, read_motion,
                              save_checkpoint, write_motion)

tmp = Path(tempfile.mkdtemp())

# Motion files: fixed header plus float32 frames; a second write is byte-identical.
m = synth_motion(3, 120)
write_motion(tmp / "clip.rmot", m)
print("motion file bytes:", (tmp / "clip.rmot").stat().st_size, "expected", motion_file_size(120))
back = read_motion(tmp / "clip.rmot")
print("max float32 storage error:", np.abs(back.local_rot6d - m.local_rot6d).max())
write_motion(tmp / "again.rmot", back)
print("rewrite byte-identical:", (tmp / "again.rmot").read_bytes() == (tmp / "clip.rmot").read_bytes())

# Checkpoints: named tensors plus JSON metadata.
model = ReliaAvatar(ModelConfig.desk(d=32), seed=5)
save_checkpoint(tmp / "m.rckp", model, {"note": "untrained"})
tensors, meta = decode_checkpoint((tmp / "m.rckp").read_bytes())
print(f"{len(tensors)} tensors, metadata keys: {sorted(meta)}")
loaded, _ = load_checkpoint(tmp / "m.rckp")
print("weights identical:", all(np.array_equal(a.data, b.data)
                                for a, b in zip(model.parameters().values(), loaded.parameters().values())))

# The same workflow through the command line.
data, ckpt = tmp / "data", tmp / "cli.rckp"
cli(["synth", "--seed", "0", "--clips", "4", "--frames", "200", "--out", str(data)])
cli(["train", "--data", str(data), "--out", str(ckpt), "--iters", "20", "--batch", "4", "--d", "32",
     "--ffn", "64", "--dec-hidden", "32", "--heads", "4"])
cli(["eval", "--ckpt", str(ckpt), "--data", str(data), "--protocol", "instantaneous:0.5",
     "--runs", "2", "--out", str(tmp / "eval.json")])
cli(["bench", "--ckpt", str(ckpt), "--runs", "200"])
print("eval report keys:", sorted(json.loads((tmp / "eval.json").read_text())))
