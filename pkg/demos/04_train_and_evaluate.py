"""Train a small model with simulated signal loss, then evaluate it.

Takes a few minutes on one core.
Run:  python3 demos/04_train_and_evaluate.py
"""
import numpy as np

from reliavatar import ModelConfig, TrainConfig, synth_motion, train
from reliavatar.appio import make_clip_seed
from reliavatar.evalbench import bench_fps, prediction_decay, run_protocol

train_clips = [synth_motion(make_clip_seed(0, i), 600) for i in range(10)]
test_clips = [synth_motion(make_clip_seed(1, i), 600) for i in range(3)]

config = TrainConfig(window=32, batch=8, iters=600, model=ModelConfig.desk(d=32, ffn=128, dec_hidden=32))


def report(row):
    if row["iteration"] % 100 == 0:
        print(f"iter {row['iteration']:>4}  lr {row['lr']:.1e}  loss {row['total']:.4f}")


result = train(config, train_clips, on_iteration=report)
model = result.model
print(f"trained in {result.seconds:.0f} s")

for protocol in ("standard", "instantaneous:0.5", "prolonged:40"):
    r = run_protocol(model, test_clips, protocol, runs=3)
    print(f"{protocol:<18} MPJRE {r.mpjre:6.2f} deg  MPJPE {r.mpjpe:6.2f} cm  MPJVE {r.mpjve:7.2f} cm/s")

decay = prediction_decay(model, test_clips)
print(decay.table())

b = bench_fps(model, runs=500)
print(f"{b.mean_ms:.2f} ms per frame, {b.fps:.0f} fps ({b.parameters} parameters)")
print("error growth from offset 1 to offset 40:", np.round(decay.mpjpe[-1] / decay.mpjpe[0], 2))
