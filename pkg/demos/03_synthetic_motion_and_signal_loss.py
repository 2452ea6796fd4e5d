"""Synthetic motion, tracker signals and the three data-loss scenarios.

Run:  python3 demos/03_synthetic_motion_and_signal_loss.py
"""
import numpy as np

from reliavatar import ScenarioSpec, synth_motion
from reliavatar.model import apply_scenario, choose_training_scenario
from reliavatar.skeleton import TrackerConfig, extract_tracker_stream, make_rng

motion = synth_motion(seed=7, num_frames=400)
print(f"clip: {motion.num_frames} frames at {motion.fps:g} fps, 22 joints")

# Head and both wrists: 6D orientation, 6D rotational velocity, position, linear velocity.
x = extract_tracker_stream(motion, TrackerConfig())
print("tracker stream shape (frames, trackers, 18):", x.shape)
print("head height range [m]:", np.round([x[:, 0, 13].min(), x[:, 0, 13].max()], 3))

x = x[None]
for text in ("standard", "instantaneous:0.3", "prolonged:40"):
    spec = ScenarioSpec.parse(text)
    _, mask = apply_scenario(x, spec, make_rng(0))
    print(f"{text:<18} lost tracker-frames: {mask.mean():.3f}")

# The prolonged protocol drops every tracker for the last M frames of each 80.
_, mask = apply_scenario(x, ScenarioSpec.parse("prolonged:40"))
lost = mask[0].all(axis=-1)
print("first lost frames:", np.flatnonzero(lost)[:3], "...", "visible again at", np.flatnonzero(~lost)[40])

# Training draws one of three treatments per window with equal probability.
rng = make_rng(1)
draws = [choose_training_scenario(rng).kind for _ in range(3000)]
print({k: round(draws.count(k) / len(draws), 3) for k in sorted(set(draws))})
