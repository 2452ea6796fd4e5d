"""Full-body avatar pose from sparse trackers with simulated signal loss.

Pure numpy: a small reverse-mode autodiff core, a dual-pathway recurrent
transformer model, training, evaluation protocols and file formats.
"""

from .model import ModelConfig, ReliaAvatar, ScenarioSpec
from .skeleton import MotionSequence, TrackerConfig, synth_motion
from .trainer import LossWeights, TrainConfig, compute_loss, train

__all__ = [
    "LossWeights", "ModelConfig", "MotionSequence", "ReliaAvatar", "ScenarioSpec", "TrackerConfig",
    "TrainConfig", "compute_loss", "synth_motion", "train",
]
__version__ = "0.1.0"
