"""Global structure-from-motion with first-order optimization."""

from .config import PipelineConfig
from .metrics import PoseMetrics, compute_pose_metrics
from .pipeline import SceneEstimate, run_pipeline
from .synth import SynthConfig, generate_scene

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "PoseMetrics",
    "SceneEstimate",
    "SynthConfig",
    "compute_pose_metrics",
    "generate_scene",
    "run_pipeline",
]
