"""Training-free insertion of a reference subject into a scene with a diffusion backend."""

from .backend import load_backend, make_schedule, make_toy_backend
from .errors import SceneGraftError
from .pipeline import GenerationResult, Pipeline, PipelineConfig, PromptPair, run, run_ablation

__version__ = "0.1.0"

__all__ = [
    "GenerationResult",
    "Pipeline",
    "PipelineConfig",
    "PromptPair",
    "SceneGraftError",
    "load_backend",
    "make_schedule",
    "make_toy_backend",
    "run",
    "run_ablation",
]
