"""World-centric 3D tracking from 2D tracks, monocular depth and dynamic masks."""

from .config import PipelineConfig, SolverConfig
from .errors import WtrkError
from .metrics import EvalReport
from .pipeline import PipelineResult, eval_only, run_pipeline, run_scene
from .synth import ObjectSpec, SynthConfig, generate, write_synth
from .tensorio import SceneBundle, load_scene, read_tensor, write_scene, write_tensor

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "ObjectSpec", "PipelineConfig", "PipelineResult", "SceneBundle",
    "SolverConfig", "SynthConfig", "WtrkError", "eval_only", "generate", "load_scene",
    "read_tensor", "run_pipeline", "run_scene", "write_scene", "write_synth", "write_tensor",
]
