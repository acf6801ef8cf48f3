"""Coarse-to-fine video generation across frame-rate levels, at desk scale.

Frames are produced lowest rate first; each finer rate fills in the frames
between its anchors, and segments of one rate run in parallel.
"""

__version__ = "0.1.0"

from .denoiser import ModelConfig, forward, init_params
from .errors import RateCascadeError
from .inference import continue_video, generate, ode_sample
from .planning import ParallelConfig, analytic_bound, flop_count, parse_config, plan_tree
from .world import SceneParams, evaluate, render_scene

__all__ = [
    "ModelConfig", "ParallelConfig", "RateCascadeError", "SceneParams", "analytic_bound",
    "continue_video", "evaluate", "flop_count", "forward", "generate", "init_params",
    "ode_sample", "parse_config", "plan_tree", "render_scene",
]
