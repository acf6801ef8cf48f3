"""Sampling: the Euler ODE solver, tree-parallel generation and continuation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .denoiser import ModelConfig, forward
from .errors import ContractError, SamplingError
from .multimask import MultiMaskCondition, build_conditioned_input, overwrite_anchors
from .planning import ParallelConfig, TreeNode, plan_tree
from .pool import ExecutionTrace, worker_pool_execute
from .positions import RateLevel, TemporalIndexPlan, assign_indices
from .seeding import as_rng, derive_seed
from .tensor import Tensor
from .training import NoiseSchedule
from .world import VideoSequence

Velocity = Callable[[np.ndarray, float], np.ndarray]


def time_grid(steps: int, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Shifted integration grid from t=1 down to t=0 (steps + 1 points)."""
    schedule = schedule or NoiseSchedule()
    return schedule.shift(np.linspace(1.0, 0.0, steps + 1))


def _as_tensors(params):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def ode_sample(params, cfg: ModelConfig, cond: MultiMaskCondition, prompt, indices, steps: int,
               rng_seed, schedule: NoiseSchedule | None = None,
               velocity: Velocity | None = None) -> np.ndarray:
    """Integrate dz/dt = v(z, t) from noise at t=1 to data at t=0 with Euler steps.

    ``velocity(channels, t)`` replaces the network when given. Conditioned
    frames are fed through the condition channels only; the caller decides
    whether to overwrite them afterwards.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if isinstance(indices, TemporalIndexPlan):
        indices = indices.as_array()
    if len(indices) != cond.length:
        raise ContractError(f"{len(indices)} temporal indices for a length-{cond.length} condition")
    if velocity is None:
        tensors = _as_tensors(params)
        dtype = tensors["in_proj.w"].data.dtype.type
        prompt = np.asarray(prompt, dtype=dtype)

        def velocity(channels, t):
            return forward(tensors, cfg, channels, t, prompt, indices)
    else:
        dtype = np.float32
    rng = as_rng(rng_seed)
    z = rng.standard_normal((cond.length, cfg.frame_dim)).astype(dtype)
    grid = time_grid(steps, schedule)
    for k in range(steps):
        t, t_next = float(grid[k]), float(grid[k + 1])
        v = np.asarray(velocity(build_conditioned_input(z, cond), t), dtype=dtype)
        z = z + dtype(t_next - t) * v
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite state after step {k + 1} (t={t_next:.4g})", step=k + 1)
    return z


@dataclass
class GenerationResult:
    video: VideoSequence
    stages: dict[int, VideoSequence] = field(default_factory=dict)
    trace: ExecutionTrace | None = None


def generate(params, cfg_model: ModelConfig, cfg_par: ParallelConfig, prompt, N: int,
             seed: int, initial_cond: MultiMaskCondition | None = None, workers: int = 1,
             schedule: NoiseSchedule | None = None, return_stages: bool = False,
             velocity_factory: Callable[[TreeNode], Velocity] | None = None):
    """Generate N full-rate frames by coarse-to-fine refinement over a segment tree.

    Each node denoises its segment at its stage's rate, conditioned on the
    coarser frames inside the segment (anchors) and any ``initial_cond``
    frames on its grid. Results depend only on ``seed``, never on ``workers``.
    """
    tree = plan_tree(cfg_par, N)
    if initial_cond is None:
        initial_cond = MultiMaskCondition(N)
    if initial_cond.length != N:
        raise ContractError(f"initial condition covers {initial_cond.length} frames, need {N}")
    D = cfg_model.frame_dim
    base_fps = cfg_par.base_fps
    # stage_frames[s][p] holds the stage-s frame at full-rate position p
    stage_frames = [np.zeros((N, D), dtype=np.float32) for _ in range(cfg_par.K)]

    def run(node: TreeNode) -> None:
        s = node.stage
        anchors = set(node.anchors)
        entries = {}
        for j, pos in enumerate(node.positions):
            if pos in anchors:
                entries[j] = stage_frames[s - 1][pos]
            elif pos in initial_cond.entries:
                entries[j] = np.asarray(initial_cond.entries[pos], dtype=np.float32)
        cond = MultiMaskCondition(node.T, entries)
        plan = assign_indices(node.T, node.level, float(node.positions[0]))
        velocity = velocity_factory(node) if velocity_factory else None
        out = ode_sample(params, cfg_model, cond, prompt, plan, cfg_par.denoise_steps[s],
                         derive_seed(seed, "node", node.level, node.segment), schedule, velocity)
        stage_frames[s][list(node.positions)] = overwrite_anchors(out, cond).astype(np.float32)

    with threadpool_limits(limits=1):
        trace = worker_pool_execute(tree, workers, run)

    full = np.ascontiguousarray(stage_frames[-1])
    video = VideoSequence(full, RateLevel(0, base_fps), assign_indices(N, 0, 0.0))
    if not return_stages:
        return video
    stages = {}
    for s in range(cfg_par.K - 1):
        level = cfg_par.levels[s]
        pos = tree.level_positions(s)
        stages[level] = VideoSequence(stage_frames[s][pos].copy(), RateLevel(level, base_fps),
                                      assign_indices(len(pos), level, 0.0))
    return GenerationResult(video, stages, trace)


def continue_video(params, cfg_model: ModelConfig, cfg_par: ParallelConfig, previous: VideoSequence,
                   overlap: int, N_new: int, prompt, seed: int, workers: int = 1,
                   schedule: NoiseSchedule | None = None) -> VideoSequence:
    """Extend ``previous`` by conditioning a new N_new-frame window on its last ``overlap`` frames.

    The returned sequence is ``previous`` followed by the N_new - overlap new frames.
    """
    if previous.level.level != 0:
        raise ContractError("continuation needs a full-rate sequence")
    if not 0 <= overlap <= previous.T:
        raise ContractError(f"overlap {overlap} must lie in [0, {previous.T}]")
    if N_new <= overlap:
        raise ContractError(f"new window of {N_new} frames adds nothing after {overlap} overlap frames")
    tail = previous.frames[previous.T - overlap:]
    cond = MultiMaskCondition(N_new, {j: tail[j] for j in range(overlap)})
    window = generate(params, cfg_model, cfg_par, prompt, N_new, seed, cond, workers, schedule)
    frames = np.concatenate([previous.frames, window.frames[overlap:]]).astype(np.float32)
    return VideoSequence(frames, previous.level,
                         assign_indices(len(frames), 0, previous.indices.t_start), previous.scene)

