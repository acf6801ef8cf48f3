"""Continuous-time synthetic videos with exact ground truth at every frame rate.

A frame is a D-vector sampled on a 1-D grid of D cells. Each shot shows a
Gaussian bump whose centre oscillates along the grid, on top of a weak
travelling-wave background. All quantities are closed-form functions of the
continuous frame time, so a clip rendered at half rate is bit-for-bit the
odd-numbered frames of the full-rate clip.

Per-shot parameters are seven numbers in [-1, 1]:

    centre, amplitude, frequency, phase, width, height, background
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .multimask import ShotLayout
from .positions import RateLevel, TemporalIndexPlan, assign_indices, subsample_positions
from .seeding import as_rng

N_SHOT_PARAMS = 7
PROMPT_DIM = 8
BASE_FPS = 24.0
DEFAULT_DURATION = 96
DEFAULT_FRAME_DIM = 16
PERIOD_FRAMES = 96.0  # frequency parameter counts cycles per this many frames
BACKGROUND_PERIOD = 48.0


@dataclass(frozen=True)
class SceneParams:
    shots: tuple[tuple[float, ...], ...]
    layout: ShotLayout = field(default_factory=ShotLayout)
    duration: int = DEFAULT_DURATION
    frame_dim: int = DEFAULT_FRAME_DIM

    def __post_init__(self):
        shots = tuple(tuple(float(v) for v in s) for s in self.shots)
        if len(shots) != self.layout.n_shots:
            raise ContractError(f"{len(shots)} parameter sets for {self.layout.n_shots} shots")
        for s in shots:
            if len(s) != N_SHOT_PARAMS or any(not -1.0 <= v <= 1.0 for v in s):
                raise ContractError(f"shot parameters must be {N_SHOT_PARAMS} values in [-1, 1]")
        if self.duration < 1:
            raise ContractError("duration must be positive")
        self.layout.validate(self.duration)
        object.__setattr__(self, "shots", shots)

    @property
    def multi_shot(self) -> bool:
        return self.layout.n_shots > 1

    def prompt(self) -> np.ndarray:
        """Prompt vector for the opening shot (phase encoded as cos/sin)."""
        c, a, f, ph, w, h, bg = self.shots[0]
        return np.array([c, a, f, math.cos(math.pi * ph), math.sin(math.pi * ph), w, h, bg])

    def with_duration(self, duration: int) -> "SceneParams":
        return replace(self, duration=duration)


def _shot_terms(p, t: np.ndarray, D: int):
    c, a, f, ph, w, h, bg = p
    unit = D / 16.0
    centre = (D - 1) / 2.0 + unit * (3.0 * c + (2.5 + 1.5 * a) * np.sin(
        2.0 * math.pi * (1.25 + 0.5 * f) * t / PERIOD_FRAMES + math.pi * ph))
    return centre, unit * (1.5 + 0.5 * w), 1.0 + 0.25 * h, 0.1 + 0.05 * bg


def bump_center(scene: SceneParams, t) -> np.ndarray:
    """Analytic bump centre (in grid cells) at continuous frame time ``t``."""
    t = np.asarray(t, dtype=np.float64)
    shot = np.searchsorted(scene.layout.boundaries, t, side="right")
    out = np.empty_like(t)
    for s, p in enumerate(scene.shots):
        sel = shot == s
        out[sel] = _shot_terms(p, t[sel], scene.frame_dim)[0]
    return out


def render_frames(scene: SceneParams, positions) -> np.ndarray:
    """Frames at arbitrary 0-based full-rate positions, shape (len, D), float32."""
    t = np.asarray(positions, dtype=np.float64)
    D = scene.frame_dim
    cells = np.arange(D, dtype=np.float64)
    shot = np.searchsorted(scene.layout.boundaries, t, side="right")
    out = np.empty((t.shape[0], D), dtype=np.float64)
    for s, p in enumerate(scene.shots):
        sel = shot == s
        if not sel.any():
            continue
        ts = t[sel]
        centre, width, height, bg = _shot_terms(p, ts, D)
        bump = height * np.exp(-((cells[None, :] - centre[:, None]) ** 2) / (2.0 * width * width))
        wave = bg * np.sin(2.0 * math.pi * (2.0 * cells[None, :] / D + ts[:, None] / BACKGROUND_PERIOD))
        out[sel] = bump + wave
    return out.astype(np.float32)


@dataclass
class VideoSequence:
    frames: np.ndarray
    level: RateLevel
    indices: TemporalIndexPlan
    scene: SceneParams | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ContractError(f"frames must be T x D, got {self.frames.shape}")
        if len(self.indices) != self.frames.shape[0]:
            raise ContractError(
                f"{len(self.indices)} temporal indices for {self.frames.shape[0]} frames")
        if self.indices.level != self.level.level:
            raise ContractError("index stride does not match the rate level")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


def render_scene(scene: SceneParams, level: RateLevel | int = 0, t_start: float = 0.0) -> VideoSequence:
    """Render the whole scene at ``level``; frame j shows full-rate position (j+1)*2^level - 1."""
    if isinstance(level, int):
        level = RateLevel(level, BASE_FPS)
    positions = subsample_positions(scene.duration, level.level)
    plan = assign_indices(len(positions), level.level, t_start)
    return VideoSequence(render_frames(scene, positions), level, plan, scene)


def random_shot_params(rng) -> tuple[float, ...]:
    return tuple(float(v) for v in rng.uniform(-1.0, 1.0, size=N_SHOT_PARAMS))


def random_scene(rng, multi_shot: bool = False, duration: int = DEFAULT_DURATION,
                 frame_dim: int = DEFAULT_FRAME_DIM) -> SceneParams:
    rng = as_rng(rng)
    if multi_shot:
        n_cuts = int(rng.integers(1, 3))
        lo, hi = max(1, duration // 8), duration - max(1, duration // 8)
        cuts = np.sort(rng.choice(np.arange(lo, hi), size=n_cuts, replace=False))
        layout = ShotLayout(tuple(int(c) for c in cuts))
    else:
        layout = ShotLayout()
    shots = tuple(random_shot_params(rng) for _ in range(layout.n_shots))
    return SceneParams(shots, layout, duration, frame_dim)


@dataclass
class EvalReport:
    per_frame_mse: np.ndarray
    signal_variance: float
    signal_power: float
    drift_slope: float
    anchor_violations: int = 0

    @property
    def mse(self) -> float:
        return float(self.per_frame_mse.mean())

    @property
    def relative_mse(self) -> float:
        return self.mse / self.signal_variance if self.signal_variance > 0 else math.inf

    def summary(self) -> str:
        return (f"mse={self.mse:.6g} signal_variance={self.signal_variance:.6g} "
                f"relative_mse={self.relative_mse:.4f} drift_slope={self.drift_slope:.6g} "
                f"anchor_violations={self.anchor_violations}")


def drift_slope(errors: np.ndarray) -> float:
    """Least-squares slope of per-frame error against frame index."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < 2:
        return 0.0
    x = np.arange(errors.size, dtype=np.float64)
    x -= x.mean()
    return float((x * (errors - errors.mean())).sum() / (x * x).sum())


def count_anchor_violations(full_rate: np.ndarray, stages: dict[int, VideoSequence]) -> int:
    """Frames of coarser stage outputs that differ bitwise from the full-rate result."""
    bad = 0
    for seq in stages.values():
        positions = subsample_positions(full_rate.shape[0], seq.level.level)
        bad += int(np.any(full_rate[positions] != seq.frames, axis=1).sum())
    return bad


def evaluate(generated: VideoSequence, scene: SceneParams,
             stages: dict[int, VideoSequence] | None = None) -> EvalReport:
    if generated.level.level != 0:
        raise ContractError(f"evaluate needs a full-rate sequence, got level {generated.level.level}")
    truth = render_frames(scene, np.arange(generated.T)).astype(np.float64)
    err = ((generated.frames.astype(np.float64) - truth) ** 2).mean(axis=1)
    violations = count_anchor_violations(generated.frames, stages) if stages else 0
    return EvalReport(err, float(truth.var()), float((truth ** 2).mean()),
                      drift_slope(err), violations)
