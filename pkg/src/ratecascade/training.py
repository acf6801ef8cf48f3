"""Two-stage flow-matching training.

Stage 1 (single rate) trains on full-rate clips with random Multi-Mask
conditions. Stage 2 (multi rate) samples a rate level per batch, subsamples
clips at that stride, offsets temporal indices by a random ``t_start`` and
mixes in coarser-level anchor masks so the model practises the refinement
task it performs at inference.

Noise levels follow a logit-normal distribution followed by the timestep
shift ``t -> s*t / (1 + (s-1)*t)``. Optimisation is AdamW with linear warmup,
and an EMA copy of the weights is kept alongside.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import MULTI_RATE, SINGLE_RATE, Checkpoint, save_checkpoint
from .denoiser import ModelConfig, forward_batch, init_params
from .errors import ContractError, TrainingError
from .multimask import (MultiMaskCondition, ShotLayout, build_conditioned_input,
                        drop_shot_conditions, sample_training_condition)
from .positions import TemporalIndexPlan, assign_indices, default_t_max, sample_t_start
from .seeding import as_rng, derive_rng
from .tensor import Tensor
from .world import SceneParams, render_frames

log = logging.getLogger(__name__)

STAGE_CODES = {SINGLE_RATE: 1, MULTI_RATE: 2}


@dataclass(frozen=True)
class NoiseSchedule:
    m_loc: float = 0.0
    s_scale: float = 1.0
    sigma_shift: float = 3.0

    def __post_init__(self):
        if self.s_scale <= 0:
            raise ContractError("s_scale must be positive")
        if self.sigma_shift < 1:
            raise ContractError("sigma_shift must be >= 1")

    def shift(self, t):
        s = self.sigma_shift
        return s * t / (1.0 + (s - 1.0) * t)


def logit_normal_pdf(t, m: float = 0.0, s: float = 1.0):
    t = np.asarray(t, dtype=np.float64)
    logit = np.log(t / (1.0 - t))
    return np.exp(-((logit - m) ** 2) / (2.0 * s * s)) / (s * math.sqrt(2.0 * math.pi) * t * (1.0 - t))


def logit_normal_cdf(t, m: float = 0.0, s: float = 1.0):
    from scipy.special import ndtr

    t = np.asarray(t, dtype=np.float64)
    return ndtr((np.log(t / (1.0 - t)) - m) / s)


def sample_t_unshifted(schedule: NoiseSchedule, rng_seed, size=None):
    rng = as_rng(rng_seed)
    u = rng.normal(schedule.m_loc, schedule.s_scale, size=size)
    return 1.0 / (1.0 + np.exp(-u))


def sample_t(schedule: NoiseSchedule, rng_seed, size=None):
    """Logit-normal draw passed through the sigma shift; values lie in (0, 1)."""
    t = schedule.shift(sample_t_unshifted(schedule, rng_seed, size))
    # keep strictly inside the open interval even after float rounding
    return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)) if size is not None else \
        float(min(max(t, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0)))


def interpolate(z0, z1, t: float):
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ContractError(f"interpolate: shapes {z0.shape} and {z1.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"interpolate: t={t} outside [0, 1]")
    return (1.0 - t) * z0 + t * z1


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and data settings for one stage.

    Full-scale reference values: 15000 / 45000 steps, batch 32, warmup 2000.
    The defaults here are the desk-scale counterparts.
    """

    stage: str = SINGLE_RATE
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    warmup_steps: int = 200
    ema_decay: float = 0.999
    steps: int = 2000
    rate_set: tuple[float, ...] = (24.0,)
    base_fps: float = 24.0
    clip_frames: int = 24
    anchor_prob: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.stage not in STAGE_CODES:
            raise ContractError(f"unknown stage {self.stage!r}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ContractError("ema_decay must lie in (0, 1)")
        if any(r <= 0 for r in self.rate_set):
            raise ContractError("rates must be positive")
        if self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ContractError("batch_size, steps and warmup_steps must be non-negative")

    @property
    def levels(self) -> tuple[int, ...]:
        out = []
        for fps in self.rate_set:
            ratio = self.base_fps / fps
            level = round(math.log2(ratio))
            if level < 0 or (1 << level) * fps != self.base_fps:
                raise ContractError(f"{fps} fps is not a power-of-two fraction of {self.base_fps}")
            out.append(level)
        return tuple(sorted(set(out)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate_set"] = list(self.rate_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["rate_set"] = tuple(d.get("rate_set", (24.0,)))
        d["noise"] = NoiseSchedule(**d.get("noise", {}))
        return cls(**d)


def stage1_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"stage": SINGLE_RATE, "learning_rate": 5e-4, "steps": 2000,
                          "rate_set": (24.0,), **overrides})


def stage2_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"stage": MULTI_RATE, "learning_rate": 2e-5, "steps": 4000,
                          "rate_set": (6.0, 12.0, 24.0), **overrides})


@dataclass
class TrainExample:
    frames: np.ndarray
    cond: MultiMaskCondition
    prompt: np.ndarray
    plan: TemporalIndexPlan
    scene_id: int
    positions: tuple[int, ...]
    condition_mode: str = "random"
    fraction: float | None = None
    clip_shots: ShotLayout = field(default_factory=ShotLayout)
    dropped_shots: tuple[int, ...] = ()

    @property
    def level(self) -> int:
        return self.plan.level


class TrainingData:
    """Scenes plus a cache of their full-rate renders."""

    def __init__(self, scenes: Sequence[SceneParams]):
        if not scenes:
            raise ContractError("training data needs at least one scene")
        self.scenes = list(scenes)
        self.frames = [render_frames(s, np.arange(s.duration)) for s in self.scenes]

    def __len__(self) -> int:
        return len(self.scenes)


def _clip_layout(scene: SceneParams, positions: Sequence[int]) -> ShotLayout:
    shots = [int(np.searchsorted(scene.layout.boundaries, p, side="right")) for p in positions]
    cuts = tuple(j for j in range(1, len(shots)) if shots[j] != shots[j - 1])
    return ShotLayout(cuts)


def anchor_slots(n: int, offset_frames: int, stride: int, skip: int) -> list[int]:
    """Slots of a clip that coincide with the grid ``skip`` levels coarser."""
    step = 1 << skip
    first = offset_frames // stride
    return [j for j in range(n) if (first + j + 1) % step == 0]


def make_example(data: TrainingData, config: TrainConfig, level: int, rng) -> TrainExample:
    sid = int(rng.integers(len(data)))
    scene = data.scenes[sid]
    m = 1 << level
    usable = scene.duration - scene.duration % m
    if usable != scene.duration:
        log.info("scene %d re-cropped from %d to %d frames for stride %d",
                 sid, scene.duration, usable, m)
    n = min(config.clip_frames, usable // m)
    if n < 1:
        raise ContractError(f"scene {sid} is too short for stride {m}")
    offset = m * int(rng.integers(0, (usable - n * m) // m + 1))
    positions = tuple(offset + (j + 1) * m - 1 for j in range(n))
    frames = data.frames[sid][list(positions)]
    max_level = max(config.levels)
    t_max = default_t_max(config.clip_frames, max_level)
    plan = assign_indices(n, level, sample_t_start(t_max, rng), t_max)
    layout = _clip_layout(scene, positions)
    ex = TrainExample(frames, MultiMaskCondition(n), scene.prompt(), plan, sid, positions,
                      clip_shots=layout)
    if config.stage == MULTI_RATE and level < max_level and rng.uniform() < config.anchor_prob:
        skip = int(rng.integers(1, max_level - level + 1))
        slots = anchor_slots(n, offset, m, skip)
        ex.cond = MultiMaskCondition.from_frames(n, slots, frames[slots])
        ex.condition_mode = "anchors"
        return ex
    ex.cond, ex.fraction = sample_training_condition(n, rng, frames)
    if config.stage == MULTI_RATE and layout.n_shots > 1:
        ex.cond, ex.dropped_shots = drop_shot_conditions(ex.cond, layout, rng)
    return ex


def sample_level(config: TrainConfig, rng) -> int:
    levels = config.levels
    return levels[int(rng.integers(len(levels)))]


def make_batch(data: TrainingData, config: TrainConfig, step: int) -> list[TrainExample]:
    """Level-homogeneous batch; a pure function of (seed, stage, step)."""
    rng = derive_rng(config.seed, config.stage, step, "batch")
    level = sample_level(config, rng) if config.stage == MULTI_RATE else 0
    return [make_example(data, config, level, rng) for _ in range(config.batch_size)]


def _stack(batch: Sequence[TrainExample]):
    T = {len(ex.plan) for ex in batch}
    levels = {ex.level for ex in batch}
    if len(T) != 1 or len(levels) != 1:
        raise ContractError("batch items must share sequence length and rate level")
    z0 = np.stack([ex.frames for ex in batch]).astype(np.float32)
    prompts = np.stack([ex.prompt for ex in batch]).astype(np.float32)
    indices = np.stack([ex.plan.as_array() for ex in batch])
    return z0, prompts, indices


def fm_loss(params, cfg: ModelConfig, batch: Sequence[TrainExample], schedule: NoiseSchedule,
            rng_seed) -> Tensor:
    """Mean squared error between predicted velocity and ``z1 - z0``."""
    rng = as_rng(rng_seed)
    z0, prompts, indices = _stack(batch)
    dtype = params["in_proj.w"].dtype
    z0 = z0.astype(dtype)
    B = len(batch)
    t = sample_t(schedule, rng, size=B)
    z1 = rng.standard_normal(z0.shape).astype(dtype)
    tt = t.astype(dtype)[:, None, None]
    zt = (1 - tt) * z0 + tt * z1
    channels = np.stack([build_conditioned_input(zt[i], ex.cond) for i, ex in enumerate(batch)])
    v = forward_batch(params, cfg, channels, t, prompts.astype(dtype), indices)
    return tn.mse(v, Tensor(z1 - z0))


def learning_rate_at(config: TrainConfig, k: int) -> float:
    """Learning rate for the k-th update (1-based): linear warmup, then constant."""
    if config.warmup_steps and k < config.warmup_steps:
        return config.learning_rate * k / config.warmup_steps
    return config.learning_rate


def new_checkpoint(cfg: ModelConfig, config: TrainConfig) -> Checkpoint:
    params = {k: v.data for k, v in init_params(cfg, derive_rng(config.seed, "init")).items()}
    return Checkpoint.fresh(cfg, params, stage=config.stage, train_config=config.to_dict(),
                            rng_state=_rng_state(config, 0))


def _rng_state(config: TrainConfig, step: int) -> dict:
    return {"scheme": "sha256(seed, stage, step, purpose)", "seed": config.seed,
            "stage": config.stage, "next_step": step}


@dataclass
class StepResult:
    loss: float
    lr: float
    grad_norm: float


def train_step(state: Checkpoint, batch: Sequence[TrainExample], config: TrainConfig,
               noise_seed=None) -> StepResult:
    """One AdamW update plus EMA, applied to ``state`` in place.

    ``noise_seed`` pins the (t, z1) draw, which turns repeated steps on one
    batch into plain optimisation of a fixed objective.
    """
    if config.stage != state.stage:
        raise ContractError(f"config stage {config.stage!r} does not match checkpoint {state.stage!r}")
    cfg = state.model_config
    leaves = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
    rng = derive_rng(config.seed, config.stage, state.step, "noise") if noise_seed is None else noise_seed
    loss = fm_loss(leaves, cfg, batch, config.noise, rng)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at {state.stage} step {state.step}; "
            f"param max |w| = {max(float(np.abs(p).max()) for p in state.params.values()):.3g}")
    tn.backward(loss)
    grads = {k: leaves[k].grad for k in state.params}
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at {state.stage} step {state.step}")
    scale = 1.0
    if config.grad_clip and norm > config.grad_clip:
        scale = config.grad_clip / norm

    k = state.step + 1
    lr = learning_rate_at(config, k)
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
    decay = config.ema_decay
    for name, p in state.params.items():
        g = grads[name] * np.float32(scale) if scale != 1.0 else grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1.0 - b2) * (g * g)
        update = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(config.adam_eps))
        p -= np.float32(lr) * (update + np.float32(config.weight_decay) * p)
        e = state.ema[name]
        e *= np.float32(decay)
        e += np.float32(1.0 - decay) * p
    state.step = k
    state.rng_state = _rng_state(config, k)
    return StepResult(value, lr, norm)


def level_histogram(batch: Sequence[TrainExample]) -> str:
    counts = Counter(ex.level for ex in batch)
    return "|".join(f"l{lv}:{counts[lv]}" for lv in sorted(counts))


class TrainLog:
    """CSV training log: step, stage, loss, lr, grad_norm, level histogram."""

    FIELDS = ("step", "stage", "loss", "lr", "grad_norm", "levels")

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([row[f] for f in self.FIELDS])


def _run(data: TrainingData, config: TrainConfig, state: Checkpoint, train_log: TrainLog | None,
         record: list | None, checkpoint_every: int, checkpoint_path,
         on_step: Callable | None) -> Checkpoint:
    state.train_config = config.to_dict()
    while state.step < config.steps:
        batch = make_batch(data, config, state.step)
        if record is not None:
            record.extend(batch)
        res = train_step(state, batch, config)
        if train_log is not None:
            train_log.append({"step": state.step, "stage": config.stage, "loss": f"{res.loss:.6g}",
                              "lr": f"{res.lr:.6g}", "grad_norm": f"{res.grad_norm:.6g}",
                              "levels": level_histogram(batch)})
        if on_step is not None:
            on_step(state, res)
        if checkpoint_every and checkpoint_path and state.step % checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    return state


def run_stage1(data, config: TrainConfig, cfg: ModelConfig | None = None,
               state: Checkpoint | None = None, train_log: TrainLog | None = None,
               record: list | None = None, checkpoint_every: int = 0, checkpoint_path=None,
               on_step: Callable | None = None) -> Checkpoint:
    """Single-rate Multi-Mask training on full-rate clips."""
    if config.stage != SINGLE_RATE:
        raise ContractError("run_stage1 needs a single_rate config")
    if not isinstance(data, TrainingData):
        data = TrainingData(data)
    if state is None:
        state = new_checkpoint(cfg or ModelConfig(), config)
    elif state.stage != SINGLE_RATE:
        raise ContractError(f"cannot continue stage 1 from a {state.stage} checkpoint")
    return _run(data, config, state, train_log, record, checkpoint_every, checkpoint_path, on_step)


def begin_stage2(stage1: Checkpoint, config: TrainConfig) -> Checkpoint:
    """Carry stage-1 weights and EMA into a fresh stage-2 optimiser state."""
    params = {k: v.copy() for k, v in stage1.params.items()}
    return Checkpoint(stage1.model_config, params,
                      ema={k: v.copy() for k, v in stage1.ema.items()},
                      adam_m={k: np.zeros_like(v) for k, v in params.items()},
                      adam_v={k: np.zeros_like(v) for k, v in params.items()},
                      stage=MULTI_RATE, step=0, train_config=config.to_dict(),
                      rng_state=_rng_state(config, 0))


def run_stage2(data, config: TrainConfig, init: Checkpoint, train_log: TrainLog | None = None,
               record: list | None = None, checkpoint_every: int = 0, checkpoint_path=None,
               on_step: Callable | None = None) -> Checkpoint:
    """Multi-rate training continuing from a stage-1 (or partial stage-2) checkpoint."""
    if config.stage != MULTI_RATE:
        raise ContractError("run_stage2 needs a multi_rate config")
    if not isinstance(data, TrainingData):
        data = TrainingData(data)
    state = begin_stage2(init, config) if init.stage == SINGLE_RATE else init
    return _run(data, config, state, train_log, record, checkpoint_every, checkpoint_path, on_step)


def eval_loss(params: dict[str, np.ndarray], cfg: ModelConfig, data, config: TrainConfig,
              n_batches: int = 4, seed: int = 12345) -> float:
    """Flow-matching loss on fixed, seed-determined batches (no gradients)."""
    if not isinstance(data, TrainingData):
        data = TrainingData(data)
    probe = replace(config, seed=seed)
    total = 0.0
    with tn.no_grad():
        leaves = {k: Tensor(v) for k, v in params.items()}
        for i in range(n_batches):
            batch = make_batch(data, probe, i)
            total += float(fm_loss(leaves, cfg, batch, config.noise,
                                   derive_rng(seed, "eval-noise", i)).data)
    return total / n_batches
