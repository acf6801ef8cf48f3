"""Frame-rate levels, temporal index plans and interval-scaled rotary embeddings.

Level ``i`` keeps every ``2**i``-th frame of the full-rate video. Temporal
position indices advance by the level stride, so a half-rate clip is seen by
the attention layers with an index gap of 2. A random offset ``t_start`` is
added to every index during training; rotary embeddings only depend on index
differences, so the offset never changes attention logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .seeding import as_rng
from .tensor import Tensor, get_default_dtype, mul, add, pair_swap

DEFAULT_THETA = 10000.0


@dataclass(frozen=True)
class RateLevel:
    level: int
    base_fps: float = 24.0

    def __post_init__(self):
        if self.level < 0:
            raise ContractError(f"rate level must be >= 0, got {self.level}")

    @property
    def stride(self) -> int:
        return 1 << self.level

    @property
    def fps(self) -> float:
        return self.base_fps / self.stride

    @classmethod
    def from_fps(cls, fps: float, base_fps: float) -> "RateLevel":
        ratio = base_fps / fps
        level = round(math.log2(ratio)) if ratio >= 1 else -1
        if level < 0 or (1 << level) * fps != base_fps:
            raise ConfigError(f"{fps} fps is not a power-of-two fraction of {base_fps} fps")
        return cls(level, base_fps)


@dataclass(frozen=True)
class TemporalIndexPlan:
    t_start: float
    level: int
    indices: tuple[float, ...] = field(repr=False)
    t_max: float = math.inf

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def stride(self) -> int:
        return 1 << self.level

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.indices, dtype=dtype)

    def shifted(self, offset: float) -> "TemporalIndexPlan":
        return TemporalIndexPlan(self.t_start + offset, self.level,
                                 tuple(t + offset for t in self.indices), math.inf)

    def satisfies_index_rule(self) -> bool:
        """True when every index equals ``t_start + j * 2**level`` exactly."""
        return all(t == self.t_start + j * self.stride for j, t in enumerate(self.indices))


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = DEFAULT_THETA

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"rotary head_dim must be a positive even number, got {self.head_dim}")

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta_base ** (-2.0 * k / self.head_dim)


def subsample_indices(T: int, level: int) -> list[int]:
    """1-based frame numbers kept at ``level``: ``(m, 2m, ..., T)`` with ``m = 2**level``."""
    m = 1 << level
    if T < 1 or T % m:
        raise ContractError(f"T={T} is not divisible by the level-{level} stride {m}")
    return list(range(m, T + 1, m))


def subsample_positions(T: int, level: int) -> list[int]:
    """0-based counterpart of :func:`subsample_indices`."""
    return [k - 1 for k in subsample_indices(T, level)]


def assign_indices(n_frames: int, level: int, t_start: float,
                   t_max: float = math.inf) -> TemporalIndexPlan:
    if n_frames < 1:
        raise ContractError(f"n_frames must be positive, got {n_frames}")
    if not (0.0 <= t_start <= t_max):
        raise ContractError(f"t_start={t_start} outside [0, {t_max}]")
    m = 1 << level
    t_start = float(t_start)
    return TemporalIndexPlan(t_start, level, tuple(t_start + j * m for j in range(n_frames)), t_max)


def sample_t_start(t_max: float, rng_seed=None) -> float:
    if t_max < 0:
        raise ContractError(f"T_max must be non-negative, got {t_max}")
    if t_max == 0:
        return 0.0
    return float(as_rng(rng_seed).uniform(0.0, t_max))


def default_t_max(clip_frames: int, max_level: int) -> float:
    """Four times the widest index span seen in training."""
    return 4.0 * (clip_frames - 1) * (1 << max_level)


def rope_tables(indices: np.ndarray, params: RopeParams, dtype=None):
    """Interleaved cos/sin tables of shape ``indices.shape + (head_dim,)``."""
    dtype = dtype or get_default_dtype()
    angles = np.asarray(indices, dtype=np.float64)[..., None] * params.frequencies()
    cos = np.repeat(np.cos(angles), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=-1).astype(dtype)
    return cos, sin


def rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate coordinate pairs of ``x`` by precomputed angle tables."""
    return add(mul(x, Tensor(cos, dtype=x.dtype)), mul(pair_swap(x), Tensor(sin, dtype=x.dtype)))


def rope_apply(vec: Tensor, index: float, params: RopeParams) -> Tensor:
    if vec.shape[-1] != params.head_dim:
        raise ConfigError(f"vector length {vec.shape[-1]} != head_dim {params.head_dim}")
    cos, sin = rope_tables(np.asarray(index), params, dtype=vec.dtype)
    return rotate(vec, cos, sin)
