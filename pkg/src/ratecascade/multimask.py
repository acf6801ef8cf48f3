"""Multi-Mask conditions.

A condition is a sparse set of clean frames pinned to positions of a length-T
sequence. It is materialised as a zero-padded ``T x D`` block plus a 0/1
frame mask, and both are concatenated with the noisy frames along the
channel axis. T2V (no frames), I2V (first frame), FLF2V (first and last
frame) and continuation (a prefix) are all just different position sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError
from .seeding import as_rng

MAX_CONDITION_FRACTION = 0.15


@dataclass(frozen=True)
class ShotLayout:
    """Positions where a new shot begins; position 0 is implicit."""

    boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if any(x <= 0 for x in b) or any(y <= x for x, y in zip(b, b[1:])):
            raise ContractError(f"shot boundaries must be positive and strictly increasing: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_shots(self) -> int:
        return len(self.boundaries) + 1

    def validate(self, length: int) -> None:
        if self.boundaries and self.boundaries[-1] >= length:
            raise ContractError(f"shot boundary {self.boundaries[-1]} outside length {length}")

    def shot_of(self, position: int) -> int:
        return int(np.searchsorted(self.boundaries, position, side="right"))

    def shot_range(self, shot: int, length: int) -> tuple[int, int]:
        edges = (0,) + self.boundaries + (length,)
        return edges[shot], edges[shot + 1]


@dataclass(frozen=True)
class MultiMaskCondition:
    length: int
    entries: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.length < 1:
            raise ContractError(f"condition length must be positive, got {self.length}")
        clean = {}
        dim = None
        for pos, frame in sorted(self.entries.items()):
            pos = int(pos)
            if not 0 <= pos < self.length:
                raise ContractError(f"condition position {pos} outside [0, {self.length})")
            frame = np.asarray(frame)
            if frame.ndim != 1 or (dim is not None and frame.shape[0] != dim):
                raise ContractError("condition frames must be vectors of equal length")
            dim = frame.shape[0]
            clean[pos] = frame
        object.__setattr__(self, "entries", clean)

    @classmethod
    def from_frames(cls, length: int, positions, frames: np.ndarray) -> "MultiMaskCondition":
        return cls(length, {int(p): frames[i] for i, p in enumerate(positions)})

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(self.entries)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=np.float64)
        m[list(self.entries)] = 1.0
        return m

    def __len__(self) -> int:
        return len(self.entries)

    def without(self, positions) -> "MultiMaskCondition":
        drop = set(positions)
        return MultiMaskCondition(self.length, {p: f for p, f in self.entries.items() if p not in drop})


def condition_block(cond: MultiMaskCondition, dim: int, dtype=np.float64) -> np.ndarray:
    block = np.zeros((cond.length, dim), dtype=dtype)
    for pos, frame in cond.entries.items():
        if frame.shape[0] != dim:
            raise ContractError(f"condition frame has {frame.shape[0]} channels, expected {dim}")
        block[pos] = frame
    return block


def build_conditioned_input(noisy: np.ndarray, cond: MultiMaskCondition) -> np.ndarray:
    """Channel layout per frame: noisy (D) | zero-padded condition (D) | mask (1)."""
    noisy = np.asarray(noisy)
    if noisy.ndim != 2:
        raise ContractError(f"noisy frames must be T x D, got shape {noisy.shape}")
    T, D = noisy.shape
    if cond.length != T:
        raise ContractError(f"condition length {cond.length} != sequence length {T}")
    out = np.empty((T, 2 * D + 1), dtype=noisy.dtype)
    out[:, :D] = noisy
    out[:, D:2 * D] = condition_block(cond, D, noisy.dtype)
    out[:, 2 * D] = cond.mask
    return out


def conditioned_positions(channels: np.ndarray) -> tuple[int, ...]:
    """Recover the conditioned position set from the mask channel."""
    return tuple(int(p) for p in np.flatnonzero(channels[:, -1] == 1.0))


def sample_training_condition(T: int, rng_seed, frames: np.ndarray | None = None,
                              max_fraction: float = MAX_CONDITION_FRACTION):
    """Pick ``floor(f * T)`` distinct positions with ``f ~ U[0, max_fraction]``.

    Returns the condition (frames taken from ``frames`` when given, zeros
    otherwise) and the drawn fraction.
    """
    if T < 1:
        raise ContractError(f"T must be positive, got {T}")
    rng = as_rng(rng_seed)
    fraction = float(rng.uniform(0.0, max_fraction))
    count = math.floor(fraction * T)
    positions = np.sort(rng.choice(T, size=count, replace=False)) if count else []
    if frames is None:
        frames = np.zeros((T, 1))
    return MultiMaskCondition(T, {int(p): frames[p] for p in positions}), fraction


def drop_shot_conditions(cond: MultiMaskCondition, shots: ShotLayout, rng_seed):
    """Remove every condition inside a random nonempty subset of shots.

    Single-shot layouts are returned unchanged. Returns the new condition and
    the sorted tuple of dropped shot ids.
    """
    shots.validate(cond.length)
    if shots.n_shots < 2:
        return cond, ()
    rng = as_rng(rng_seed)
    n = shots.n_shots
    # nonempty subset, uniform over the 2^n - 1 choices
    code = int(rng.integers(1, 1 << n))
    selected = tuple(s for s in range(n) if code >> s & 1)
    chosen = set(selected)
    drop = [p for p in cond.entries if shots.shot_of(p) in chosen]
    return cond.without(drop), selected


def overwrite_anchors(generated: np.ndarray, cond: MultiMaskCondition) -> np.ndarray:
    generated = np.asarray(generated)
    if generated.shape[0] != cond.length:
        raise ContractError(f"sequence length {generated.shape[0]} != condition length {cond.length}")
    out = generated.copy()
    for pos, frame in cond.entries.items():
        if frame.shape[0] != out.shape[1]:
            raise ContractError("condition frame width does not match generated frames")
        out[pos] = frame
    return out
