"""Parallel-config grammar, generation trees and cost accounting.

A config string such as ``f(6,12,24)m(1,2,4)`` lists the frame rate of each
inference stage and how many contiguous segments that stage is split into.
An optional ``s(...)`` group sets the denoising steps per stage. The highest
rate is the full rate (level 0); a stage at ``fps`` runs at level
``log2(max_fps / fps)``.

Stage ``i`` covers the whole timeline of N full-rate frames, cut into
``M_i`` equal intervals. A node's frames are the level-grid positions in its
interval; those already produced by coarser stages are its anchors.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

from .denoiser import ModelConfig, flops_forward
from .errors import ConfigError, ParseError, PlanError

DEFAULT_STEPS = 50


@dataclass(frozen=True)
class ParallelConfig:
    stage_fps: tuple[float, ...]
    stage_segments: tuple[int, ...]
    denoise_steps: tuple[int, ...] = ()
    W: int | None = None

    def __post_init__(self):
        K = len(self.stage_fps)
        if K == 0:
            raise ConfigError("at least one stage is required")
        if len(self.stage_segments) != K:
            raise ConfigError(f"{K} frame rates but {len(self.stage_segments)} segment counts")
        steps = self.denoise_steps or (DEFAULT_STEPS,) * K
        if len(steps) != K:
            raise ConfigError(f"{K} frame rates but {len(steps)} step counts")
        object.__setattr__(self, "denoise_steps", tuple(int(s) for s in steps))
        if any(m < 1 for m in self.stage_segments) or any(s < 1 for s in self.denoise_steps):
            raise ConfigError("segment and step counts must be positive")
        if any(f <= 0 for f in self.stage_fps):
            raise ConfigError("frame rates must be positive")
        for a, b in zip(self.stage_fps, self.stage_fps[1:]):
            if not b > a:
                raise ConfigError(f"frame rates must increase: {a} then {b}")
            if not _power_of_two_ratio(a, b):
                raise ConfigError(f"{b}/{a} is not a power of two")

    @property
    def K(self) -> int:
        return len(self.stage_fps)

    @property
    def base_fps(self) -> float:
        return self.stage_fps[-1]

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(round(math.log2(self.base_fps / f)) for f in self.stage_fps)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(1 << lv for lv in self.levels)

    def text(self) -> str:
        def fmt(v):
            return str(int(v)) if float(v).is_integer() else repr(float(v))
        out = "f(" + ",".join(fmt(f) for f in self.stage_fps) + ")"
        out += "m(" + ",".join(str(m) for m in self.stage_segments) + ")"
        if any(s != DEFAULT_STEPS for s in self.denoise_steps):
            out += "s(" + ",".join(str(s) for s in self.denoise_steps) + ")"
        return out

    def with_steps(self, steps) -> "ParallelConfig":
        if isinstance(steps, int):
            steps = (steps,) * self.K
        return ParallelConfig(self.stage_fps, self.stage_segments, tuple(steps), self.W)


def _power_of_two_ratio(a: float, b: float) -> bool:
    r = b / a
    k = round(math.log2(r)) if r > 0 else -1
    return k >= 1 and a * (1 << k) == b


_GROUP = re.compile(r"\s*([fms])\s*\(\s*([^()]*?)\s*\)")
_NUMBER = re.compile(r"\d+(?:\.\d+)?$")


def parse_config(text: str) -> ParallelConfig:
    """Parse ``f(r1,...,rK)m(M1,...,MK)`` with an optional ``s(n1,...,nK)``."""
    groups: dict[str, tuple[list[str], int]] = {}
    pos = 0
    order = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _GROUP.match(text, pos)
        if not match:
            raise ParseError(f"expected f(...), m(...) or s(...) in {text!r}", pos)
        key = match.group(1)
        if key in groups:
            raise ParseError(f"group {key}(...) appears twice", match.start(1))
        items = [x.strip() for x in match.group(2).split(",")] if match.group(2).strip() else []
        for item in items:
            if not _NUMBER.match(item):
                raise ParseError(f"{item!r} is not a number", match.start(2))
        groups[key] = (items, match.start(1))
        order.append(key)
        pos = match.end()
    if "f" not in groups or "m" not in groups:
        raise ParseError("both f(...) and m(...) are required", len(text))
    if order[:2] != ["f", "m"]:
        raise ParseError("groups must appear in the order f, m, s", groups[order[0]][1])
    fps_items, fpos = groups["f"]
    seg_items, mpos = groups["m"]
    if not fps_items:
        raise ParseError("f(...) is empty", fpos)
    if len(seg_items) != len(fps_items):
        raise ParseError(f"m(...) has {len(seg_items)} entries but f(...) has {len(fps_items)}", mpos)
    for item in seg_items:
        if "." in item:
            raise ParseError(f"segment count {item!r} must be an integer", mpos)
    steps: tuple[int, ...] = ()
    if "s" in groups:
        s_items, spos = groups["s"]
        if len(s_items) != len(fps_items):
            raise ParseError(f"s(...) has {len(s_items)} entries but f(...) has {len(fps_items)}", spos)
        if any("." in x for x in s_items):
            raise ParseError("step counts must be integers", spos)
        steps = tuple(int(x) for x in s_items)
    fps = tuple(float(x) for x in fps_items)
    for i in range(1, len(fps)):
        if not fps[i] > fps[i - 1]:
            raise ParseError(f"frame rates must increase ({fps[i - 1]:g} then {fps[i]:g})", fpos)
        if not _power_of_two_ratio(fps[i - 1], fps[i]):
            raise ParseError(f"ratio {fps[i]:g}/{fps[i - 1]:g} is not a power of two", fpos)
    try:
        return ParallelConfig(fps, tuple(int(x) for x in seg_items), steps)
    except ConfigError as exc:
        raise ParseError(str(exc), 0) from exc


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    stage: int
    level: int
    segment: int
    interval: tuple[int, int]
    positions: tuple[int, ...]
    anchors: tuple[int, ...]
    parents: tuple[int, ...] = ()

    @property
    def new_positions(self) -> tuple[int, ...]:
        a = set(self.anchors)
        return tuple(p for p in self.positions if p not in a)

    @property
    def T(self) -> int:
        return len(self.positions)


@dataclass
class GenerationTree:
    config: ParallelConfig
    N: int
    nodes: list[TreeNode]
    stages: list[list[int]] = field(default_factory=list)
    children: dict[int, list[int]] = field(default_factory=dict)

    def stage_nodes(self, stage: int) -> list[TreeNode]:
        return [self.nodes[i] for i in self.stages[stage]]

    def level_positions(self, stage: int) -> list[int]:
        m = self.config.strides[stage]
        return list(range(m - 1, self.N, m))


def valid_frame_counts(cfg: ParallelConfig, limit: int = 5, near: int = 0) -> list[int]:
    unit = 1
    for m, M in zip(cfg.strides, cfg.stage_segments):
        unit = math.lcm(unit, m * M)
    start = max(1, near // unit)
    return [unit * k for k in range(start, start + limit)]


def plan_tree(cfg: ParallelConfig, N: int) -> GenerationTree:
    for m, M in zip(cfg.strides, cfg.stage_segments):
        if N < 1 or N % (m * M):
            raise PlanError(
                f"N={N} cannot be split: stride {m} x {M} segments must divide N; "
                f"valid N include {valid_frame_counts(cfg, near=max(N, 1))}")
    nodes: list[TreeNode] = []
    stages: list[list[int]] = []
    children: dict[int, list[int]] = {}
    prev_stride = None
    for s, (level, m, M) in enumerate(zip(cfg.levels, cfg.strides, cfg.stage_segments)):
        span = N // M
        ids = []
        for seg in range(M):
            a, b = seg * span, (seg + 1) * span
            positions = tuple(range(a + m - 1, b, m))
            anchors = () if prev_stride is None else tuple(
                p for p in positions if (p + 1) % prev_stride == 0)
            parents = () if s == 0 else tuple(
                nodes[i].node_id for i in stages[-1]
                if nodes[i].interval[0] < b and a < nodes[i].interval[1])
            node = TreeNode(len(nodes), s, level, seg, (a, b), positions, anchors, parents)
            nodes.append(node)
            children[node.node_id] = []
            for p in parents:
                children[p].append(node.node_id)
            ids.append(node.node_id)
        stages.append(ids)
        prev_stride = m
    return GenerationTree(cfg, N, nodes, stages, children)


@dataclass
class StageCost:
    stage: int
    fps: float
    level: int
    nodes: int
    frames_per_node: int
    steps: int
    flops: int


@dataclass
class FlopReport:
    config: str
    N: int
    stages: list[StageCost]
    analytic: float | None = None

    @property
    def total(self) -> int:
        return sum(s.flops for s in self.stages)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["stage", "nodes", "frames_per_node", "steps", "flops"])
        for s in self.stages:
            w.writerow([s.stage, s.nodes, s.frames_per_node, s.steps, s.flops])
        w.writerow(["total", sum(s.nodes for s in self.stages), "", "", self.total])
        return out.getvalue()

    def summary(self) -> str:
        lines = [f"config {self.config}  N={self.N}"]
        for s in self.stages:
            lines.append(f"  stage {s.stage} @ {s.fps:g} fps (level {s.level}): {s.nodes} nodes x "
                         f"{s.frames_per_node} frames x {s.steps} steps = {s.flops:,} multiply-adds")
        lines.append(f"  total {self.total:,} multiply-adds")
        if self.analytic is not None:
            lines.append(f"  uniform-tree bound {self.analytic:g} squared-frame units")
        return "\n".join(lines)


def flop_count(cfg_model: ModelConfig, cfg_par: ParallelConfig, N: int) -> FlopReport:
    """Multiply-adds of every denoiser call made by :func:`generate`."""
    tree = plan_tree(cfg_par, N)
    stages = []
    for s, ids in enumerate(tree.stages):
        nodes = [tree.nodes[i] for i in ids]
        steps = cfg_par.denoise_steps[s]
        flops = sum(steps * flops_forward(cfg_model, n.T) for n in nodes)
        stages.append(StageCost(s, cfg_par.stage_fps[s], cfg_par.levels[s], len(nodes),
                                nodes[0].T, steps, flops))
    analytic = None
    if cfg_par.W is not None:
        analytic = analytic_bound(N, cfg_par.K, cfg_par.W, False)
    return FlopReport(cfg_par.text(), N, stages, analytic)


def analytic_bound(N: int, K: int, W: int, intra_parallel: bool = False, exact: bool = False):
    """Closed-form geometric cost of a uniform W-way tree in squared-frame units.

    ``N^2/4^K * sum_i (4/W)^i``, or ``sum_i (4/W^2)^i`` when siblings within a
    level run concurrently.
    """
    if N < 1 or K < 1 or W < 1:
        raise ConfigError("N, K and W must be positive")
    ratio = Fraction(4, W * W) if intra_parallel else Fraction(4, W)
    value = Fraction(N * N, 4 ** K) * sum(ratio ** i for i in range(K))
    return value if exact else float(value)


def direct_cost_sum(N: int, K: int, W: int, intra_parallel: bool = False) -> Fraction:
    """Level-by-level sum of segment costs, used to check :func:`analytic_bound`."""
    total = Fraction(0)
    for i in range(K):
        seg = Fraction(N, 2 ** (K - i) * W ** i)
        total += seg * seg if intra_parallel else W ** i * seg * seg
    return total
