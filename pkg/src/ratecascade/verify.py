"""Self-check suites behind ``ratecascade verify``.

Each suite returns a list of :class:`Check` results; none of them needs a
trained model, so they run in well under a minute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as tn
from .denoiser import ModelConfig, forward, forward_batch, flops_forward, init_params
from .errors import ContractError
from .formats import make_scenes
from .planning import ParallelConfig, analytic_bound, direct_cost_sum, flop_count, plan_tree
from .positions import assign_indices, subsample_indices, subsample_positions
from .seeding import derive_rng
from .tensor import Tensor
from .training import NoiseSchedule, TrainingData, fm_loss, make_batch, stage2_config
from .world import count_anchor_violations, render_scene

GRAD_TOL = 1e-4
SHIFT_TOL = 1e-9


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}: {self.name}  {self.detail}".rstrip()


TINY = ModelConfig(frame_dim=4, width=8, layers=1, heads=2, cond_dim=8, max_T=64)
# smaller still for the loss check, which differentiates every parameter numerically
GRAD_MODEL = ModelConfig(frame_dim=2, width=4, layers=2, heads=2, cond_dim=8, max_T=64)


def _op_cases(rng) -> list[tuple[str, Callable, list[np.ndarray]]]:
    def r(*shape):
        return rng.standard_normal(shape)

    w = r(5, 3)
    return [
        ("add", lambda a, b: tn.sum(tn.mul(tn.add(a, b), tn.add(a, b))), [r(3, 4), r(4)]),
        ("sub", lambda a, b: tn.sum(tn.mul(tn.sub(a, b), a)), [r(2, 3), r(2, 3)]),
        ("mul", lambda a, b: tn.sum(tn.mul(a, b)), [r(3, 1), r(1, 4)]),
        ("matmul", lambda a, b: tn.sum(tn.mul(tn.matmul(a, b), tn.matmul(a, b))), [r(2, 3, 4), r(4, 2)]),
        ("batched matmul", lambda a, b: tn.sum(tn.matmul(a, b)), [r(2, 3, 4), r(2, 4, 5)]),
        ("softmax", lambda a: tn.sum(tn.mul(tn.softmax_rows(a), Tensor(w.T[:a.shape[0], :a.shape[1]]))),
         [r(3, 5)]),
        ("rms_norm", lambda a, g: tn.sum(tn.mul(tn.rms_norm(a, g), tn.rms_norm(a, g))), [r(3, 4), r(4)]),
        ("silu", lambda a: tn.sum(tn.silu(a)), [r(4, 3)]),
        ("concat", lambda a, b: tn.sum(tn.mul(tn.concat_channels(a, b), Tensor(w.T))), [r(3, 2), r(3, 3)]),
        ("mse", lambda a, b: tn.mse(a, b), [r(3, 4), r(3, 4)]),
        ("mean", lambda a: tn.mean(tn.mul(a, a)), [r(2, 5)]),
        ("reshape", lambda a: tn.sum(tn.mul(tn.reshape(a, (4, 3)), Tensor(w[:4]))), [r(3, 4)]),
        ("transpose", lambda a: tn.sum(tn.mul(tn.transpose(a, (1, 0)), Tensor(w[:4, :2]))), [r(2, 4)]),
        ("pair_swap", lambda a: tn.sum(tn.mul(tn.pair_swap(a), Tensor(w[:3, :2]))), [r(3, 2)]),
    ]


def gradient_suite(seed: int = 0, instances: int = 20) -> list[Check]:
    """Finite-difference checks of every differentiable op plus the full loss (64-bit)."""
    out = []
    rng = derive_rng(seed, "verify", "gradient")
    with tn.precision(np.float64):
        for rep in range(instances):
            for name, fn, arrays in _op_cases(rng):
                err = tn.gradcheck(fn, arrays)
                out.append(Check("gradient", f"{name} #{rep}", err < GRAD_TOL, f"rel_err={err:.2e}"))
        scenes = make_scenes(4, 0.5, seed, duration=16, frame_dim=GRAD_MODEL.frame_dim)
        data = TrainingData(scenes)
        config = stage2_config(batch_size=2, clip_frames=4, seed=seed)
        for rep in range(instances):
            batch = make_batch(data, config, rep)
            params = init_params(GRAD_MODEL, seed + rep, dtype=np.float64)
            names = list(params)
            noise_seed = seed * 1000 + rep

            def loss(*leaves):
                return fm_loss(dict(zip(names, leaves)), GRAD_MODEL, batch, NoiseSchedule(), noise_seed)

            err = tn.gradcheck(loss, [params[k].data for k in names])
            out.append(Check("gradient", f"fm_loss #{rep}", err < GRAD_TOL, f"rel_err={err:.2e}"))
    return out


def shift_invariance_error(cfg: ModelConfig, seed: int, shift: float, T: int = 6) -> float:
    rng = derive_rng(seed, "verify", "rope")
    params = init_params(cfg, seed, dtype=np.float64)
    channels = rng.standard_normal((T, cfg.in_channels))
    prompt = rng.standard_normal(cfg.cond_dim)
    base = assign_indices(T, int(rng.integers(0, 3)), float(rng.uniform(0, 50)))
    with tn.precision(np.float64):
        a = forward(params, cfg, channels, 0.3, prompt, base)
        b = forward(params, cfg, channels, 0.3, prompt, base.shifted(shift))
    return float(np.abs(a - b).max())


def rope_suite(seed: int = 0, instances: int = 5) -> list[Check]:
    out = []
    rng = derive_rng(seed, "verify", "rope-shifts")
    for i in range(instances):
        shift = float(rng.uniform(-20, 200))
        err = shift_invariance_error(TINY, seed + i, shift)
        out.append(Check("rope", f"shift {shift:.2f}", err < SHIFT_TOL, f"max_abs_diff={err:.2e}"))
    return out


def subsampling_suite(seed: int = 0, instances: int = 5) -> list[Check]:
    out = []
    for T, lv, want in ((8, 1, [2, 4, 6, 8]), (8, 0, list(range(1, 9))), (16, 2, [4, 8, 12, 16])):
        got = subsample_indices(T, lv)
        out.append(Check("subsampling", f"indices T={T} level={lv}", got == want, str(got)))
    for scene in make_scenes(instances, 0.5, seed):
        full = render_scene(scene, 0).frames
        for lv in (1, 2, 3):
            sub = render_scene(scene, lv).frames
            same = np.array_equal(sub, full[subsample_positions(scene.duration, lv)])
            out.append(Check("subsampling", f"render level {lv} vs full rate", same))
    return out


def _random_parallel_config(rng) -> tuple[ParallelConfig, int]:
    K = int(rng.integers(1, 4))
    levels = sorted(rng.choice(np.arange(4), size=K, replace=False).tolist(), reverse=True)
    levels[-1] = 0
    levels = sorted(set(levels), reverse=True)
    fps = tuple(24.0 / (1 << lv) for lv in levels)
    segments = tuple(int(rng.choice([1, 2, 4])) for _ in levels)
    cfg = ParallelConfig(fps, segments, tuple(int(rng.integers(1, 3)) for _ in levels))
    unit = 1
    for m, M in zip(cfg.strides, cfg.stage_segments):
        unit = math.lcm(unit, m * M)
    return cfg, unit * int(rng.integers(1, 3))


def anchor_suite(seed: int = 0, instances: int = 5) -> list[Check]:
    from .inference import generate

    out = []
    rng = derive_rng(seed, "verify", "anchor")
    cfg = TINY
    params = init_params(cfg, seed)
    for i in range(instances):
        par, N = _random_parallel_config(rng)
        tree = plan_tree(par, N)
        covered = all(
            sorted(p for n in tree.stage_nodes(s) for p in n.positions) == tree.level_positions(s)
            for s in range(par.K))
        res = generate(params, cfg, par, rng.standard_normal(8), N, seed + i, return_stages=True)
        bad = count_anchor_violations(res.video.frames, res.stages)
        out.append(Check("anchor", f"{par.text()} N={N}", covered and bad == 0,
                         f"coverage={'ok' if covered else 'broken'} violations={bad}"))
    return out


def cost_suite(seed: int = 0) -> list[Check]:
    out = []
    exact = all(analytic_bound(N, K, W, intra, exact=True) == direct_cost_sum(N, K, W, intra)
                for K in range(1, 17) for W in range(2, 9) for N in (512, 1000, 4096)
                for intra in (False, True))
    out.append(Check("cost", "closed form equals direct sum", exact))
    v = analytic_bound(512, 3, 4)
    out.append(Check("cost", "N=512 K=3 W=4", v == 12288, f"value={v:g}"))
    v = analytic_bound(512, 3, 2, intra_parallel=True)
    out.append(Check("cost", "N=512 K=3 W=2 intra-parallel", v == 12288, f"value={v:g}"))
    ok = True
    for W in range(4, 9):
        for K in range(1, 17):
            s = analytic_bound(1024, K, W, exact=True) * 4 ** K / 1024 ** 2
            ok &= s <= K and (W == 4 or s <= 1 / (1 - Fraction(4, W)))
    for W in range(3, 9):
        for K in range(1, 17):
            s = analytic_bound(1024, K, W, True, exact=True) * 4 ** K / 1024 ** 2
            ok &= s <= 1 / (1 - Fraction(4, W * W))
    out.append(Check("cost", "geometric sums stay bounded for K <= 16", bool(ok)))
    rng = derive_rng(seed, "verify", "cost")
    for i in range(3):
        heads = int(rng.choice([1, 2, 4]))
        cfg = ModelConfig(frame_dim=int(rng.integers(2, 9)), width=heads * 2 * int(rng.integers(1, 5)),
                          layers=int(rng.integers(1, 4)), heads=heads, cond_dim=int(rng.integers(1, 9)))
        T = int(rng.integers(2, 20))
        params = init_params(cfg, seed + i)
        with tn.no_grad(), tn.count_macs() as counter:
            forward_batch(params, cfg, rng.standard_normal((1, T, cfg.in_channels)).astype(np.float32),
                          np.array([0.5]), rng.standard_normal((1, cfg.cond_dim)).astype(np.float32),
                          np.arange(T, dtype=np.float64)[None])
        want = flops_forward(cfg, T)
        rel = abs(counter[0] - want) / want
        out.append(Check("cost", f"instrumented count, config {i}", rel <= 1e-3,
                         f"counted={counter[0]} formula={want}"))
    par = ParallelConfig((6.0, 24.0), (1, 8))
    rep = flop_count(ModelConfig(), par, 512)
    out.append(Check("cost", "stage counts sum to total", sum(s.flops for s in rep.stages) == rep.total))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "gradient": gradient_suite,
    "rope": rope_suite,
    "subsampling": subsampling_suite,
    "anchor": anchor_suite,
    "cost": cost_suite,
}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        return [c for suite in SUITES.values() for c in suite()]
    if name not in SUITES:
        raise ContractError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name]()
