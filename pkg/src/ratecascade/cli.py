"""Command-line entry point: ``ratecascade <command> [flags]``.

Commands: dataset, train, generate, flops, eval, verify.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage error.
Artifact-producing commands write ``<command>.manifest.json`` next to their
outputs. Training settings resolve as flags, then the ``--config-file``
sections ``[model]`` and ``[train]``, then built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import MULTI_RATE, SINGLE_RATE, VERSION as CHECKPOINT_VERSION
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import ModelConfig
from .errors import RateCascadeError
from .formats import (DATASET_VERSION, TMV_VERSION, load_dataset, load_tmv, make_dataset,
                      save_tmv, scene_from_json, scene_to_json)
from .multimask import MultiMaskCondition
from .planning import flop_count, parse_config
from .world import PROMPT_DIM, evaluate

log = logging.getLogger("ratecascade")


class UsageError(Exception):
    pass


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hashes(paths) -> dict[str, str]:
    return {str(p): git_blob_hash(Path(p).read_bytes()) for p in paths if p and Path(p).is_file()}


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict, seeds: dict,
                   inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": seeds,
        "versions": {"package": __version__, "tmv": TMV_VERSION, "dataset": DATASET_VERSION,
                     "checkpoint": CHECKPOINT_VERSION},
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_dataset(args, argv) -> int:
    started = time.time()
    out = _out_dir(args)
    path = out / "dataset.tmds"
    scenes = make_dataset(args.scenes, args.multi_shot, args.seed, path, args.embed,
                          args.duration, args.frame_dim)
    scene_file = out / "scenes.json"
    scene_file.write_text("[\n" + ",\n".join(scene_to_json(s) for s in scenes) + "\n]\n")
    write_manifest(out, "dataset", argv, {"scenes": args.scenes, "multi_shot": args.multi_shot,
                                          "duration": args.duration, "frame_dim": args.frame_dim,
                                          "embed": args.embed},
                   {"seed": args.seed}, [], [path, scene_file], started)
    multi = sum(s.multi_shot for s in scenes)
    print(f"wrote {len(scenes)} scenes ({multi} multi-shot) to {path}")
    return 0


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
    return value


def _read_config_file(path) -> tuple[dict, dict]:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    model = dict(parser["model"]) if parser.has_section("model") else {}
    train = dict(parser["train"]) if parser.has_section("train") else {}
    return model, train


def _model_config(args, file_model: dict, base: ModelConfig | None = None) -> ModelConfig:
    cfg = base or ModelConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(ModelConfig)}
    updates = {}
    for key, value in file_model.items():
        if key not in known:
            raise UsageError(f"unknown [model] key {key!r}")
        updates[key] = _coerce(value, known[key])
    for key in ("width", "layers", "heads", "frame_dim"):
        if getattr(args, key, None) is not None:
            updates[key] = getattr(args, key)
    return replace(cfg, **updates)


def _train_config(args, file_train: dict, stage: str, stored: dict | None = None):
    from .training import TrainConfig, stage1_config, stage2_config

    cfg = TrainConfig.from_dict(stored) if stored else (
        stage1_config() if stage == SINGLE_RATE else stage2_config())
    known = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig) if f.name != "noise"}
    updates = {}
    for key, value in file_train.items():
        if key not in known or key == "stage":
            raise UsageError(f"unknown [train] key {key!r}")
        updates[key] = _coerce(value, known[key])
    flag_map = {"steps": "steps", "batch_size": "batch_size", "lr": "learning_rate",
                "seed": "seed", "warmup": "warmup_steps"}
    for flag, key in flag_map.items():
        if getattr(args, flag, None) is not None:
            updates[key] = getattr(args, flag)
    return replace(cfg, **updates)


def cmd_train(args, argv) -> int:
    from .training import TrainLog, TrainingData, begin_stage2, run_stage1, run_stage2

    started = time.time()
    stage = SINGLE_RATE if args.stage == 1 else MULTI_RATE
    if args.stage == 2 and not (args.init or args.resume):
        raise UsageError("stage 2 needs --init <stage-1 checkpoint> (or --resume)")
    file_model, file_train = _read_config_file(args.config_file) if args.config_file else ({}, {})
    scenes, _ = load_dataset(args.data)
    data = TrainingData(scenes)
    out = _out_dir(args)
    ckpt_path = out / f"stage{args.stage}.ckpt"
    log_path = out / f"train_stage{args.stage}.csv"
    inputs = [args.data, args.config_file, args.init, args.resume]

    source = args.resume or args.init
    state = load_checkpoint(source) if source else None
    cfg_model = _model_config(args, file_model, state.model_config if state else None)
    if state is not None and cfg_model.config_hash() != state.model_config.config_hash():
        print(f"error: checkpoint {source} has model config hash {state.model_config.config_hash()} "
              f"but the requested model config hashes to {cfg_model.config_hash()}", file=sys.stderr)
        return 1
    if args.resume:
        if state.stage != stage:
            raise UsageError(f"--resume checkpoint is {state.stage}, not stage {args.stage}")
        config = _train_config(args, file_train, stage, state.train_config)
    else:
        config = _train_config(args, file_train, stage)
        if args.stage == 2:
            if state.stage != SINGLE_RATE:
                raise UsageError("--init must point at a stage-1 checkpoint")
            state = begin_stage2(state, config)
        if log_path.exists():
            log_path.unlink()
    train_log = TrainLog(log_path)
    if data.scenes[0].frame_dim != cfg_model.frame_dim:
        raise UsageError(f"dataset frame_dim {data.scenes[0].frame_dim} != model frame_dim "
                         f"{cfg_model.frame_dim}")
    every = args.checkpoint_every
    if args.stage == 1:
        state = run_stage1(data, config, cfg_model, state, train_log, None, every, ckpt_path)
    else:
        state = run_stage2(data, config, state, train_log, None, every, ckpt_path)
    save_checkpoint(state, ckpt_path)
    losses = [float(r["loss"]) for r in train_log.rows]
    write_manifest(out, "train", argv, {"model": cfg_model.to_dict(), "train": config.to_dict()},
                   {"seed": config.seed}, inputs, [ckpt_path, log_path], started)
    if losses:
        k = max(1, len(losses) // 10)
        print(f"stage {args.stage}: steps {state.step}, loss {np.mean(losses[:k]):.4f} -> "
              f"{np.mean(losses[-k:]):.4f}; checkpoint {ckpt_path}")
    else:
        print(f"stage {args.stage}: nothing to do at step {state.step}; checkpoint {ckpt_path}")
    return 0


def _prompt(args) -> tuple[np.ndarray, object]:
    if args.scene:
        scene = scene_from_json(Path(args.scene).read_text())
        return scene.prompt(), scene
    if args.prompt:
        values = [float(v) for v in args.prompt.split(",")]
        if len(values) != PROMPT_DIM:
            raise UsageError(f"--prompt needs {PROMPT_DIM} comma-separated values")
        return np.array(values), None
    return np.zeros(PROMPT_DIM), None


def cmd_generate(args, argv) -> int:
    from .inference import continue_video, generate

    started = time.time()
    par = parse_config(args.config)
    if args.steps is not None:
        par = par.with_steps(args.steps)
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params if args.weights == "raw" else ckpt.ema
    prompt, scene = _prompt(args)
    out = _out_dir(args)
    inputs = [args.checkpoint, args.scene, args.image, args.first_last, args.continue_from]
    outputs = []
    video_path = out / "video.tmv"
    if args.continue_from:
        if args.overlap is None:
            raise UsageError("--continue needs --overlap")
        previous = load_tmv(args.continue_from)
        video = continue_video(params, ckpt.model_config, par, previous, args.overlap, args.frames,
                               prompt, args.seed, args.workers)
        save_tmv(video, video_path)
        outputs.append(video_path)
    else:
        entries = {}
        if args.image:
            entries[0] = load_tmv(args.image).frames[0]
        if args.first_last:
            ref = load_tmv(args.first_last).frames
            entries[0], entries[args.frames - 1] = ref[0], ref[-1]
        cond = MultiMaskCondition(args.frames, entries)
        res = generate(params, ckpt.model_config, par, prompt, args.frames, args.seed, cond,
                       args.workers, return_stages=True)
        save_tmv(res.video, video_path)
        outputs.append(video_path)
        if args.emit_stages:
            for level, seq in sorted(res.stages.items()):
                path = out / f"stage_level{level}.tmv"
                save_tmv(seq, path)
                outputs.append(path)
        video = res.video
    config = {"parallel": par.text(), "frames": args.frames, "workers": args.workers,
              "weights": args.weights, "overlap": args.overlap,
              "model": ckpt.model_config.to_dict()}
    write_manifest(out, "generate", argv, config, {"seed": args.seed}, inputs, outputs, started)
    print(f"wrote {video.T} frames to {video_path}")
    if scene is not None:
        print(evaluate(video, scene.with_duration(max(scene.duration, video.T))).summary())
    return 0


def cmd_flops(args, argv) -> int:
    par = parse_config(args.config)
    if args.steps is not None:
        par = par.with_steps(args.steps)
    if args.W is not None:
        par = replace(par, W=args.W)
    cfg = _model_config(args, {})
    report = flop_count(cfg, par, args.frames)
    text = report.to_csv()
    if args.csv:
        Path(args.csv).write_text(text)
    print(report.summary())
    if not args.csv:
        print(text, end="")
    return 0


def cmd_eval(args, argv) -> int:
    video = load_tmv(args.input)
    scene = scene_from_json(Path(args.scene).read_text())
    stages = {}
    for path in args.stages or ():
        seq = load_tmv(path)
        stages[seq.level.level] = seq
    report = evaluate(video, scene.with_duration(max(scene.duration, video.T)), stages)
    print(report.summary())
    if args.json:
        Path(args.json).write_text(json.dumps({
            "mse": report.mse, "relative_mse": report.relative_mse,
            "signal_variance": report.signal_variance, "drift_slope": report.drift_slope,
            "anchor_violations": report.anchor_violations,
            "per_frame_mse": report.per_frame_mse.tolist()}, indent=2) + "\n")
    return 0


def cmd_verify(args, argv) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratecascade", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="build a synthetic scene dataset")
    d.add_argument("--scenes", type=int, required=True)
    d.add_argument("--multi-shot", type=float, required=True, help="fraction of multi-shot scenes")
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--duration", type=int, default=96)
    d.add_argument("--frame-dim", type=int, default=16)
    d.add_argument("--embed", action="store_true", help="embed full-rate renders in the file")
    d.add_argument("--out", default=".")

    def model_flags(q):
        q.add_argument("--width", type=int)
        q.add_argument("--layers", type=int)
        q.add_argument("--heads", type=int)
        q.add_argument("--frame-dim", type=int)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True, help="dataset file from the dataset command")
    t.add_argument("--init", help="stage-1 checkpoint to start stage 2 from")
    t.add_argument("--resume", help="checkpoint of this stage to continue")
    t.add_argument("--config-file", help="key=value file with [model] and [train] sections")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--out", default=".")
    model_flags(t)

    g = sub.add_parser("generate", help="generate a full-rate sequence")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--config", required=True, help='parallel config such as "f(6,12,24)m(1,2,4)"')
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--steps", type=int, help="denoising steps for every stage")
    g.add_argument("--weights", choices=("ema", "raw"), default="ema")
    g.add_argument("--scene", help="scene JSON providing the prompt (and ground truth for a report)")
    g.add_argument("--prompt", help=f"{PROMPT_DIM} comma-separated prompt values")
    cond = g.add_mutually_exclusive_group()
    cond.add_argument("--image", help=".tmv whose first frame conditions frame 0")
    cond.add_argument("--first-last", help=".tmv whose first and last frames condition both ends")
    cond.add_argument("--continue", dest="continue_from", help=".tmv to extend")
    g.add_argument("--overlap", type=int, help="frames of the previous video to condition on")
    g.add_argument("--emit-stages", action="store_true")
    g.add_argument("--out", default=".")

    f = sub.add_parser("flops", help="multiply-add counts of a parallel config")
    f.add_argument("--config", required=True)
    f.add_argument("--frames", type=int, required=True)
    f.add_argument("--steps", type=int)
    f.add_argument("--W", type=int, help="also print the uniform-tree bound for this branching")
    f.add_argument("--csv", help="write the CSV report here instead of stdout")
    model_flags(f)

    e = sub.add_parser("eval", help="compare a generated sequence with its scene")
    e.add_argument("--input", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--stages", nargs="*", help="intermediate stage .tmv files for anchor checks")
    e.add_argument("--json")

    v = sub.add_parser("verify", help="run self-check suites")
    v.add_argument("--suite", default="all",
                   choices=("gradient", "rope", "subsampling", "anchor", "cost", "all"))
    return p


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "generate": cmd_generate,
            "flops": cmd_flops, "eval": cmd_eval, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ratecascade {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RateCascadeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
