import csv
import json

import numpy as np
import pytest

from ratecascade.cli import git_blob_hash, main
from ratecascade.formats import load_tmv, save_tmv

MODEL = ["--width", "16", "--layers", "1", "--heads", "2", "--frame-dim", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset plus stage-1 and stage-2 checkpoints of a tiny model."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "--scenes", "12", "--multi-shot", "0.25", "--seed", "7",
                 "--frame-dim", "4", "--duration", "64", "--out", str(root / "data")]) == 0
    data = root / "data" / "dataset.tmds"
    assert main(["train", "--stage", "1", "--data", str(data), "--steps", "40", "--batch-size", "8",
                 "--warmup", "5", "--out", str(root / "s1"), *MODEL]) == 0
    assert main(["train", "--stage", "2", "--data", str(data), "--init", str(root / "s1" / "stage1.ckpt"),
                 "--steps", "20", "--batch-size", "8", "--warmup", "5", "--lr", "5e-4",
                 "--out", str(root / "s2")]) == 0
    return root


def test_dataset_writes_files_and_manifest(tmp_path, capsys):
    code, out, _ = run(capsys, "dataset", "--scenes", "20", "--multi-shot", "0.15", "--seed", "7",
                       "--out", tmp_path)
    assert code == 0 and "wrote 20 scenes" in out
    manifest = json.loads((tmp_path / "dataset.manifest.json").read_text())
    assert manifest["command"] == "dataset" and manifest["seeds"] == {"seed": 7}
    assert set(manifest["outputs"]) == {str(tmp_path / "dataset.tmds"), str(tmp_path / "scenes.json")}
    assert manifest["outputs"][str(tmp_path / "dataset.tmds")] == git_blob_hash(
        (tmp_path / "dataset.tmds").read_bytes())
    assert len(json.loads((tmp_path / "scenes.json").read_text())) == 20


def test_dataset_is_deterministic(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        run(capsys, "dataset", "--scenes", "10", "--multi-shot", "0.3", "--seed", "3", "--out", tmp_path / name)
        hashes.append(list(json.loads((tmp_path / name / "dataset.manifest.json").read_text())["outputs"].values()))
    assert hashes[0] == hashes[1]


def test_manifest_replays_to_same_outputs(tmp_path, capsys):
    run(capsys, "dataset", "--scenes", "5", "--multi-shot", "0.5", "--seed", "1", "--out", tmp_path)
    manifest = json.loads((tmp_path / "dataset.manifest.json").read_text())
    first = {k: v for k, v in manifest["outputs"].items()}
    assert main(manifest["argv"]) == 0
    again = json.loads((tmp_path / "dataset.manifest.json").read_text())["outputs"]
    assert again == first


def test_missing_required_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "dataset", "--scenes", "5", "--seed", "1")
    assert code == 2 and "--multi-shot" in err
    code, _, _ = run(capsys, "generate", "--config", "f(24)m(1)")
    assert code == 2


def test_training_logs_decreasing_loss(workdir):
    for stage in (1, 2):
        rows = list(csv.DictReader(open(workdir / f"s{stage}" / f"train_stage{stage}.csv")))
        losses = [float(r["loss"]) for r in rows]
        assert len(losses) == (40 if stage == 1 else 20)
        if stage == 1:
            assert np.mean(losses[-10:]) < np.mean(losses[:10])
    manifest = json.loads((workdir / "s2" / "train.manifest.json").read_text())
    assert manifest["config"]["train"]["stage"] == "multi_rate"
    assert manifest["config"]["train"]["learning_rate"] == 5e-4


def test_stage2_needs_init(workdir, capsys):
    code, _, err = run(capsys, "train", "--stage", "2", "--data", workdir / "data" / "dataset.tmds",
                       "--out", workdir / "x")
    assert code == 2 and "--init" in err


def test_config_hash_mismatch_is_refused(workdir, capsys):
    code, _, err = run(capsys, "train", "--stage", "2", "--data", workdir / "data" / "dataset.tmds",
                       "--init", workdir / "s1" / "stage1.ckpt", "--width", "32", "--out", workdir / "x")
    assert code == 1
    assert err.count("hash") >= 2 and len([w for w in err.split() if len(w) >= 16]) >= 2


def test_resume_matches_uninterrupted(tmp_path, workdir, capsys):
    data = workdir / "data" / "dataset.tmds"
    common = ["--data", data, "--batch-size", "4", "--warmup", "3", *MODEL]
    run(capsys, "train", "--stage", "1", "--steps", "10", "--out", tmp_path / "full", *common)
    run(capsys, "train", "--stage", "1", "--steps", "4", "--out", tmp_path / "half", *common)
    code, _, _ = run(capsys, "train", "--stage", "1", "--steps", "10", "--data", data,
                     "--resume", tmp_path / "half" / "stage1.ckpt", "--out", tmp_path / "half")
    assert code == 0
    assert (tmp_path / "half" / "stage1.ckpt").read_bytes() == (tmp_path / "full" / "stage1.ckpt").read_bytes()


def test_config_file_and_flag_precedence(tmp_path, workdir, capsys):
    (tmp_path / "run.ini").write_text("[model]\nwidth = 8\nlayers = 1\nheads = 2\nframe_dim = 4\n"
                                     "[train]\nsteps = 3\nbatch_size = 2\nlearning_rate = 0.001\n")
    code, _, _ = run(capsys, "train", "--stage", "1", "--data", workdir / "data" / "dataset.tmds",
                     "--config-file", tmp_path / "run.ini", "--steps", "2", "--out", tmp_path)
    assert code == 0
    cfg = json.loads((tmp_path / "train.manifest.json").read_text())["config"]
    assert cfg["model"]["width"] == 8
    assert cfg["train"]["steps"] == 2 and cfg["train"]["learning_rate"] == 0.001
    (tmp_path / "bad.ini").write_text("[train]\nbogus = 1\n")
    code, _, _ = run(capsys, "train", "--stage", "1", "--data", workdir / "data" / "dataset.tmds",
                     "--config-file", tmp_path / "bad.ini", "--out", tmp_path)
    assert code == 2


def test_generate_smoke_and_stages(tmp_path, workdir, capsys):
    ckpt = workdir / "s2" / "stage2.ckpt"
    code, out, _ = run(capsys, "generate", "--checkpoint", ckpt, "--config", "f(6,12,24)m(1,2,4)",
                       "--frames", "64", "--seed", "1", "--steps", "4", "--emit-stages", "--out", tmp_path)
    assert code == 0 and "wrote 64 frames" in out
    video = load_tmv(tmp_path / "video.tmv")
    assert video.T == 64 and video.frames.shape == (64, 4)
    for level in (1, 2):
        stage = load_tmv(tmp_path / f"stage_level{level}.tmv")
        np.testing.assert_array_equal(video.frames[(1 << level) - 1::1 << level], stage.frames)
    assert json.loads((tmp_path / "generate.manifest.json").read_text())["config"]["weights"] == "ema"


def test_generate_is_worker_independent(tmp_path, workdir, capsys):
    blobs = []
    for w in (1, 8):
        run(capsys, "generate", "--checkpoint", workdir / "s2" / "stage2.ckpt", "--config",
            "f(6,12,24)m(1,2,4)", "--frames", "64", "--seed", "5", "--steps", "3", "--workers", w,
            "--out", tmp_path / str(w))
        blobs.append((tmp_path / str(w) / "video.tmv").read_bytes())
    assert blobs[0] == blobs[1]


def test_generate_conditions(tmp_path, workdir, capsys):
    ckpt = workdir / "s2" / "stage2.ckpt"
    base = ["generate", "--checkpoint", ckpt, "--config", "f(12,24)m(1,2)", "--steps", "3"]
    run(capsys, *base, "--frames", "32", "--out", tmp_path / "a")
    prev = load_tmv(tmp_path / "a" / "video.tmv")
    code, _, _ = run(capsys, *base, "--frames", "32", "--continue", tmp_path / "a" / "video.tmv",
                     "--overlap", "8", "--out", tmp_path / "b")
    nxt = load_tmv(tmp_path / "b" / "video.tmv")
    assert code == 0 and nxt.T == 56
    np.testing.assert_array_equal(nxt.frames[:32], prev.frames)
    code, _, _ = run(capsys, *base, "--frames", "32", "--first-last", tmp_path / "a" / "video.tmv",
                     "--out", tmp_path / "c")
    fl = load_tmv(tmp_path / "c" / "video.tmv")
    np.testing.assert_array_equal(fl.frames[[0, 31]], prev.frames[[0, 31]])
    code, _, err = run(capsys, *base, "--frames", "32", "--continue", tmp_path / "a" / "video.tmv",
                       "--out", tmp_path / "d")
    assert code == 2 and "--overlap" in err
    code, _, err = run(capsys, *base, "--frames", "31", "--out", tmp_path / "e")
    assert code == 1 and "valid N" in err
    code, _, err = run(capsys, *base[:4], "f(12,24)m(1)", "--frames", "32", "--out", tmp_path / "e")
    assert code == 1 and "m(...)" in err


def test_generate_with_scene_prints_report(tmp_path, workdir, capsys):
    scenes = json.loads((workdir / "data" / "scenes.json").read_text())
    (tmp_path / "scene.json").write_text(json.dumps(scenes[0]))
    code, out, _ = run(capsys, "generate", "--checkpoint", workdir / "s2" / "stage2.ckpt", "--config",
                       "f(12,24)m(1,2)", "--frames", "32", "--steps", "2", "--scene",
                       tmp_path / "scene.json", "--out", tmp_path)
    assert code == 0 and "relative_mse=" in out


def test_flops_csv_sums(tmp_path, capsys):
    code, out, _ = run(capsys, "flops", "--config", "f(6,24)m(1,8)", "--frames", "512",
                       "--csv", tmp_path / "f.csv", "--W", "2")
    assert code == 0 and "uniform-tree bound" in out
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert sum(int(r[-1]) for r in rows[1:-1]) == int(rows[-1][-1])
    code, out, _ = run(capsys, "flops", "--config", "f(6,24)m(1,8)", "--frames", "500")
    assert code == 1


def test_eval_prints_mse_and_drift(tmp_path, workdir, capsys):
    from ratecascade.formats import scene_from_json
    from ratecascade.world import render_scene

    scenes = json.loads((workdir / "data" / "scenes.json").read_text())
    (tmp_path / "scene.json").write_text(json.dumps(scenes[1]))
    truth = render_scene(scene_from_json(json.dumps(scenes[1])), 0)
    save_tmv(truth, tmp_path / "gt.tmv")
    code, out, _ = run(capsys, "eval", "--input", tmp_path / "gt.tmv", "--scene", tmp_path / "scene.json",
                       "--json", tmp_path / "r.json")
    assert code == 0 and "mse=0 " in out and "drift_slope=0" in out
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["mse"] == 0 and len(report["per_frame_mse"]) == truth.T
    code, _, err = run(capsys, "eval", "--input", tmp_path / "missing.tmv", "--scene", tmp_path / "scene.json")
    assert code == 1


def test_verify_single_suite(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "cost")
    assert code == 0 and "[PASS] cost" in out and "[FAIL]" not in out
    code, _, _ = run(capsys, "verify", "--suite", "nope")
    assert code in (1, 2)
