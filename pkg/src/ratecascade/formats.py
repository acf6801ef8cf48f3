"""Binary sequence (.tmv) and dataset files, plus scene JSON.

All integers and floats are little-endian.

.tmv layout::

    b"TMV1" | u32 version | u32 T | u32 D | f32 base_fps | u32 level | f64 t_start
    | T*D f32 frame values (row-major)

Dataset layout::

    b"TMDS" | u32 version | u32 n_scenes | n_scenes * (u32 nbytes | record)

    record = u32 frame_dim | u32 duration | u32 n_shots | n_shots*7 f64 params
             | u32 n_boundaries | n_boundaries u32 | u8 has_sequence
             | [u32 nbytes | .tmv bytes]
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .multimask import ShotLayout
from .positions import RateLevel, assign_indices
from .world import N_SHOT_PARAMS, SceneParams, VideoSequence, random_scene, render_scene
from .seeding import derive_rng

TMV_MAGIC = b"TMV1"
TMV_VERSION = 1
_TMV_HEADER = struct.Struct("<4sIIIfId")
DATASET_MAGIC = b"TMDS"
DATASET_VERSION = 1


def tmv_bytes(seq: VideoSequence) -> bytes:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    header = _TMV_HEADER.pack(TMV_MAGIC, TMV_VERSION, seq.T, seq.D, seq.level.base_fps,
                              seq.level.level, seq.indices.t_start)
    return header + frames.tobytes()


def tmv_from_bytes(blob: bytes, source: str = "<bytes>") -> VideoSequence:
    if len(blob) < _TMV_HEADER.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, T, D, fps, level, t_start = _TMV_HEADER.unpack_from(blob)
    if magic != TMV_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != TMV_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    body = blob[_TMV_HEADER.size:]
    if len(body) != 4 * T * D:
        raise FormatError(f"{source}: expected {4 * T * D} frame bytes, found {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, D).astype(np.float32)
    rate = RateLevel(level, float(fps))
    return VideoSequence(frames, rate, assign_indices(T, level, t_start))


def save_tmv(seq: VideoSequence, path) -> None:
    Path(path).write_bytes(tmv_bytes(seq))


def load_tmv(path) -> VideoSequence:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    return tmv_from_bytes(blob, str(path))


def _scene_record(scene: SceneParams, seq: VideoSequence | None) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<III", scene.frame_dim, scene.duration, len(scene.shots)))
    for shot in scene.shots:
        out.write(struct.pack(f"<{N_SHOT_PARAMS}d", *shot))
    b = scene.layout.boundaries
    out.write(struct.pack(f"<I{len(b)}I", len(b), *b))
    if seq is None:
        out.write(b"\x00")
    else:
        blob = tmv_bytes(seq)
        out.write(b"\x01" + struct.pack("<I", len(blob)) + blob)
    return out.getvalue()


def dataset_bytes(scenes: list[SceneParams], embed: bool = False) -> bytes:
    out = io.BytesIO()
    out.write(DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(scenes)))
    for scene in scenes:
        rec = _scene_record(scene, render_scene(scene, 0) if embed else None)
        out.write(struct.pack("<I", len(rec)) + rec)
    return out.getvalue()


def _read(buf: io.BytesIO, fmt: str, source: str):
    size = struct.calcsize(fmt)
    chunk = buf.read(size)
    if len(chunk) != size:
        raise FormatError(f"{source}: unexpected end of file")
    return struct.unpack(fmt, chunk)


def dataset_from_bytes(blob: bytes, source: str = "<bytes>"):
    """Returns (scenes, embedded sequences or None per scene)."""
    buf = io.BytesIO(blob)
    if buf.read(4) != DATASET_MAGIC:
        raise FormatError(f"{source}: not a dataset file")
    version, n = _read(buf, "<II", source)
    if version != DATASET_VERSION:
        raise FormatError(f"{source}: unsupported dataset version {version}")
    scenes, seqs = [], []
    for _ in range(n):
        (size,) = _read(buf, "<I", source)
        rec = io.BytesIO(buf.read(size))
        D, duration, n_shots = _read(rec, "<III", source)
        shots = [_read(rec, f"<{N_SHOT_PARAMS}d", source) for _ in range(n_shots)]
        (nb,) = _read(rec, "<I", source)
        bounds = _read(rec, f"<{nb}I", source)
        scene = SceneParams(tuple(shots), ShotLayout(tuple(bounds)), duration, D)
        (flag,) = _read(rec, "<B", source)
        seq = None
        if flag:
            (ln,) = _read(rec, "<I", source)
            seq = tmv_from_bytes(rec.read(ln), source)
            seq.scene = scene
        scenes.append(scene)
        seqs.append(seq)
    if buf.read(1):
        raise FormatError(f"{source}: trailing bytes after {n} records")
    return scenes, seqs


def make_scenes(n_scenes: int, multi_shot_fraction: float, seed: int,
                duration: int = 96, frame_dim: int = 16) -> list[SceneParams]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = derive_rng(seed, "dataset")
    scenes = []
    for _ in range(n_scenes):
        multi = bool(rng.uniform() < multi_shot_fraction)
        scenes.append(random_scene(rng, multi, duration, frame_dim))
    return scenes


def make_dataset(n_scenes: int, multi_shot_fraction: float, seed: int, path=None,
                 embed: bool = False, duration: int = 96, frame_dim: int = 16):
    """Build scenes deterministically from ``seed`` and optionally write them to ``path``."""
    scenes = make_scenes(n_scenes, multi_shot_fraction, seed, duration, frame_dim)
    if path is not None:
        path = Path(path)
        try:
            path.write_bytes(dataset_bytes(scenes, embed))
        except OSError as exc:
            raise FormatError(f"{path}: {exc.strerror}") from exc
    return scenes


def load_dataset(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    return dataset_from_bytes(blob, str(path))


def scene_to_json(scene: SceneParams) -> str:
    return json.dumps({
        "shots": [list(s) for s in scene.shots],
        "boundaries": list(scene.layout.boundaries),
        "duration": scene.duration,
        "frame_dim": scene.frame_dim,
    }, indent=2, sort_keys=True)


def scene_from_json(text: str) -> SceneParams:
    data = json.loads(text)
    try:
        return SceneParams(tuple(tuple(s) for s in data["shots"]),
                           ShotLayout(tuple(data.get("boundaries", ()))),
                           int(data["duration"]), int(data.get("frame_dim", 16)))
    except KeyError as exc:
        raise FormatError(f"scene JSON is missing {exc}") from exc
