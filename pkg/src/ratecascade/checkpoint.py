"""Training checkpoints.

File layout (little-endian)::

    b"TMCK" | u32 version | u32 metadata_len | metadata (UTF-8 JSON, sorted keys)
    | u32 n_arrays | n_arrays * array

    array = u16 name_len | name (UTF-8) | u8 ndim | ndim * u32 extent | f32 values

Array names are prefixed by group: ``param/``, ``ema/``, ``adam_m/``, ``adam_v/``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import ModelConfig, param_shapes
from .errors import FormatError

MAGIC = b"TMCK"
VERSION = 1
GROUPS = ("param", "ema", "adam_m", "adam_v")
SINGLE_RATE = "single_rate"
MULTI_RATE = "multi_rate"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    stage: str = SINGLE_RATE
    step: int = 0
    train_config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, model_config: ModelConfig, params: dict[str, np.ndarray], **kw) -> "Checkpoint":
        params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
        return cls(model_config, params,
                   ema={k: v.copy() for k, v in params.items()},
                   adam_m={k: np.zeros_like(v) for k, v in params.items()},
                   adam_v={k: np.zeros_like(v) for k, v in params.items()}, **kw)

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        return {"param": self.params, "ema": self.ema, "adam_m": self.adam_m, "adam_v": self.adam_v}

    def validate(self) -> None:
        expected = param_shapes(self.model_config)
        for group, arrays in self.groups().items():
            if set(arrays) != set(expected):
                raise FormatError(f"checkpoint group {group!r} does not match the model config")
            for name, shape in expected.items():
                if arrays[name].shape != shape:
                    raise FormatError(f"{group}/{name}: shape {arrays[name].shape} != {shape}")

    def metadata(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "config_hash": self.model_config.config_hash(),
            "stage": self.stage,
            "step": self.step,
            "train_config": self.train_config,
            "rng_state": self.rng_state,
        }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<II", VERSION, len(meta)) + meta)
    names = list(param_shapes(ckpt.model_config))
    out.write(struct.pack("<I", len(names) * len(GROUPS)))
    for group, arrays in ckpt.groups().items():
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            key = f"{group}/{name}".encode("utf-8")
            out.write(struct.pack("<H", len(key)) + key)
            out.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.write(arr.tobytes())
    return out.getvalue()


def _take(buf: io.BytesIO, fmt: str, source: str):
    size = struct.calcsize(fmt)
    chunk = buf.read(size)
    if len(chunk) != size:
        raise FormatError(f"{source}: truncated checkpoint")
    return struct.unpack(fmt, chunk)


def checkpoint_from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, meta_len = _take(buf, "<II", source)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    cfg = ModelConfig(**meta["model_config"])
    if cfg.config_hash() != meta.get("config_hash"):
        raise FormatError(f"{source}: config hash does not match stored model config")
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    (count,) = _take(buf, "<I", source)
    for _ in range(count):
        (ln,) = _take(buf, "<H", source)
        key = buf.read(ln).decode("utf-8")
        (ndim,) = _take(buf, "<B", source)
        shape = _take(buf, f"<{ndim}I", source)
        n = int(np.prod(shape)) if ndim else 1
        data = buf.read(4 * n)
        if len(data) != 4 * n:
            raise FormatError(f"{source}: truncated array {key}")
        group, _, name = key.partition("/")
        if group not in groups:
            raise FormatError(f"{source}: unknown array group {group!r}")
        groups[group][name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if buf.read(1):
        raise FormatError(f"{source}: trailing bytes")
    ckpt = Checkpoint(cfg, groups["param"], groups["ema"], groups["adam_m"], groups["adam_v"],
                      stage=meta["stage"], step=int(meta["step"]),
                      train_config=meta.get("train_config", {}),
                      rng_state=meta.get("rng_state", {}))
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    return checkpoint_from_bytes(blob, str(path))
