"""Bidirectional transformer that predicts the flow-matching velocity.

Input tokens are frames carrying Multi-Mask channels (noisy | condition | mask).
The diffusion time and the prompt vector are embedded and added to every
token after the input projection. Attention is full (no causal mask) and uses
rotary embeddings on queries and keys driven by the temporal index plan, so
the network only sees index differences.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError
from .positions import RopeParams, TemporalIndexPlan, rope_tables, rotate
from .seeding import as_rng
from .tensor import Tensor

TIME_FEATURES = 32
TIME_SCALE = 100.0


@dataclass(frozen=True)
class ModelConfig:
    frame_dim: int = 16
    width: int = 64
    layers: int = 4
    heads: int = 4
    cond_dim: int = 8
    max_T: int = 256
    mlp_ratio: int = 4
    theta_base: float = 10000.0

    def __post_init__(self):
        for name in ("frame_dim", "width", "layers", "heads", "cond_dim", "max_T", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def in_channels(self) -> int:
        return 2 * self.frame_dim + 1

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.width

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    W, F = cfg.width, cfg.hidden
    shapes = {
        "in_proj.w": (cfg.in_channels, W),
        "in_proj.b": (W,),
        "time.fc1.w": (TIME_FEATURES, W),
        "time.fc1.b": (W,),
        "time.fc2.w": (W, W),
        "time.fc2.b": (W,),
        "prompt.w": (cfg.cond_dim, W),
        "prompt.b": (W,),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "attn_norm.g": (W,),
            p + "attn.q": (W, W),
            p + "attn.k": (W, W),
            p + "attn.v": (W, W),
            p + "attn.o": (W, W),
            p + "mlp_norm.g": (W,),
            p + "mlp.fc1.w": (W, F),
            p + "mlp.fc1.b": (F,),
            p + "mlp.fc2.w": (F, W),
            p + "mlp.fc2.b": (W,),
        })
    shapes.update({"final_norm.g": (W,), "out_proj.w": (W, cfg.frame_dim),
                   "out_proj.b": (cfg.frame_dim,)})
    return shapes


def init_params(cfg: ModelConfig, seed=0, dtype=np.float32) -> dict[str, Tensor]:
    rng = as_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name in ("out_proj.w", ) or name.endswith("attn.o") or name.endswith("fc2.w"):
                std *= 0.5 / math.sqrt(cfg.layers)
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def check_params(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")


def timestep_features(t: np.ndarray, dtype) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    half = TIME_FEATURES // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = TIME_SCALE * t[..., None] * freqs
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=-1).astype(dtype)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tn.matmul(x, w)
    return y if b is None else tn.add(y, b)


def _time_embedding(params, t: np.ndarray) -> Tensor:
    dtype = params["time.fc1.w"].dtype
    feats = Tensor(timestep_features(t, dtype))
    h = tn.silu(_linear(feats, params["time.fc1.w"], params["time.fc1.b"]))
    return _linear(h, params["time.fc2.w"], params["time.fc2.b"])


def embed_timestep(params, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"diffusion time t={t} outside [0, 1]")
    with tn.no_grad():
        return _time_embedding(params, np.asarray([t])).data[0]


def _attention(params, prefix: str, x: Tensor, cfg: ModelConfig, cos, sin) -> Tensor:
    B, T, W = x.shape
    H, hd = cfg.heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

    q = rotate(heads(tn.matmul(x, params[prefix + "q"])), cos, sin)
    k = rotate(heads(tn.matmul(x, params[prefix + "k"])), cos, sin)
    v = heads(tn.matmul(x, params[prefix + "v"]))
    scores = tn.mul(tn.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(hd))
    out = tn.matmul(tn.softmax_rows(scores), v)
    out = out.transpose(0, 2, 1, 3).reshape(B, T, W)
    return tn.matmul(out, params[prefix + "o"])


def forward_batch(params, cfg: ModelConfig, channels: np.ndarray, t: np.ndarray,
                  prompt: np.ndarray, indices: np.ndarray) -> Tensor:
    """Batched forward pass.

    channels: (B, T, 2D+1); t: (B,); prompt: (B, cond_dim); indices: (B, T).
    Returns a (B, T, D) velocity Tensor on the tape.
    """
    channels = np.asarray(channels)
    if channels.ndim != 3 or channels.shape[2] != cfg.in_channels:
        raise ContractError(
            f"channels must be (B, T, {cfg.in_channels}), got {channels.shape}")
    B, T, _ = channels.shape
    if T > cfg.max_T:
        raise ContractError(f"sequence length {T} exceeds max_T={cfg.max_T}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    prompt = np.asarray(prompt)
    indices = np.asarray(indices, dtype=np.float64)
    if t.shape != (B,):
        raise ContractError(f"need one diffusion time per item, got {t.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("diffusion time outside [0, 1]")
    if prompt.shape != (B, cfg.cond_dim):
        raise ContractError(f"prompt must be (B, {cfg.cond_dim}), got {prompt.shape}")
    if indices.shape != (B, T):
        raise ContractError(f"indices must be (B, T) = {(B, T)}, got {indices.shape}")

    dtype = params["in_proj.w"].dtype
    cos, sin = rope_tables(indices[:, None, :], RopeParams(cfg.head_dim, cfg.theta_base), dtype)

    h = _linear(Tensor(channels, dtype=dtype), params["in_proj.w"], params["in_proj.b"])
    cond = tn.add(_time_embedding(params, t),
                  _linear(Tensor(prompt, dtype=dtype), params["prompt.w"], params["prompt.b"]))
    h = tn.add(h, cond.reshape(B, 1, cfg.width))
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        a = tn.rms_norm(h, params[p + "attn_norm.g"])
        h = tn.add(h, _attention(params, p + "attn.", a, cfg, cos, sin))
        m = tn.rms_norm(h, params[p + "mlp_norm.g"])
        m = tn.silu(_linear(m, params[p + "mlp.fc1.w"], params[p + "mlp.fc1.b"]))
        h = tn.add(h, _linear(m, params[p + "mlp.fc2.w"], params[p + "mlp.fc2.b"]))
    h = tn.rms_norm(h, params["final_norm.g"])
    return _linear(h, params["out_proj.w"], params["out_proj.b"])


def forward(params, cfg: ModelConfig, channels: np.ndarray, t: float, prompt: np.ndarray,
            indices) -> np.ndarray:
    """Single-sequence velocity prediction, (T, 2D+1) -> (T, D), without taping."""
    if isinstance(indices, TemporalIndexPlan):
        indices = indices.as_array()
    channels = np.asarray(channels)
    indices = np.asarray(indices, dtype=np.float64)
    if channels.ndim != 2:
        raise ContractError(f"channels must be (T, {cfg.in_channels}), got {channels.shape}")
    if indices.shape != (channels.shape[0],):
        raise ContractError(f"need {channels.shape[0]} temporal indices, got {indices.shape}")
    with tn.no_grad():
        out = forward_batch(params, cfg, channels[None], np.asarray([t]),
                            np.asarray(prompt)[None], indices[None])
    return out.data[0]


def flops_forward(cfg: ModelConfig, T: int) -> int:
    """Multiply-adds of one forward call on a length-T sequence.

    Counts every matrix product: input projection, timestep MLP, prompt
    projection, per-layer Q/K/V/O projections, attention scores and
    weighted values, the MLP, and the output projection::

        T*(2D+1)*W + F_t*W + W*W + c*W
          + L*(4*T*W^2 + 2*H*T^2*hd + 2*T*W*F) + T*W*D
    """
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    W, D, L, H, hd, F = cfg.width, cfg.frame_dim, cfg.layers, cfg.heads, cfg.head_dim, cfg.hidden
    linear = T * cfg.in_channels * W + L * (4 * T * W * W + 2 * T * W * F) + T * W * D
    embed = TIME_FEATURES * W + W * W + cfg.cond_dim * W
    return linear + embed + attention_flops(cfg, T)


def attention_flops(cfg: ModelConfig, T: int) -> int:
    return cfg.layers * cfg.heads * T * T * cfg.head_dim * 2
