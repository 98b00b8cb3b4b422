"""Sequence encoder: feature frontend, sinusoidal positions, stacked self-attention."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DataError, ShapeError
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module, RngStream, xavier
from .numerics import Tensor

FEATURE_MAGIC = b"SBLF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_k: int = 16
    d_v: int = 16
    d_ff: int = 128
    dropout: float = 0.1
    feature_dim: int = 16

    def __post_init__(self):
        for name in ("n_blocks", "n_heads", "d_model", "d_k", "d_v", "d_ff", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")

    @classmethod
    def full_scale(cls, feature_dim: int = 512) -> EncoderConfig:
        return cls(n_blocks=6, n_heads=8, d_model=512, d_k=64, d_v=64, d_ff=2048, dropout=0.5, feature_dim=feature_dim)


@dataclass
class FeatureSequence:
    frames: np.ndarray
    sample_id: str = ""
    language: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"feature sequence {self.sample_id!r} must be T x dim with T >= 1")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class EncoderMemory:
    states: Tensor  # (B, T, d_model)
    mask: np.ndarray  # (B, T), True on real frames

    @property
    def shape(self) -> tuple[int, ...]:
        return self.states.shape


def write_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    t, dim = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, t, dim))
        fh.write(frames.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not an SBLF feature file")
    version, t, dim = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    if len(blob) != 16 + 4 * t * dim:
        raise DataError(f"{path}: payload size does not match header {t}x{dim}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(t, dim).astype(np.float64)


def positional_encoding(n_steps: int, d_model: int) -> np.ndarray:
    if n_steps < 1 or d_model < 1:
        raise ConfigError("positional encoding needs T >= 1 and d >= 1")
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(n_steps, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    pe = np.empty((n_steps, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe


def causal_mask(n_steps: int) -> np.ndarray:
    """Keep-mask where step i may look at steps <= i."""
    return np.tril(np.ones((n_steps, n_steps), dtype=bool))


def multi_head_attention(q, k, v, w_q, w_k, w_v, w_h, n_heads: int, mask=None, return_weights=False):
    """Multi-head scaled dot-product attention on ``(B, T, d)`` inputs.

    Per head j the projections are column blocks j of ``w_q``/``w_k``/``w_v``;
    head outputs are concatenated and mixed by ``w_h``. ``mask`` is a boolean
    keep-mask broadcastable to ``(B, Tq, Tk)``; dropped scores become -inf.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (x.reshape(1, *x.shape) for x in (q, k, v))
    batch, tq, _ = q.shape
    tk = k.shape[1]
    if v.shape[1] != tk:
        raise ShapeError(f"keys ({tk} steps) and values ({v.shape[1]} steps) differ in length")
    d_k = w_q.shape[1] // n_heads
    d_v = w_v.shape[1] // n_heads
    if w_k.shape[1] != w_q.shape[1] or d_k * n_heads != w_q.shape[1] or d_v * n_heads != w_v.shape[1]:
        raise ShapeError("projection widths are not divisible into heads")

    qh = nx.transpose(nx.reshape(nx.matmul(q, w_q), (batch, tq, n_heads, d_k)), (0, 2, 1, 3))
    kh = nx.transpose(nx.reshape(nx.matmul(k, w_k), (batch, tk, n_heads, d_k)), (0, 2, 3, 1))
    vh = nx.transpose(nx.reshape(nx.matmul(v, w_v), (batch, tk, n_heads, d_v)), (0, 2, 1, 3))
    scores = nx.scale(nx.matmul(qh, kh), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            shape = np.broadcast_shapes(mask.shape, (batch, tq, tk))
        except ValueError:
            shape = None
        if shape != (batch, tq, tk):
            raise ShapeError(f"mask {mask.shape} does not match scores ({batch}, {tq}, {tk})")
        scores = nx.masked_fill(scores, np.broadcast_to(mask, shape)[:, None, :, :])
    weights = nx.softmax(scores, axis=-1)
    heads = nx.matmul(weights, vh)
    merged = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (batch, tq, n_heads * d_v))
    out = nx.matmul(merged, w_h)
    if squeeze:
        out = out.reshape(tq, out.shape[-1])
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, d_k: int, d_v: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.w_q = xavier(rng, d_model, n_heads * d_k)
        self.w_k = xavier(rng, d_model, n_heads * d_k)
        self.w_v = xavier(rng, d_model, n_heads * d_v)
        self.w_h = xavier(rng, n_heads * d_v, d_model)

    def __call__(self, q, k, v, mask=None, return_weights=False):
        return multi_head_attention(
            q, k, v, self.w_q, self.w_k, self.w_v, self.w_h, self.n_heads, mask, return_weights
        )


class EncoderBlock(Module):
    """Post-norm block: self-attention then feed-forward, each with add & norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, stream: RngStream):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, stream)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x, x, x, mask)))
        return self.norm2(x + self.drop(self.ffn(x)))


class SyntheticFrontend(Module):
    """Affine map from raw per-frame features to ``d_model``.

    Stands in for the convolutional video frontend: same output contract,
    one ``d_model`` vector per frame.
    """

    def __init__(self, feature_dim: int, d_model: int, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.proj = Linear(feature_dim, d_model, rng)

    def __call__(self, features) -> Tensor:
        shape = features.shape
        if shape[-1] != self.feature_dim:
            raise ShapeError(f"frontend expects feature dim {self.feature_dim}, got {shape[-1]}")
        return self.proj(features)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, stream: RngStream):
        self.cfg = cfg
        self.frontend = SyntheticFrontend(cfg.feature_dim, cfg.d_model, rng)
        self.blocks = [EncoderBlock(cfg, rng, stream) for _ in range(cfg.n_blocks)]
        self.drop = Dropout(cfg.dropout, stream)

    def __call__(self, features, frame_mask: np.ndarray | None = None) -> EncoderMemory:
        feats = features if isinstance(features, Tensor) else Tensor(features)
        if feats.ndim == 2:
            feats = feats.reshape(1, *feats.shape)
        batch, n_frames, _ = feats.shape
        if n_frames == 0:
            raise ContractError("cannot encode an empty frame sequence")
        if frame_mask is None:
            frame_mask = np.ones((batch, n_frames), dtype=bool)
        frame_mask = np.asarray(frame_mask, dtype=bool)
        x = self.frontend(feats) + positional_encoding(n_frames, self.cfg.d_model)
        x = self.drop(x)
        keep = frame_mask[:, None, :]
        for block in self.blocks:
            x = block(x, keep)
        return EncoderMemory(x, frame_mask)


def pad_features(sequences: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length ``T x dim`` arrays into ``(B, Tmax, dim)`` plus a frame mask."""
    t_max = max(s.shape[0] for s in sequences)
    dim = sequences[0].shape[1]
    out = np.zeros((len(sequences), t_max, dim))
    mask = np.zeros((len(sequences), t_max), dtype=bool)
    for i, s in enumerate(sequences):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask
