"""Patch-based spectrogram transformer with CLS-token classification.

Parameters live in a plain ``dict[str, np.ndarray]``; the forward pass
accepts either arrays (constants, no graph) or autodiff tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import Spectrogram
from .errors import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)

CLASS_NAMES = ("Normal", "Crackle", "Wheeze", "Both")
INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4
    input_bins: int = 128
    input_frames: int = 800
    dropout: float = 0.1
    # per-mel-bin input standardization set from training data; empty means identity
    norm_mean: tuple[float, ...] = ()
    norm_std: tuple[float, ...] = ()

    def validate(self) -> "ModelConfig":
        p = self.patch_size
        if min(p, self.embed_dim, self.depth, self.heads, self.mlp_ratio, self.num_classes) <= 0:
            raise ConfigError(f"model sizes must be positive: {self}")
        if self.input_bins % p or self.input_frames % p:
            raise ConfigError(f"input {self.input_bins}x{self.input_frames} is not divisible by patch size {p}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if len(self.norm_mean) != len(self.norm_std) or len(self.norm_mean) not in (0, self.input_bins):
            raise ConfigError(
                f"norm_mean/norm_std must both be empty or hold {self.input_bins} values, "
                f"got {len(self.norm_mean)} and {len(self.norm_std)}"
            )
        if any(not v > 0.0 for v in self.norm_std):
            raise ConfigError("norm_std values must be positive")
        return self

    @property
    def num_patches(self) -> int:
        return (self.input_bins // self.patch_size) * (self.input_frames // self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("norm_mean", "norm_std"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


# ---------------------------------------------------------------------------
# patches


def patchify(values: np.ndarray, patch: int = 16) -> np.ndarray:
    """Non-overlapping ``patch x patch`` tiles, row-major over (bin block, frame block).

    Works on ``[bins, frames]`` or a batch ``[B, bins, frames]``; returns
    ``[..., N, patch * patch]``.
    """
    values = np.asarray(values, dtype=np.float64)
    *lead, bins, frames = values.shape
    if bins % patch or frames % patch:
        raise ConfigError(f"spectrogram {bins}x{frames} is not divisible by patch size {patch}")
    nb, nf = bins // patch, frames // patch
    tiles = values.reshape(*lead, nb, patch, nf, patch)
    tiles = np.moveaxis(tiles, -3, -2)
    return tiles.reshape(*lead, nb * nf, patch * patch)


def unpatchify(patches: np.ndarray, bins: int, frames: int, patch: int = 16) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, _, _ = patches.shape
    nb, nf = bins // patch, frames // patch
    tiles = patches.reshape(*lead, nb, nf, patch, patch)
    return np.moveaxis(tiles, -2, -3).reshape(*lead, bins, frames)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, p = config.embed_dim, config.patch_size
    hidden = d * config.mlp_ratio
    shapes = {
        "patch_embed.weight": (p * p, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (config.num_patches + 1, d),
    }
    for i in range(config.depth):
        b = f"blocks.{i}."
        shapes.update(
            {
                b + "norm1.gain": (d,),
                b + "norm1.bias": (d,),
                b + "attn.q.weight": (d, d),
                b + "attn.q.bias": (d,),
                b + "attn.k.weight": (d, d),
                b + "attn.k.bias": (d,),
                b + "attn.v.weight": (d, d),
                b + "attn.v.bias": (d,),
                b + "attn.proj.weight": (d, d),
                b + "attn.proj.bias": (d,),
                b + "norm2.gain": (d,),
                b + "norm2.bias": (d,),
                b + "mlp.fc1.weight": (d, hidden),
                b + "mlp.fc1.bias": (hidden,),
                b + "mlp.fc2.weight": (hidden, d),
                b + "mlp.fc2.bias": (d,),
            }
        )
    shapes.update(
        {
            "norm.gain": (d,),
            "norm.bias": (d,),
            "head.weight": (d, config.num_classes),
            "head.bias": (config.num_classes,),
        }
    )
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations, by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias") or name == "cls_token":
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    return params


# ---------------------------------------------------------------------------
# forward pass


def _as_batch(x, config: ModelConfig) -> np.ndarray:
    """Stack spectrograms or raw arrays into ``[B, bins, frames]`` and standardize."""
    if isinstance(x, Spectrogram):
        x = x.values[None]
    elif isinstance(x, (list, tuple)):
        x = np.stack([s.values if isinstance(s, Spectrogram) else np.asarray(s) for s in x])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (config.input_bins, config.input_frames):
        raise ConfigError(
            f"input spectrogram {x.shape[1]}x{x.shape[2]} does not match model config "
            f"{config.input_bins}x{config.input_frames}"
        )
    if not config.norm_mean:
        return x
    mean = np.asarray(config.norm_mean)[:, None]
    std = np.asarray(config.norm_std)[:, None]
    return (x - mean) / std


def _linear(x, params, name):
    return ad.matmul(x, params[name + ".weight"]) + params[name + ".bias"]


def _attention(x, params, prefix, config, attn_out):
    b, t, d = x.shape
    h = config.heads
    dh = d // h

    def heads(name):
        return _linear(x, params, prefix + name).reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    # scale the small query tensor rather than the T x T score matrix
    scores = ad.matmul(q * (1.0 / np.sqrt(dh)), k.transpose(0, 1, 3, 2))
    weights = ad.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(weights.data)
    mixed = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return _linear(mixed, params, prefix + "proj")


def _block(x, params, i, config, rng, attn_out):
    b = f"blocks.{i}."
    rate = config.dropout
    h = ad.layer_norm(x, params[b + "norm1.gain"], params[b + "norm1.bias"], LN_EPS)
    x = x + ad.dropout(_attention(h, params, b + "attn.", config, attn_out), rate, rng)
    h = ad.layer_norm(x, params[b + "norm2.gain"], params[b + "norm2.bias"], LN_EPS)
    h = _linear(ad.gelu(_linear(h, params, b + "mlp.fc1")), params, b + "mlp.fc2")
    return x + ad.dropout(h, rate, rng)


def encode_tokens(
    patches,
    params: Mapping,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    attn_out: list | None = None,
    use_cls: bool = True,
    use_pos: bool = True,
) -> Tensor:
    """Run ``[B, N, patch*patch]`` patches through the encoder; returns final-normed tokens.

    With ``use_cls`` the output has ``N + 1`` tokens, the CLS token first.
    ``rng`` enables dropout; ``attn_out`` collects each layer's attention
    weights ``[B, heads, T, T]``.
    """
    params = {k: ad.as_tensor(v) for k, v in params.items()}
    x = _linear(ad.as_tensor(patches), params, "patch_embed")
    bsz, n, d = x.shape
    if use_cls:
        cls = ad.broadcast_to(params["cls_token"].reshape(1, 1, d), (bsz, 1, d))
        x = ad.concat([cls, x], axis=1)
    if use_pos:
        pos = params["pos_embed"] if use_cls else params["pos_embed"][1:]
        x = x + pos
    x = ad.dropout(x, config.dropout, rng)
    for i in range(config.depth):
        x = _block(x, params, i, config, rng, attn_out)
    return ad.layer_norm(x, params["norm.gain"], params["norm.bias"], LN_EPS)


def forward_batch(x, params: Mapping, config: ModelConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``[B, num_classes]``. Dropout is active only when ``rng`` is given."""
    patches = patchify(_as_batch(x, config), config.patch_size)
    tokens = encode_tokens(patches, params, config, rng)
    params = {k: ad.as_tensor(v) for k, v in params.items()}
    return _linear(tokens[:, 0, :], params, "head")


def forward(spec, params: Mapping, config: ModelConfig, train: bool = False, seed: int = 0) -> np.ndarray:
    """Logits for one spectrogram. ``train`` enables dropout with masks drawn from ``seed``."""
    rng = np.random.default_rng(seed) if train else None
    return forward_batch(spec, _constants(params), config, rng).data[0]


def extract_embedding(spec, params: Mapping, config: ModelConfig) -> np.ndarray:
    """Eval-mode CLS representation after the final layer norm; ``[D]`` or ``[B, D]`` for batches."""
    batch = _as_batch(spec, config)
    tokens = encode_tokens(patchify(batch, config.patch_size), _constants(params), config)
    emb = tokens.data[:, 0, :]
    return emb[0] if isinstance(spec, Spectrogram) or np.asarray(spec).ndim == 2 else emb


def export_attention(spec, params: Mapping, config: ModelConfig) -> np.ndarray:
    """Eval-mode attention weights, ``[depth, heads, N + 1, N + 1]``."""
    maps: list[np.ndarray] = []
    batch = _as_batch(spec, config)
    encode_tokens(patchify(batch[:1], config.patch_size), _constants(params), config, attn_out=maps)
    return np.stack([m[0] for m in maps])


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def _constants(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"ASTC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] | None = None
    state: dict | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def epoch(self) -> int:
        return int((self.state or {}).get("epoch", 0))

    @property
    def seed(self) -> int:
        return int((self.state or {}).get("seed", 0))


def _pack_entry(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    value = np.asarray(value, dtype="<f8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", value.ndim)
    head += struct.pack(f"<{value.ndim}I", *value.shape)
    return head + np.ascontiguousarray(value).tobytes()


def checkpoint_to_bytes(ckpt: ModelCheckpoint) -> bytes:
    shapes = param_shapes(ckpt.config)
    missing = [n for n in shapes if n not in ckpt.params]
    if missing:
        raise CheckpointShapeError(f"parameter {missing[0]} is missing")
    record = json.dumps(
        {"config": ckpt.config.to_dict(), "state": ckpt.state or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    entries = [(name, ckpt.params[name]) for name in shapes]
    entries += sorted((ckpt.optimizer or {}).items())
    out = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(record)), record]
    out.append(struct.pack("<I", len(entries)))
    out.extend(_pack_entry(name, value) for name, value in entries)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def checkpoint_from_bytes(data: bytes, expected: ModelConfig | None = None) -> ModelCheckpoint:
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not an ASTC checkpoint (bad magic)")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    record = json.loads(r.take(r.u32("config length"), "config record").decode("utf-8"))
    try:
        config = ModelConfig.from_dict(record["config"]).validate()
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointConfigError(f"invalid config record: {exc}") from exc
    if expected is not None and config != expected:
        raise CheckpointConfigError(f"checkpoint config {config} differs from expected {expected}")
    shapes = param_shapes(config)
    params: dict[str, np.ndarray] = {}
    optimizer: dict[str, np.ndarray] = {}
    for _ in range(r.u32("entry count")):
        name = r.take(r.u32("name length"), "entry name").decode("utf-8")
        ndim = r.u32(f"{name} rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        if name in shapes and tuple(shape) != shapes[name]:
            raise CheckpointShapeError(f"parameter {name}: stored shape {tuple(shape)} != expected {shapes[name]}")
        count = int(np.prod(shape, dtype=np.int64))
        value = np.frombuffer(r.take(8 * count, f"{name} data"), dtype="<f8").reshape(shape).astype(np.float64)
        (params if name in shapes else optimizer)[name] = value
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last entry")
    missing = [n for n in shapes if n not in params]
    if missing:
        raise CheckpointShapeError(f"parameter {missing[0]} is missing")
    return ModelCheckpoint(config, params, optimizer or None, record.get("state") or None, version)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), expected)
