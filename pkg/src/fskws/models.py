"""Embedding encoder, auxiliary classifier, dummy prototype and checkpoints.

All learnable arrays live in one flat ``dict[str, np.ndarray]`` keyed as
``enc.*`` (encoder), ``cls.*`` (auxiliary classifier) and ``dummy``.
"""
from __future__ import annotations

import hashlib
import json
import re
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import AdamState, Tensor

INPUT_FRAMES = 98
INPUT_BINS = 40
CHECKPOINT_MAGIC = b"PKWC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Conv stack: ``blocks`` x (conv3x3 -> relu -> avgpool2x2), channels doubling per block.

    The first convolution uses ``stem_stride``; a global average pool and one
    linear layer map the last block to ``embed_dim``.
    """

    width: int = 10
    blocks: int = 4
    embed_dim: int = 64
    param_budget_label: str = "base≈40k"
    stem_stride: int = 2

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.embed_dim < 4:
            raise ValueError(f"embed_dim must be >= 4, got {self.embed_dim}")

    @property
    def channels(self) -> list[int]:
        return [self.width * 2 ** i for i in range(self.blocks)]

    def param_count(self) -> int:
        total, c_in = 0, 1
        for c in self.channels:
            total += 9 * c_in * c + c
            c_in = c
        return total + c_in * self.embed_dim + self.embed_dim

    def budget(self) -> int | None:
        m = re.search(r"([\d.]+)\s*([kKmM]?)\s*$", self.param_budget_label)
        if not m:
            return None
        scale = {"": 1, "k": 1_000, "m": 1_000_000}[m.group(2).lower()]
        return int(round(float(m.group(1)) * scale))

    def within_budget(self, tol: float = 0.2) -> bool:
        target = self.budget()
        return target is None or abs(self.param_count() - target) <= tol * target

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


NAMED_CONFIGS = {
    "tiny": EncoderConfig(width=4, blocks=4, embed_dim=64, param_budget_label="tiny≈9k"),
    "base": EncoderConfig(width=10, blocks=4, embed_dim=64, param_budget_label="base≈40k"),
    "large": EncoderConfig(width=20, blocks=4, embed_dim=64, param_budget_label="large≈150k"),
}


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init(config: EncoderConfig, seed: int, num_aux_classes: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, zero dummy prototype."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c in enumerate(config.channels):
        params[f"enc.conv{i}.w"] = _glorot(rng, (3, 3, c_in, c), 9 * c_in, 9 * c)
        params[f"enc.conv{i}.b"] = np.zeros(c)
        c_in = c
    params["enc.fc.w"] = _glorot(rng, (c_in, config.embed_dim), c_in, config.embed_dim)
    params["enc.fc.b"] = np.zeros(config.embed_dim)
    if num_aux_classes:
        params["cls.w"] = _glorot(rng, (config.embed_dim, num_aux_classes), config.embed_dim, num_aux_classes)
        params["cls.b"] = np.zeros(num_aux_classes)
    params["dummy"] = np.zeros(config.embed_dim)
    return params


def encoder_keys(params) -> list[str]:
    return [k for k in params if k.startswith("enc.")]


def encode(config: EncoderConfig, params, batch) -> Tensor:
    """Embed a (batch, 98, 40) stack of feature maps -> (batch, embed_dim).

    ``params`` may hold numpy arrays or tape-registered tensors.
    """
    x = nx.as_tensor(batch)
    if x.value.ndim != 3 or x.shape[1:] != (INPUT_FRAMES, INPUT_BINS):
        raise ValueError(f"encode: expected input (batch, {INPUT_FRAMES}, {INPUT_BINS}), got {x.shape}")
    h = x.reshape(x.shape + (1,))
    for i in range(config.blocks):
        stride = config.stem_stride if i == 0 else 1
        h = nx.conv2d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], stride=stride, padding="same")
        h = nx.relu(h)
        if h.shape[1] >= 2 and h.shape[2] >= 2:
            h = nx.avg_pool2d(h, 2)
    h = nx.mean(h, axis=(1, 2))
    return nx.matmul(h, params["enc.fc.w"]) + params["enc.fc.b"]


def classify_aux(params, embeddings) -> Tensor:
    """Auxiliary 1-FC classifier logits (no softmax)."""
    e = nx.as_tensor(embeddings)
    w = nx.as_tensor(params["cls.w"])
    if e.value.ndim != 2 or e.shape[1] != w.shape[0]:
        raise ValueError(f"classify_aux: embeddings {e.shape} do not match weight {w.shape}")
    return nx.matmul(e, w) + params["cls.b"]


def embed_numpy(config: EncoderConfig, params, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-only embedding in fixed-size chunks (no tape)."""
    out = [encode(config, params, batch[i:i + chunk]).value for i in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.embed_dim))


def check_shapes(config: EncoderConfig, params, num_aux_classes: int | None = None) -> None:
    """Raise if ``params`` do not fit ``config``."""
    ref = init(config, 0, num_aux_classes or 0)
    for name, arr in ref.items():
        if name not in params:
            raise ValueError(f"parameter {name!r} missing for config {config}")
        if params[name].shape != arr.shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, "
                             f"config expects {arr.shape}")


# checkpoints ---------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: EncoderConfig
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    key = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: magic, u32 version, u64 body length, body, u32 CRC32 of everything before it.

    Body: u32 meta length + JSON meta, u32 tensor count, then per tensor a
    length-prefixed UTF-8 name, u32 ndim, u32 dims and a float64 payload.
    """
    tensors = dict(ckpt.params)
    meta = dict(ckpt.meta)
    meta["config"] = asdict(ckpt.config)
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        meta["adam"] = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
                        "eps": opt.eps, "base_lr": opt.base_lr}
        for k, v in opt.m.items():
            tensors[f"adam.m/{k}"] = v
        for k, v in opt.v.items():
            tensors[f"adam.v/{k}"] = v
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(meta_bytes)) + meta_bytes + struct.pack("<I", len(tensors))
    body += b"".join(_pack_tensor(k, tensors[k]) for k in tensors)
    blob = CHECKPOINT_MAGIC + struct.pack("<IQ", ckpt.format_version, len(body)) + body
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path, expected_config: EncoderConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        if len(data) < 16 and data[:4] == CHECKPOINT_MAGIC[:len(data[:4])]:
            raise CheckpointTruncatedError(f"{path}: file ends inside the header")
        raise CheckpointError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, body_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version={version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 16 + body_len + 4:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes, header promises {16 + body_len + 4}")
    blob = data[:16 + body_len]
    (crc,) = struct.unpack("<I", data[16 + body_len:20 + body_len])
    if zlib.crc32(blob) != crc or len(data) != 20 + body_len:
        raise CheckpointChecksumError(f"{path}: CRC32 mismatch")
    pos = 16
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    config = EncoderConfig(**meta.pop("config"))
    optimizer = None
    adam = meta.pop("adam", None)
    if adam is not None:
        optimizer = AdamState(base_lr=adam["base_lr"], beta1=adam["beta1"], beta2=adam["beta2"],
                              eps=adam["eps"], step=adam["step"])
    params = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m/"):
            optimizer.m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            optimizer.v[name[7:]] = arr
        else:
            params[name] = arr
    if expected_config is not None:
        n_aux = params["cls.b"].shape[0] if "cls.b" in params else None
        check_shapes(expected_config, params, n_aux)
        config = expected_config
    return Checkpoint(params, config, optimizer, meta, version)
