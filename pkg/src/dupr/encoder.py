"""Residual conv backbone with a stride {4, 8, 16, 32} pyramid, projection heads,
the EMA key twin, and the binary parameter file format."""

from __future__ import annotations

import io
import json
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor

STRIDES = (4, 8, 16, 32)


def full_image_roi_sizes(image_size: int) -> tuple[int, ...]:
    """One RoI bin per feature cell of a full-image box, per level."""
    return tuple(max(1, image_size // s) for s in STRIDES)

# call counts of the heavy per-level stages; lets tests check lazy evaluation
op_counts: Counter = Counter()


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    blocks: int = 1
    groups: int = 8
    dim: int = 128
    image_head: bool = True
    gn_eps: float = 1e-5

    def validate(self) -> None:
        if len(self.channels) != 4:
            raise ConfigError(f"need 4 stage widths, got {self.channels}")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"stage width {c} not divisible by {self.groups} groups")

    def head_in(self, m: int) -> int:
        return self.channels[m]

    def embed_dim(self, m: int) -> int:
        """Embedding width of the image branch at level ``m``."""
        return self.dim if self.image_head else self.channels[m]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Query-encoder parameters, in a fixed deterministic order."""
    cfg.validate()
    shapes: dict[str, np.ndarray] = {}

    def conv(name, o, i, k):
        shapes[name] = _he(rng, (o, i, k, k), i * k * k)

    def gn(name, c):
        shapes[name + ".g"] = np.ones(c)
        shapes[name + ".b"] = np.zeros(c)

    c0 = cfg.channels[0]
    conv("stem.conv", c0, 3, 3)
    gn("stem.gn", c0)
    cin = c0
    for m, c in enumerate(cfg.channels):
        for b in range(cfg.blocks):
            p = f"s{m}.b{b}"
            conv(p + ".conv1", c, cin, 3)
            gn(p + ".gn1", c)
            conv(p + ".conv2", c, c, 3)
            gn(p + ".gn2", c)
            if cin != c or (b == 0 and m > 0):
                conv(p + ".down", c, cin, 1)
                gn(p + ".gnd", c)
            cin = c
    d = cfg.dim
    for m, c in enumerate(cfg.channels):
        if cfg.image_head:
            shapes[f"img{m}.w1"] = _he(rng, (d, c), c)
            shapes[f"img{m}.b1"] = np.zeros(d)
            shapes[f"img{m}.w2"] = _he(rng, (d, d), d)
            shapes[f"img{m}.b2"] = np.zeros(d)
        shapes[f"patch{m}.w1"] = _he(rng, (d, c, 1, 1), c)
        shapes[f"patch{m}.b1"] = np.zeros(d)
        shapes[f"patch{m}.w2"] = _he(rng, (d, d, 1, 1), d)
        shapes[f"patch{m}.b2"] = np.zeros(d)
    return {name: T.parameter(v, name=name) for name, v in shapes.items()}


def _gn(x, params, name, cfg):
    return T.group_norm(x, cfg.groups, params[name + ".g"], params[name + ".b"], cfg.gn_eps)


def _block(x, params, p, stride, cfg):
    h = T.conv2d(x, params[p + ".conv1"], stride, 1)
    h = T.relu(_gn(h, params, p + ".gn1", cfg))
    h = _gn(T.conv2d(h, params[p + ".conv2"], 1, 1), params, p + ".gn2", cfg)
    if p + ".down" in params:
        x = _gn(T.conv2d(x, params[p + ".down"], stride, 0), params, p + ".gnd", cfg)
    return T.relu(h + x)


def pad_to_multiple(images: np.ndarray, k: int = 32) -> np.ndarray:
    """Zero-pad NCHW images at bottom/right to spatial multiples of ``k``."""
    h, w = images.shape[2:]
    ph, pw = -h % k, -w % k
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return images


def to_nchw(images) -> np.ndarray:
    """Accept one HxWx3 image or a batch NxHxWx3 (or already NCHW Tensor data)."""
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.shape[-1] == 3 and a.shape[1] != 3:
        a = a.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(a)


def forward_pyramid(params: Mapping[str, Tensor], images, cfg: EncoderConfig) -> list[Tensor]:
    """Four feature maps at strides 4, 8, 16 and 32 for an image batch."""
    x = Tensor(pad_to_multiple(to_nchw(images)))
    x = T.conv2d(x, params["stem.conv"], 2, 1)
    x = T.relu(_gn(x, params, "stem.gn", cfg))
    x = T.max_pool2d(x, 2, 2)
    levels = []
    for m in range(4):
        for b in range(cfg.blocks):
            x = _block(x, params, f"s{m}.b{b}", 2 if (b == 0 and m > 0) else 1, cfg)
        levels.append(x)
    return levels


def project_image(level_feat: Tensor, params: Mapping[str, Tensor], m: int,
                  cfg: EncoderConfig) -> Tensor:
    """avgpool -> (2-layer MLP when the image head is on) -> L2 normalize; N x D."""
    op_counts["project_image"] += 1
    v = T.avg_pool_global(level_feat)
    if cfg.image_head:
        w1 = params[f"img{m}.w1"]
        if w1.shape[1] != v.shape[1]:
            raise ConfigError(f"image head {m} expects {w1.shape[1]} channels, got {v.shape[1]}")
        v = T.relu(T.linear(v, w1, params[f"img{m}.b1"]))
        v = T.linear(v, params[f"img{m}.w2"], params[f"img{m}.b2"])
    return T.l2_normalize(v, axis=1)


# ---------------------------------------------------------------- momentum twin

class EncoderPair:
    """Query parameters (trained) and a key copy that only follows by EMA."""

    def __init__(self, query: dict[str, Tensor], m_coef: float = 0.999):
        self.query = query
        self.m_coef = m_coef
        self.key: dict[str, Tensor] = {}
        self.init_key_from_query()

    def init_key_from_query(self) -> None:
        self.key = {name: Tensor(p.data.copy(), requires_grad=False, name=name)
                    for name, p in self.query.items()}

    def momentum_update(self) -> None:
        m = self.m_coef
        if not 0.0 <= m <= 1.0:
            raise ConfigError(f"EMA coefficient must be in [0, 1], got {m}")
        for name, k in self.key.items():
            k.data *= m
            k.data += (1.0 - m) * self.query[name].data


# ---------------------------------------------------------------- parameter files

MAGIC = b"DUPR"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_tensor_file(path, meta: dict, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write ``MAGIC | u32 version | u64 len + JSON meta | u32 count |
    (u16 len + name, u8 ndim, u64 dims, f64 LE data)*``; atomic via rename."""
    path = Path(path)
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below is C-order; keeps 0-d shapes
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {data[:4]!r}")
    version, blen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version: expected {VERSION}, found {version}")
    pos = 16
    meta = json.loads(data[pos:pos + blen])
    pos += blen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    return meta, arrays
