"""Full network assembly, light-source blend-back, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConfigError
from .hfrm import HFRM, HfrmConfig
from .lffpm import LFFPM, LffpmConfig
from .params import ParamFormatError, ParamStore
from .pyramid import MAX_DEPTH, DimensionError, Pyramid, blur, decompose, reconstruct

MODEL_VERSION = "mfdnet-1"
DEFAULT_SAT_THRESHOLD = 0.97


@dataclass
class ModelConfig:
    depth: int = 3
    lffpm: LffpmConfig = field(default_factory=LffpmConfig)
    hfrm: HfrmConfig = field(default_factory=HfrmConfig)

    def validate(self):
        if not 1 <= self.depth <= MAX_DEPTH:
            raise ConfigError(f"pyramid.depth must be in 1..{MAX_DEPTH}, got {self.depth}")
        self.lffpm.validate()
        self.hfrm.validate()
        return self

    @property
    def divisor(self):
        return 2 ** (self.depth + self.lffpm.unet_depth)

    def to_dict(self):
        return {"pyramid": {"depth": self.depth}, "lffpm": self.lffpm.to_dict(), "hfrm": self.hfrm.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            depth=int(d.get("pyramid", {}).get("depth", 3)),
            lffpm=LffpmConfig(**d.get("lffpm", {})),
            hfrm=HfrmConfig(**d.get("hfrm", {})),
        ).validate()

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class MFDNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        self.lffpm = LFFPM(self.cfg.lffpm)
        self.hfrm = HFRM(self.cfg.depth, self.cfg.hfrm)
        self.version = MODEL_VERSION
        self.seed = None

    @property
    def divisor(self):
        return self.cfg.divisor

    def check_dims(self, h, w):
        d = self.divisor
        if h % d or w % d:
            raise DimensionError(f"input {h}x{w} must be divisible by {d} "
                                 f"(2^(pyramid depth + unet depth))")

    def forward(self, x):
        """Unclipped restoration of an ``(N, 3, H, W)`` batch."""
        self.check_dims(*x.shape[-2:])
        pyr = decompose(x, self.cfg.depth)
        deflared_low = self.lffpm(pyr.residual)
        fused = self.hfrm(pyr, deflared_low)
        return reconstruct(Pyramid(bands=fused, residual=deflared_low))


def build_model(cfg: ModelConfig | None = None, seed=0, dtype=torch.float32) -> MFDNet:
    """Deterministically initialized model; same seed gives bit-identical weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MFDNet(cfg)
    model.seed = seed
    return model.to(dtype)


def deflare(model: MFDNet, img: torch.Tensor) -> torch.Tensor:
    return model(img).clamp(0.0, 1.0)


def luminance(img: torch.Tensor) -> torch.Tensor:
    r, g, b = img[:, 0:1], img[:, 1:2], img[:, 2:3]
    return 0.299 * r + 0.587 * g + 0.114 * b


def blend_light_source(inp: torch.Tensor, deflared: torch.Tensor, threshold=DEFAULT_SAT_THRESHOLD):
    """Paste saturated light sources from ``inp`` back over ``deflared``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if inp.shape != deflared.shape:
        raise DimensionError(f"input {tuple(inp.shape)} and deflared {tuple(deflared.shape)} differ")
    mask = (luminance(inp) >= threshold).to(inp.dtype)
    mask = blur(mask)
    return mask * inp + (1.0 - mask) * deflared


def padded_size(model: MFDNet, h: int, w: int) -> tuple[int, int]:
    """Smallest size >= ``h x w`` divisible by the model divisor."""
    d = model.divisor
    if h < 1 or w < 1:
        raise DimensionError(f"invalid size {h}x{w}")
    ph, pw = -(-h // d) * d, -(-w // d) * d
    if ph - h >= h or pw - w >= w:
        raise DimensionError(f"{h}x{w} is too small to reflect-pad to a multiple of {d}")
    return ph, pw


def pad_reflect(x, h, w):
    """Reflect-pad an ``(N, C, h0, w0)`` tensor on the bottom/right to ``h x w``."""
    return F.pad(x, (0, w - x.shape[-1], 0, h - x.shape[-2]), mode="reflect")


@torch.no_grad()
def restore(model: MFDNet, img: torch.Tensor, sat_threshold=DEFAULT_SAT_THRESHOLD) -> torch.Tensor:
    """Deflare an image of any size: pad, run, crop, then blend light sources back."""
    h, w = img.shape[-2:]
    ph, pw = padded_size(model, h, w)
    out = deflare(model, pad_reflect(img, ph, pw))[..., :h, :w]
    return blend_light_source(img, out, sat_threshold)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"MFDNCKPT" | u16 version | u32 config length | config (canonical JSON)
#         | 32-byte sha256(config + payload) | u64 payload length | payload (ParamStore bytes)

CKPT_MAGIC = b"MFDNCKPT"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(ValueError):
    pass


def checkpoint_bytes(model: MFDNet, extra: dict | None = None) -> bytes:
    meta = {"config": model.cfg.to_dict(), "version": model.version, "extra": extra or {}}
    config = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = ParamStore.from_module(model, model.seed or 0).to_bytes()
    digest = hashlib.sha256(config + payload).digest()
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<HI", CKPT_VERSION, len(config)),
        config,
        digest,
        struct.pack("<Q", len(payload)),
        payload,
    ])


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: MFDNet, path, extra: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(model, extra))


def parse_checkpoint(data: bytes):
    """Return ``(meta, store)``; raises on any corruption before building a model."""
    n = len(data)
    if n < len(CKPT_MAGIC) + 6 or data[:8] != CKPT_MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)", 0)
    version, cfg_len = struct.unpack_from("<HI", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {CKPT_VERSION}")
    pos = 14
    if pos + cfg_len + 40 > n:
        raise CheckpointFormatError("truncated header", n)
    config = data[pos:pos + cfg_len]
    pos += cfg_len
    digest = data[pos:pos + 32]
    pos += 32
    (payload_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if pos + payload_len != n:
        raise CheckpointFormatError(
            f"payload length {payload_len} does not match file size {n}", min(pos + payload_len, n))
    payload = data[pos:]
    if hashlib.sha256(config + payload).digest() != digest:
        raise CheckpointFormatError("checksum mismatch", pos - 40)
    try:
        meta = json.loads(config.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable config: {e}", 14) from e
    if meta.get("version") != MODEL_VERSION:
        raise CheckpointVersionError(f"model version {meta.get('version')!r}, expected {MODEL_VERSION!r}")
    try:
        store = ParamStore.from_bytes(payload, base_offset=pos)
    except ParamFormatError as e:
        raise CheckpointFormatError(str(e), e.offset) from e
    return meta, store


def model_from_checkpoint(meta, store: ParamStore) -> MFDNet:
    dtype = torch.float64 if any(a.dtype == np.float64 for _, a in store.items()) else torch.float32
    model = build_model(ModelConfig.from_dict(meta["config"]), seed=store.init_seed, dtype=dtype)
    store.load_into(model)
    return model


def load_checkpoint(path, with_meta=False):
    with open(path, "rb") as f:
        data = f.read()
    meta, store = parse_checkpoint(data)
    model = model_from_checkpoint(meta, store)
    if with_meta:
        return model, meta
    return model
