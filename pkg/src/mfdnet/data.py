"""Synthetic flare pairs: assets, augmentation, compositing, iteration.

Images are ``H x W x 3`` float64 arrays in [0, 1] (sRGB-encoded values, as
decoded from 8-bit PNG). Compositing happens in linear light:
``corrupted = clip(base**g + flare**g) ** (1/g)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .blocks import ConfigError, ShapeError

GAMMA_RANGE = (1.8, 2.6)
ROTATION_RANGE = (0.0, 360.0)
SHEAR_RANGE = (-20.0, 20.0)
SCALE_RANGE = (0.8, 1.5)
MAX_TRANSLATION = 0.25
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
FLARE_KINDS = ("scattering", "reflective")


class IngestionError(OSError):
    pass


# ---------------------------------------------------------------------------
# image io


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise IngestionError(f"cannot read image {path}: {e}") from e
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write atomically (temp file + rename) so failures leave no partial file."""
    path = Path(path)
    tmp = path.with_name(f".tmp-{path.name}")
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``H x W x 3`` array -> ``1 x 3 x H x W`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().squeeze(0).permute(1, 2, 0).cpu().double().numpy()


def resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape[:2] == (h, w):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


# ---------------------------------------------------------------------------
# flare assets and augmentation


@dataclass
class FlareAsset:
    image: np.ndarray
    kind: str = "scattering"

    def __post_init__(self):
        if self.kind not in FLARE_KINDS:
            raise ValueError(f"unknown flare kind {self.kind!r}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"flare image must be H x W x 3, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("flare values must lie in [0, 1]")


@dataclass
class AugmentParams:
    rotation: float = 0.0  # degrees, counter-clockwise as displayed
    translate_x: float = 0.0  # pixels
    translate_y: float = 0.0
    shear: float = 0.0  # degrees, along x
    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False
    seed: int | None = None

    def validate(self, h: int, w: int):
        if not ROTATION_RANGE[0] <= self.rotation < ROTATION_RANGE[1]:
            raise ValueError(f"rotation must be in [0, 360), got {self.rotation}")
        if abs(self.translate_x) > MAX_TRANSLATION * w or abs(self.translate_y) > MAX_TRANSLATION * h:
            raise ValueError(f"translation ({self.translate_x}, {self.translate_y}) exceeds 25% of {w}x{h}")
        if not SHEAR_RANGE[0] <= self.shear <= SHEAR_RANGE[1]:
            raise ValueError(f"shear must be in [-20, 20] degrees, got {self.shear}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale must be in [0.8, 1.5], got {self.scale}")
        return self

    @classmethod
    def sample(cls, rng: np.random.Generator, h: int, w: int) -> "AugmentParams":
        return cls(
            rotation=float(rng.uniform(*ROTATION_RANGE)),
            translate_x=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION) * w),
            translate_y=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION) * h),
            shear=float(rng.uniform(*SHEAR_RANGE)),
            scale=float(rng.uniform(*SCALE_RANGE)),
            hflip=bool(rng.random() < 0.5),
            vflip=bool(rng.random() < 0.5),
        )

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map on centred ``(x, y)`` coordinates (y pointing down)."""
        flip = np.diag([-1.0 if self.hflip else 1.0, -1.0 if self.vflip else 1.0])
        scale = np.eye(2) * self.scale
        shear = np.array([[1.0, math.tan(math.radians(self.shear))], [0.0, 1.0]])
        t = math.radians(self.rotation)
        rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
        m = rot @ shear @ scale @ flip
        snapped = np.round(m)
        return np.where(np.abs(m - snapped) < 1e-12, snapped, m)


def augment_flare(flare: FlareAsset, ap: AugmentParams) -> FlareAsset:
    """One composed affine warp, bilinear sampling, zero outside the source."""
    img = flare.image
    h, w = img.shape[:2]
    ap.validate(h, w)
    fwd = ap.matrix()
    inv = np.linalg.inv(fwd)
    snapped = np.round(inv)
    inv = np.where(np.abs(inv - snapped) < 1e-12, snapped, inv)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    # scipy works in (row, col) = (y, x) order: in = M @ out + offset
    m_rc = inv[::-1, ::-1]
    centre = np.array([cy, cx])
    shift = np.array([ap.translate_y, ap.translate_x])
    offset = centre - m_rc @ (centre + shift)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(img[..., ch], m_rc, offset=offset, order=1,
                                                mode="constant", cval=0.0)
    return FlareAsset(np.clip(out, 0.0, 1.0), flare.kind)


# ---------------------------------------------------------------------------
# compositing


def draw_gamma(rng: np.random.Generator) -> float:
    return float(rng.uniform(*GAMMA_RANGE))


def synthesize_pair(base: np.ndarray, flare, gamma: float | None = None, rng=None):
    """Return ``(corrupted, gt)``; ``gt`` is ``base`` itself, untouched."""
    flare_img = flare.image if isinstance(flare, FlareAsset) else np.asarray(flare)
    if base.shape != flare_img.shape:
        raise ShapeError(f"base {base.shape} and flare {flare_img.shape} differ")
    if gamma is None:
        if rng is None:
            raise ValueError("pass either gamma or rng")
        gamma = draw_gamma(rng)
    if not GAMMA_RANGE[0] <= gamma <= GAMMA_RANGE[1]:
        raise ValueError(f"gamma must be in [1.8, 2.6], got {gamma}")
    linear = np.clip(base**gamma + flare_img**gamma, 0.0, 1.0)
    corrupted = linear ** (1.0 / gamma)
    # where one term is zero the encode/decode round trip is skipped to stay exact
    corrupted = np.where(flare_img == 0, base, corrupted)
    corrupted = np.where(base == 0, flare_img, corrupted)
    return corrupted, base


# ---------------------------------------------------------------------------
# procedural assets


def _grid(h, w):
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return y, x


def make_flare(rng: np.random.Generator, size: int = 128, kind: str = "scattering") -> FlareAsset:
    """Procedural flare: glow blob with radial streaks, or a chain of ghosts."""
    h = w = size
    y, x = _grid(h, w)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    color = rng.uniform(0.6, 1.0, size=3)
    r = np.hypot(y - cy, x - cx)
    if kind == "scattering":
        sigma = rng.uniform(0.08, 0.2) * size
        glow = np.exp(-(r**2) / (2 * sigma**2))
        theta = np.arctan2(y - cy, x - cx)
        n_streaks = int(rng.integers(4, 9))
        phase = rng.uniform(0, 2 * np.pi)
        streaks = np.abs(np.cos(n_streaks * (theta + phase) / 2)) ** 40 * np.exp(-r / (0.35 * size))
        inten = glow * rng.uniform(0.5, 0.9) + 0.5 * streaks
    elif kind == "reflective":
        inten = np.zeros((h, w))
        dy, dx = rng.normal(size=2)
        norm = math.hypot(dy, dx) or 1.0
        for k in range(int(rng.integers(3, 6))):
            t = (k + 1) * rng.uniform(0.08, 0.18) * size
            gy, gx = cy + t * dy / norm, cx + t * dx / norm
            rad = rng.uniform(0.03, 0.09) * size
            rr = np.hypot(y - gy, x - gx)
            inten += rng.uniform(0.2, 0.5) / (1 + np.exp((rr - rad) / 1.5))
        inten += 0.6 * np.exp(-(r**2) / (2 * (0.05 * size) ** 2))
    else:
        raise ValueError(f"unknown flare kind {kind!r}")
    img = np.clip(inten[..., None] * color[None, None, :], 0.0, 1.0)
    return FlareAsset(img, kind)


def make_base(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    """Procedural dark scene: night-sky gradient, block buildings, lit windows."""
    h = w = size
    y, x = _grid(h, w)
    top, bottom = rng.uniform(0.0, 0.08, size=3), rng.uniform(0.05, 0.25, size=3)
    img = top + (bottom - top) * (y / (h - 1))[..., None]
    for _ in range(int(rng.integers(3, 7))):
        x0 = int(rng.integers(0, w - 8))
        bw = int(rng.integers(8, max(9, w // 3)))
        y0 = int(rng.integers(h // 4, h - 8))
        shade = rng.uniform(0.05, 0.35, size=3)
        img[y0:, x0:x0 + bw] = shade
        for _ in range(int(rng.integers(2, 8))):
            wy = int(rng.integers(y0, h - 2))
            wx = int(rng.integers(x0, min(w - 2, x0 + bw - 1) + 1))
            img[wy:wy + 2, wx:wx + 2] = rng.uniform(0.4, 0.8, size=3)
    img += rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def write_procedural_assets(root, n_bases=4, n_flares=4, size=128, seed=0) -> Path:
    """Populate ``root/bases`` and ``root/flares/{scattering,reflective}``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "bases").mkdir(parents=True, exist_ok=True)
    for kind in FLARE_KINDS:
        (root / "flares" / kind).mkdir(parents=True, exist_ok=True)
    for i in range(n_bases):
        write_png(root / "bases" / f"base_{i:04d}.png", make_base(rng, size))
    for i in range(n_flares):
        kind = FLARE_KINDS[i % 2]
        write_png(root / "flares" / kind / f"flare_{i:04d}.png", make_flare(rng, size, kind).image)
    return root


# ---------------------------------------------------------------------------
# dataset iteration


@dataclass
class DataConfig:
    patch: int = 128
    epoch_length: int | None = None  # defaults to n_bases * n_flares
    augment: bool = True
    workers: int = 1


@dataclass
class Sample:
    corrupted: np.ndarray
    gt: np.ndarray
    gamma: float
    base: str
    flare: str
    augment: AugmentParams


def load_flares(flare_dir) -> list[tuple[Path, str]]:
    flare_dir = Path(flare_dir)
    found = [(p, kind) for kind in FLARE_KINDS for p in list_images(flare_dir / kind)]
    found += [(p, "scattering") for p in list_images(flare_dir)]
    return found


def _crop_or_resize(img, patch, rng):
    h, w = img.shape[:2]
    if h >= patch and w >= patch:
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        return img[y0:y0 + patch, x0:x0 + patch]
    return resize(img, patch, patch)


def dataset_iter(base_dir, flare_dir, cfg: DataConfig | None = None, seed: int = 0) -> Iterator[Sample]:
    """Deterministic stream of synthetic pairs.

    Every sample draws from its own generator seeded with ``(seed, index)``,
    so prefetching with several workers cannot change the delivered order.
    """
    cfg = cfg or DataConfig()
    base_paths = list_images(base_dir)
    flare_paths = load_flares(flare_dir)
    if not base_paths:
        raise ConfigError(f"no base images found in {base_dir}")
    if not flare_paths:
        raise ConfigError(f"no flare images found in {flare_dir}")
    bases = [read_image(p) for p in base_paths]
    flares = [FlareAsset(read_image(p), kind) for p, kind in flare_paths]
    n = cfg.epoch_length if cfg.epoch_length is not None else len(bases) * len(flares)
    if n < 0:
        raise ConfigError(f"epoch_length must be >= 0, got {n}")

    def make(i):
        rng = np.random.default_rng([seed, i])
        bi = int(rng.integers(len(bases)))
        fi = int(rng.integers(len(flares)))
        base = _crop_or_resize(bases[bi], cfg.patch, rng)
        flare = flares[fi]
        flare = FlareAsset(resize(flare.image, cfg.patch, cfg.patch), flare.kind)
        ap = AugmentParams.sample(rng, cfg.patch, cfg.patch) if cfg.augment else AugmentParams()
        ap.seed = seed
        flare = augment_flare(flare, ap)
        gamma = draw_gamma(rng)
        corrupted, gt = synthesize_pair(base, flare, gamma)
        return Sample(corrupted, gt, gamma, base_paths[bi].name, flare_paths[fi][0].name, ap)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            yield from pool.map(make, range(n))
    else:
        for i in range(n):
            yield make(i)
