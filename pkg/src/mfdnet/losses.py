"""Training objective: MSE + SSIM + perceptual, weighted 1 / 0.3 / 0.7."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_s: float = 0.3
    lambda_p: float = 0.7

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss.{k} must be >= 0, got {v}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(out, gt):
    _same_shape(out, gt, "mse_loss")
    return (out - gt).pow(2).mean()


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64, device=None):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-coords.pow(2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a, b):
    """Per-channel SSIM map over valid 11x11 Gaussian windows."""
    _same_shape(a, b, "ssim")
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    g = gaussian_window(dtype=a.dtype, device=a.device)
    kh = g.view(1, 1, SSIM_WINDOW, 1).expand(c, 1, SSIM_WINDOW, 1)
    kw = g.view(1, 1, 1, SSIM_WINDOW).expand(c, 1, 1, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(F.conv2d(x, kh, groups=c), kw, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_value(a, b):
    return ssim_map(a, b).mean()


def ssim_loss(out, gt):
    return 1.0 - ssim_value(out, gt)


class FeatureExtractor(nn.Module):
    """Fixed random-weight stand-in for a pretrained perceptual network.

    Three stride-2 3x3 conv stages (8, 16, 32 channels) with exact GELU.
    Weights come from ``seed`` alone and are never trained.
    """

    def __init__(self, seed=0, channels=(8, 16, 32)):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        c_in = 3
        weights, biases = [], []
        for c_out in channels:
            fan_in = c_in * 9
            weights.append(torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64)
                           * math.sqrt(2.0 / fan_in))
            biases.append(torch.zeros(c_out, dtype=torch.float64))
            c_in = c_out
        for i, (w, b) in enumerate(zip(weights, biases)):
            self.register_buffer(f"w{i}", w)
            self.register_buffer(f"b{i}", b)
        self.n_layers = len(channels)

    def forward(self, x):
        feats = []
        for i in range(self.n_layers):
            w = getattr(self, f"w{i}").to(x.dtype)
            b = getattr(self, f"b{i}").to(x.dtype)
            x = F.gelu(F.conv2d(x, w, b, stride=2, padding=1))
            feats.append(x)
        return feats


def perceptual_loss(out, gt, fx):
    """Sum over layers of the mean squared feature difference."""
    _same_shape(out, gt, "perceptual_loss")
    total = out.new_zeros(())
    for fo, fg in zip(fx(out), fx(gt)):
        total = total + (fo - fg).pow(2).mean()
    return total


def total_loss(out, gt, fx, w: LossWeights | None = None):
    """Return ``(total, {"mse", "ssim", "perceptual"})``."""
    w = w or LossWeights()
    terms = {
        "mse": mse_loss(out, gt),
        "ssim": ssim_loss(out, gt),
        "perceptual": perceptual_loss(out, gt, fx),
    }
    total = w.lambda_m * terms["mse"] + w.lambda_s * terms["ssim"] + w.lambda_p * terms["perceptual"]
    return total, terms
