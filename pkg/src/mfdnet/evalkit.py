"""Quality metrics, analytic complexity accounting, and timing."""

from __future__ import annotations

import math
import resource
import statistics
import sys
import time
from dataclasses import dataclass, field

import torch

from .blocks import add_macs
from .losses import mse_loss, ssim_value
from .model import MFDNet, count_parameters, pad_reflect, padded_size

RESOLUTIONS = {
    "512x512": (512, 512),
    "1024x1024": (1024, 1024),
    "1080p": (1080, 1920),
    "2K": (1440, 2560),
    "4K": (2160, 3840),
}


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; ``inf`` for identical images."""
    mse = float(mse_loss(a, b))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    return float(ssim_value(a, b))


# ---------------------------------------------------------------------------
# MACs


def mac_breakdown(model: MFDNet, h: int, w: int) -> dict:
    """Per-category MACs (conv, linear, interp, attention) at the padded size."""
    ph, pw = padded_size(model, h, w)
    k = model.cfg.depth
    total = model.lffpm.macs(ph >> k, pw >> k)
    add_macs(total, model.hfrm.macs(ph, pw))
    # pyramid, 3 channels per level: one separable 5+5-tap blur, plus one bilinear
    # upsample in decompose and another in reconstruct
    pyr = 0
    for lvl in range(k):
        lh, lw = ph >> lvl, pw >> lvl
        pyr += 3 * 10 * lh * lw + 2 * 4 * 3 * lh * lw
    total["pyramid"] = pyr
    return total


LAYER_CATEGORIES = ("conv", "linear", "interp", "pyramid")


def count_macs(model: MFDNet, h: int, w: int) -> int:
    """Analytic MAC count of one forward pass on an ``h x w`` image.

    Counts every layer with weights (conv, linear) plus interpolation and the
    pyramid filters. The activation-by-activation products inside axis
    attention are reported separately by ``mac_breakdown``.
    """
    b = mac_breakdown(model, h, w)
    return sum(b[c] for c in LAYER_CATEGORIES if c in b)


def count_params(model: MFDNet) -> int:
    return count_parameters(model)


# ---------------------------------------------------------------------------
# timing


@dataclass
class MetricsReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    names: list = field(default_factory=list)
    macs: dict = field(default_factory=dict)
    attention_macs: dict = field(default_factory=dict)
    params: int | None = None
    wall_time_s: dict = field(default_factory=dict)
    peak_memory_mb: float | None = None

    @property
    def mean_psnr(self):
        return statistics.fmean(self.psnr) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return statistics.fmean(self.ssim) if self.ssim else float("nan")

    def table(self) -> str:
        lines = []
        if self.names:
            lines.append(f"{'image':<24} {'psnr_db':>10} {'ssim':>8}")
            for n, p, s in zip(self.names, self.psnr, self.ssim):
                lines.append(f"{n:<24} {p:>10.4f} {s:>8.5f}")
            lines.append(f"{'mean':<24} {self.mean_psnr:>10.4f} {self.mean_ssim:>8.5f}")
        if self.macs:
            lines.append(f"{'resolution':<12} {'GMACs':>10} {'attn GMACs':>11} {'Params(M)':>10} {'Time(s)':>10}")
            for res, m in self.macs.items():
                t = self.wall_time_s.get(res)
                a = self.attention_macs.get(res, 0)
                lines.append(f"{res:<12} {m / 1e9:>10.4f} {a / 1e9:>11.4f} {self.params / 1e6:>10.4f} "
                             f"{'' if t is None else f'{t:.4f}':>10}")
        if self.peak_memory_mb is not None:
            lines.append(f"peak_memory_mb {self.peak_memory_mb:.1f}")
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        out = []
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            out.append(f"image.{n}.psnr = {p!r}")
            out.append(f"image.{n}.ssim = {s!r}")
        if self.names:
            out.append(f"mean.psnr = {self.mean_psnr!r}")
            out.append(f"mean.ssim = {self.mean_ssim!r}")
        if self.params is not None:
            out.append(f"params = {self.params}")
        for res, m in self.macs.items():
            out.append(f"macs.{res} = {m}")
        for res, m in self.attention_macs.items():
            out.append(f"attention_macs.{res} = {m}")
        for res, t in self.wall_time_s.items():
            out.append(f"time_s.{res} = {t!r}")
        if self.peak_memory_mb is not None:
            out.append(f"peak_memory_mb = {self.peak_memory_mb!r}")
        return "\n".join(out) + "\n"


def _peak_memory_mb():
    try:
        rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, OSError):
        return None
    # bytes on macOS, kilobytes on Linux
    return rss / (1024 * 1024) if sys.platform == "darwin" else rss / 1024


def bench_inference(model: MFDNet, resolutions, repeats=3, seed=0) -> MetricsReport:
    """Median wall-clock of ``model`` per resolution, after one warm-up run."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    resolutions = {f"{h}x{w}": (h, w) for h, w in resolutions} if not isinstance(resolutions, dict) else resolutions
    report = MetricsReport(params=count_params(model))
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            for name, (h, w) in resolutions.items():
                ph, pw = padded_size(model, h, w)
                x = torch.rand(1, 3, h, w, generator=gen, dtype=dtype)
                report.wall_time_s[name] = time_callable(
                    lambda: model(pad_reflect(x, ph, pw))[..., :h, :w], repeats)
                b = mac_breakdown(model, h, w)
                report.macs[name] = count_macs(model, h, w)
                report.attention_macs[name] = b.get("attention", 0)
    finally:
        torch.set_num_threads(prev_threads)
    report.peak_memory_mb = _peak_memory_mb()
    return report


def dense_attention(x):
    """Global single-head self-attention over all ``H*W`` positions (timing reference)."""
    n, c, h, w = x.shape
    t = x.flatten(2).transpose(1, 2)
    attn = torch.softmax(t @ t.transpose(1, 2) / math.sqrt(c), dim=-1)
    return (attn @ t).transpose(1, 2).reshape(n, c, h, w)


def time_callable(fn, repeats=3):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)
