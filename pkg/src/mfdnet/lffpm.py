"""Low-frequency flare perception: deflares the pyramid residual."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import Conv, ConvBlock, ConfigError, ShapeError, TransformerBlock, add_macs


@dataclass
class LffpmConfig:
    base_width: int = 16
    n_fetb: int = 2
    n_frtb: int = 2
    unet_depth: int = 3
    enc_blocks: int = 1
    dec_blocks: int = 1
    heads: int = 2
    ffn_expansion: int = 2

    def validate(self):
        for name in ("base_width", "n_fetb", "n_frtb", "unet_depth", "enc_blocks", "dec_blocks",
                     "heads", "ffn_expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"lffpm.{name} must be >= 1, got {getattr(self, name)}")
        if self.base_width % 2:
            raise ConfigError(f"lffpm.base_width must be even, got {self.base_width}")
        if self.base_width % self.heads:
            raise ConfigError(f"lffpm.base_width ({self.base_width}) must be divisible by heads ({self.heads})")
        return self

    def to_dict(self):
        return asdict(self)


class Upsample(nn.Module):
    """1x1 conv to ``2 * c_in`` channels then a 2x pixel shuffle (width halves)."""

    def __init__(self, c_in):
        super().__init__()
        self.conv = Conv(c_in, 2 * c_in)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), 2)

    def macs(self, h, w):
        return self.conv.macs(h, w)


class LFFPM(nn.Module):
    def __init__(self, cfg: LffpmConfig | None = None):
        super().__init__()
        self.cfg = cfg = (cfg or LffpmConfig()).validate()
        c = cfg.base_width
        self.embed = Conv(3, c, k=3)
        self.fetbs = nn.ModuleList(TransformerBlock(c, cfg.heads, cfg.ffn_expansion) for _ in range(cfg.n_fetb))
        self.concat_fuse = Conv(cfg.n_fetb * c, c)

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        width = c
        for _ in range(cfg.unet_depth):
            self.encoders.append(nn.Sequential(*[ConvBlock(width) for _ in range(cfg.enc_blocks)]))
            self.downs.append(Conv(width, 2 * width, k=3, stride=2))
            width *= 2
        self.middle = nn.Sequential(*[ConvBlock(width) for _ in range(cfg.enc_blocks)])
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for _ in range(cfg.unet_depth):
            self.ups.append(Upsample(width))
            width //= 2
            self.decoders.append(nn.Sequential(*[ConvBlock(width) for _ in range(cfg.dec_blocks)]))

        # weighted sum of the global (transformer) and local (U-shape) paths
        self.alpha = nn.Parameter(torch.zeros(c))
        self.beta = nn.Parameter(torch.ones(c))
        self.frtbs = nn.ModuleList(TransformerBlock(c, cfg.heads, cfg.ffn_expansion) for _ in range(cfg.n_frtb))
        self.head = Conv(c, 3, k=3, zero=True)

    @property
    def divisor(self):
        return 2 ** self.cfg.unet_depth

    def forward(self, low):
        if low.dim() != 4 or low.shape[1] != 3:
            raise ShapeError(f"LFFPM expects an (N, 3, H, W) input, got {tuple(low.shape)}")
        h, w = low.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"LFFPM input {h}x{w} must be divisible by {self.divisor}")
        x = self.embed(low)
        global_feats = []
        for blk in self.fetbs:
            x = blk(x)
            global_feats.append(x)
        fused_global = self.concat_fuse(torch.cat(global_feats, dim=1))

        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.middle(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(up(x) + skip)

        c = self.cfg.base_width
        g = self.alpha.view(1, c, 1, 1) * fused_global + self.beta.view(1, c, 1, 1) * x
        for blk in self.frtbs:
            g = blk(g)
        return low + self.head(g)

    def macs(self, h, w):
        total = add_macs({}, self.embed.macs(h, w))
        for blk in self.fetbs:
            add_macs(total, blk.macs(h, w))
        add_macs(total, self.concat_fuse.macs(h, w))
        hh, ww = h, w
        for enc, down in zip(self.encoders, self.downs):
            for blk in enc:
                add_macs(total, blk.macs(hh, ww))
            add_macs(total, down.macs(hh, ww))
            hh, ww = hh // 2, ww // 2
        for blk in self.middle:
            add_macs(total, blk.macs(hh, ww))
        for up, dec in zip(self.ups, self.decoders):
            add_macs(total, up.macs(hh, ww))
            hh, ww = hh * 2, ww * 2
            for blk in dec:
                add_macs(total, blk.macs(hh, ww))
        for blk in self.frtbs:
            add_macs(total, blk.macs(h, w))
        add_macs(total, self.head.macs(h, w))
        return total


def lffpm_forward(low, module: LFFPM):
    return module(low)


def lffpm_param_count(cfg: LffpmConfig) -> int:
    with torch.random.fork_rng():
        return sum(p.numel() for p in LFFPM(cfg).parameters())

