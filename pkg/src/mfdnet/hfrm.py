"""Hierarchical fusion of the deflared residual with the high-frequency bands.

Levels are processed coarsest first. At the coarsest band the mask network
sees ``[up(I_n), up(I_n_hat), band]``; at every finer band the upsampled
previous mask takes the ``I_n`` slot. Each band is modulated as
``band * mask + band``, lifted by a dilated conv, and squeezed back to three
channels by a feature aggregation block. The finest level additionally goes
through spatial pyramid pooling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import FAB, SPP, Conv, ConfigError, ShapeError, add_macs, interp_macs
from .pyramid import Pyramid, upsample2x


@dataclass
class HfrmConfig:
    mask_hidden: int = 16
    fuse_width: int = 16
    dilation: int = 2
    fab_reduction: int = 4

    def validate(self):
        if self.mask_hidden < 1 or self.fab_reduction < 1 or self.dilation < 1:
            raise ConfigError("hfrm.mask_hidden, hfrm.fab_reduction and hfrm.dilation must be >= 1")
        if self.fuse_width < 3:
            raise ConfigError(f"hfrm.fuse_width must be >= 3, got {self.fuse_width}")
        return self

    def to_dict(self):
        return asdict(self)


def compute_mask(prior, deflared_low, band, p):
    """Mask in [-1, 1] from three band-sized 3-channel inputs.

    ``p`` holds ``conv1_w/b`` (3x3, 9 -> hidden) and ``conv2_w/b`` (3x3, hidden -> 3).
    """
    if not (prior.shape == deflared_low.shape == band.shape):
        raise ShapeError(f"compute_mask inputs differ in shape: {tuple(prior.shape)}, "
                         f"{tuple(deflared_low.shape)}, {tuple(band.shape)}")
    x = torch.cat([prior, deflared_low, band], dim=1)
    x = F.leaky_relu(F.conv2d(x, p["conv1_w"], p["conv1_b"], padding=1), 0.2)
    return torch.tanh(F.conv2d(x, p["conv2_w"], p["conv2_b"], padding=1))


def modulate(band, mask):
    if band.shape != mask.shape:
        raise ShapeError(f"band {tuple(band.shape)} and mask {tuple(mask.shape)} differ")
    return band * mask + band


class MaskNet(nn.Module):
    def __init__(self, hidden=16):
        super().__init__()
        self.conv1 = Conv(9, hidden, k=3)
        self.conv2 = Conv(hidden, 3, k=3, zero=True)

    def params(self):
        return {"conv1_w": self.conv1.weight, "conv1_b": self.conv1.bias,
                "conv2_w": self.conv2.weight, "conv2_b": self.conv2.bias}

    def forward(self, prior, deflared_low, band):
        return compute_mask(prior, deflared_low, band, self.params())

    def macs(self, h, w):
        return add_macs(self.conv1.macs(h, w), self.conv2.macs(h, w))


class FusionLevel(nn.Module):
    def __init__(self, cfg: HfrmConfig):
        super().__init__()
        self.mask_net = MaskNet(cfg.mask_hidden)
        self.lift = Conv(3, cfg.fuse_width, k=3, dilation=cfg.dilation)
        with torch.no_grad():
            # first three lifted channels start as a copy of the modulated band
            self.lift.weight[:3].zero_()
            self.lift.bias[:3].zero_()
            for i in range(3):
                self.lift.weight[i, i, 1, 1] = 1.0
        self.fab = FAB(cfg.fuse_width, 3, cfg.fab_reduction, identity_channels=3)

    def fuse(self, band, mask):
        return self.fab(self.lift(modulate(band, mask)))

    def macs(self, h, w):
        total = add_macs(self.mask_net.macs(h, w), self.lift.macs(h, w))
        return add_macs(total, self.fab.macs(h, w))


def fuse_level(band, mask, level: FusionLevel):
    return level.fuse(band, mask)


class HFRM(nn.Module):
    def __init__(self, depth=3, cfg: HfrmConfig | None = None):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"pyramid depth must be >= 1, got {depth}")
        self.cfg = (cfg or HfrmConfig()).validate()
        self.depth = depth
        # levels[k] fuses band k (0 = finest)
        self.levels = nn.ModuleList(FusionLevel(self.cfg) for _ in range(depth))
        self.spp = SPP(3)

    def forward(self, pyr: Pyramid, deflared_low, return_masks=False):
        if pyr.depth != self.depth:
            raise ShapeError(f"pyramid depth {pyr.depth} != HFRM depth {self.depth}")
        if deflared_low.shape != pyr.residual.shape:
            raise ShapeError(f"deflared residual {tuple(deflared_low.shape)} != residual "
                             f"{tuple(pyr.residual.shape)}")
        fused = [None] * self.depth
        masks = [None] * self.depth
        prior = upsample2x(pyr.residual)
        deflared_up = upsample2x(deflared_low)
        for k in range(self.depth - 1, -1, -1):
            band = pyr.bands[k]
            if k < self.depth - 1:
                prior = upsample2x(masks[k + 1])
                deflared_up = upsample2x(deflared_up)
            level = self.levels[k]
            masks[k] = level.mask_net(prior, deflared_up, band)
            out = level.fuse(band, masks[k])
            if k == 0:
                out = self.spp(out)
            fused[k] = out
        if return_masks:
            return fused, masks
        return fused

    def macs(self, h, w):
        """MACs for a full-resolution input of ``h x w``."""
        total = {}
        for k in range(self.depth):
            bh, bw = h >> k, w >> k
            add_macs(total, self.levels[k].macs(bh, bw))
            # two 3-channel upsamplings per level: the prior (image or mask) and the deflared residual
            add_macs(total, {"interp": 2 * interp_macs(3, bh, bw)})
        return add_macs(total, self.spp.macs(h, w))


def hfrm_forward(pyr: Pyramid, deflared_low, module: HFRM):
    return module(pyr, deflared_low)
