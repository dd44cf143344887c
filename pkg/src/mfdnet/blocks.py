"""Neural building blocks shared by the low-frequency and fusion modules.

Each block is available as a plain function (taking explicit weight tensors)
and as an ``nn.Module`` that owns those weights. The functions are the single
implementation; modules only hold parameters and forward to them.

Every residual block zero-initializes its final projection so that it starts
out as an exact identity map.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# functional ops


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the channel axis at every spatial position."""
    c = x.shape[1]
    if gamma.numel() != c or beta.numel() != c:
        raise ShapeError(f"layer_norm: gamma/beta length {gamma.numel()}/{beta.numel()} != C={c}")
    mu = x.mean(dim=1, keepdim=True)
    var = (x - mu).pow(2).mean(dim=1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    return y * gamma.view(1, c, 1, 1) + beta.view(1, c, 1, 1)


def gate(z):
    c = z.shape[1]
    if c % 2:
        raise ShapeError(f"gate needs an even channel count, got {c}")
    a, b = z.chunk(2, dim=1)
    return a * b


def channel_attention(x, weight, bias):
    """``x * (W @ avgpool(x) + b)`` per channel; no squashing."""
    c = x.shape[1]
    if weight.shape != (c, c) or bias.shape != (c,):
        raise ShapeError(f"channel_attention: expected W {(c, c)} and b {(c,)}, got "
                         f"{tuple(weight.shape)} and {tuple(bias.shape)}")
    pooled = x.mean(dim=(2, 3))
    s = F.linear(pooled, weight, bias)
    return x * s[:, :, None, None]


def _axis_attention(x, qkv_w, qkv_b, out_w, out_b, heads, axis):
    # axis=2 attends among H positions of every column, axis=3 among W positions of every row
    n, c, h, w = x.shape
    d = c // heads
    qkv = F.conv2d(x, qkv_w, qkv_b)
    q, k, v = qkv.chunk(3, dim=1)

    def split(t):
        t = t.view(n, heads, d, h, w)
        if axis == 2:
            return t.permute(0, 1, 4, 3, 2)  # n, heads, w, h, d
        return t.permute(0, 1, 3, 4, 2)  # n, heads, h, w, d

    q, k, v = split(q), split(k), split(v)
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    o = attn @ v
    if axis == 2:
        o = o.permute(0, 1, 4, 3, 2)
    else:
        o = o.permute(0, 1, 4, 2, 3)
    o = o.reshape(n, c, h, w)
    return F.conv2d(o, out_w, out_b)


def axis_self_attention(x, p, heads=2):
    """Height-axis attention followed by width-axis attention.

    ``p`` maps ``h_qkv_w, h_qkv_b, h_out_w, h_out_b`` and the matching ``w_*``
    keys to 1x1 convolution weights.
    """
    c = x.shape[1]
    if heads < 1 or c % heads:
        raise ConfigError(f"channels ({c}) must be divisible by heads ({heads})")
    y = _axis_attention(x, p["h_qkv_w"], p["h_qkv_b"], p["h_out_w"], p["h_out_b"], heads, axis=2)
    return _axis_attention(y, p["w_qkv_w"], p["w_qkv_b"], p["w_out_w"], p["w_out_b"], heads, axis=3)


def gelu(x):
    return F.gelu(x, approximate="none")


def gffn(x, p):
    a = F.conv2d(x, p["a_w"], p["a_b"])
    b = F.conv2d(x, p["b_w"], p["b_b"])
    mixed = gelu(a) * b + gelu(b) * a
    return F.conv2d(mixed, p["out_w"], p["out_b"])


def fab(x, p):
    """Squeeze-and-excitation re-weighting, then a 1x1 conv to the output width."""
    pooled = x.mean(dim=(2, 3))
    hidden = F.relu(F.linear(pooled, p["fc1_w"], p["fc1_b"]))
    s = torch.sigmoid(F.linear(hidden, p["fc2_w"], p["fc2_b"]))
    return F.conv2d(x * s[:, :, None, None], p["conv_w"], p["conv_b"])


SPP_GRIDS = (1, 2, 4)


def spp(x, fuse_w, fuse_b, grids=SPP_GRIDS):
    h, w = x.shape[-2:]
    if h < 8 or w < 8:
        raise ShapeError(f"spp needs spatial dims >= 8, got {h}x{w}")
    feats = [x]
    for g in grids:
        pooled = F.adaptive_avg_pool2d(x, g)
        feats.append(F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=False))
    return F.conv2d(torch.cat(feats, dim=1), fuse_w, fuse_b)


# ---------------------------------------------------------------------------
# MAC accounting helpers (one MAC = one multiply + one add)


def conv_macs(c_in, c_out, k, h_out, w_out, groups=1):
    return c_out * (c_in // groups) * k * k * h_out * w_out


def interp_macs(c, h_out, w_out):
    return 4 * c * h_out * w_out


def add_macs(total, other):
    for key, v in other.items():
        total[key] = total.get(key, 0) + v
    return total


# ---------------------------------------------------------------------------
# modules


def _conv_param(c_out, c_in, k, zero=False):
    w = torch.empty(c_out, c_in, k, k)
    b = torch.zeros(c_out)
    if zero:
        nn.init.zeros_(w)
    else:
        nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(c_in * k * k)
        nn.init.uniform_(b, -bound, bound)
    return nn.Parameter(w), nn.Parameter(b)


class Conv(nn.Module):
    """Thin conv wrapper that knows its own MAC cost."""

    def __init__(self, c_in, c_out, k=1, stride=1, dilation=1, groups=1, zero=False):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.weight, self.bias = _conv_param(c_out, c_in // groups, k, zero=zero)

    def forward(self, x):
        pad = self.dilation * (self.k - 1) // 2
        return F.conv2d(x, self.weight, self.bias, self.stride, pad, self.dilation, self.groups)

    def out_size(self, h, w):
        return h // self.stride, w // self.stride

    def macs(self, h, w):
        ho, wo = self.out_size(h, w)
        return {"conv": conv_macs(self.c_in, self.c_out, self.k, ho, wo, self.groups)}


class LayerNorm2d(nn.Module):
    def __init__(self, c, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(c))
        self.beta = nn.Parameter(torch.zeros(c))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class AxisSelfAttention(nn.Module):
    def __init__(self, c, heads=2, zero_out=True):
        super().__init__()
        if heads < 1 or c % heads:
            raise ConfigError(f"channels ({c}) must be divisible by heads ({heads})")
        self.c, self.heads = c, heads
        self.h_qkv = Conv(c, 3 * c)
        self.h_out = Conv(c, c)
        self.w_qkv = Conv(c, 3 * c)
        self.w_out = Conv(c, c, zero=zero_out)

    def params(self):
        return {
            "h_qkv_w": self.h_qkv.weight, "h_qkv_b": self.h_qkv.bias,
            "h_out_w": self.h_out.weight, "h_out_b": self.h_out.bias,
            "w_qkv_w": self.w_qkv.weight, "w_qkv_b": self.w_qkv.bias,
            "w_out_w": self.w_out.weight, "w_out_b": self.w_out.bias,
        }

    def forward(self, x):
        return axis_self_attention(x, self.params(), self.heads)

    def macs(self, h, w):
        total = {}
        for conv in (self.h_qkv, self.h_out, self.w_qkv, self.w_out):
            add_macs(total, conv.macs(h, w))
        # scores plus weighted sum, per axis: (h*h + w*w) positions pairs per column/row
        total["attention"] = 2 * self.c * h * w * (h + w)
        return total


class GFFN(nn.Module):
    def __init__(self, c, expansion=2, zero_out=True):
        super().__init__()
        if expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {expansion}")
        e = expansion * c
        self.a = Conv(c, e)
        self.b = Conv(c, e)
        self.out = Conv(e, c, zero=zero_out)

    def params(self):
        return {"a_w": self.a.weight, "a_b": self.a.bias, "b_w": self.b.weight,
                "b_b": self.b.bias, "out_w": self.out.weight, "out_b": self.out.bias}

    def forward(self, x):
        return gffn(x, self.params())

    def macs(self, h, w):
        total = {}
        for conv in (self.a, self.b, self.out):
            add_macs(total, conv.macs(h, w))
        return total


class TransformerBlock(nn.Module):
    """LN -> axis attention -> residual, LN -> gated FFN -> residual."""

    def __init__(self, c, heads=2, expansion=2):
        super().__init__()
        self.norm1 = LayerNorm2d(c)
        self.attn = AxisSelfAttention(c, heads)
        self.norm2 = LayerNorm2d(c)
        self.ffn = GFFN(c, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))

    def macs(self, h, w):
        return add_macs(self.attn.macs(h, w), self.ffn.macs(h, w))


class ChannelAttention(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c, c))
        self.bias = nn.Parameter(torch.zeros(c))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(c)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return channel_attention(x, self.weight, self.bias)

    def macs(self, h, w):
        c = self.weight.shape[0]
        return {"linear": c * c}


class ConvBlock(nn.Module):
    """Gated convolution block with channel attention (two residual halves)."""

    def __init__(self, c):
        super().__init__()
        self.norm1 = LayerNorm2d(c)
        self.expand1 = Conv(c, 2 * c)
        self.dw = Conv(2 * c, 2 * c, k=3, groups=2 * c)
        self.ca = ChannelAttention(c)
        self.proj1 = Conv(c, c, zero=True)
        self.norm2 = LayerNorm2d(c)
        self.expand2 = Conv(c, 2 * c)
        self.proj2 = Conv(c, c, zero=True)

    def forward(self, x):
        y = x + self.proj1(self.ca(gate(self.dw(self.expand1(self.norm1(x))))))
        return y + self.proj2(gate(self.expand2(self.norm2(y))))

    def macs(self, h, w):
        total = {}
        for m in (self.expand1, self.dw, self.ca, self.proj1, self.expand2, self.proj2):
            add_macs(total, m.macs(h, w))
        return total


class FAB(nn.Module):
    """Feature aggregation: SE re-weighting plus a channel-squeezing 1x1 conv.

    The excitation's output layer starts at zero so the initial scale is
    exactly 0.5; ``identity_channels`` sets the squeeze conv to ``2 * I`` on
    the first channels, making the block an exact pass-through at init.
    """

    def __init__(self, c_in, c_out, reduction=4, identity_channels=0):
        super().__init__()
        hidden = max(1, c_in // reduction)
        self.fc1_w = nn.Parameter(torch.empty(hidden, c_in))
        self.fc1_b = nn.Parameter(torch.zeros(hidden))
        nn.init.kaiming_uniform_(self.fc1_w, a=math.sqrt(5))
        nn.init.uniform_(self.fc1_b, 0.0, 1.0 / math.sqrt(c_in))
        self.fc2_w = nn.Parameter(torch.zeros(c_in, hidden))
        self.fc2_b = nn.Parameter(torch.zeros(c_in))
        self.conv = Conv(c_in, c_out)
        if identity_channels:
            with torch.no_grad():
                self.conv.weight.zero_()
                self.conv.bias.zero_()
                for i in range(identity_channels):
                    self.conv.weight[i, i] = 2.0

    def params(self):
        return {"fc1_w": self.fc1_w, "fc1_b": self.fc1_b, "fc2_w": self.fc2_w,
                "fc2_b": self.fc2_b, "conv_w": self.conv.weight, "conv_b": self.conv.bias}

    def forward(self, x):
        return fab(x, self.params())

    def macs(self, h, w):
        hidden, c_in = self.fc1_w.shape
        return {"linear": 2 * hidden * c_in, **self.conv.macs(h, w)}


class SPP(nn.Module):
    """Multi-grid average pooling fused back to the input width.

    Initialized so the fusion conv is the identity on the input slice.
    """

    def __init__(self, c, grids=SPP_GRIDS):
        super().__init__()
        self.c, self.grids = c, tuple(grids)
        self.fuse = Conv(c * (1 + len(self.grids)), c, zero=True)
        with torch.no_grad():
            for i in range(c):
                self.fuse.weight[i, i] = 1.0

    def forward(self, x):
        return spp(x, self.fuse.weight, self.fuse.bias, self.grids)

    def macs(self, h, w):
        return {"interp": sum(interp_macs(self.c, h, w) for _ in self.grids), **self.fuse.macs(h, w)}
