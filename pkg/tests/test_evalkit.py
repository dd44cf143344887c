import math

import pytest
import torch
from torch.utils.flop_counter import FlopCounterMode

from mfdnet.blocks import Conv
from mfdnet.evalkit import (RESOLUTIONS, MetricsReport, bench_inference, count_macs, count_params, dense_attention,
                            mac_breakdown, psnr, ssim, time_callable)
from mfdnet.hfrm import HfrmConfig
from mfdnet.lffpm import LffpmConfig
from mfdnet.losses import SSIM_C1, mse_loss, ssim_loss
from mfdnet.model import ModelConfig, build_model
from mfdnet.pyramid import DimensionError

D = torch.float64


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


@pytest.fixture(scope="module")
def model():
    return build_model()


# metrics


def test_psnr_closed_form_and_inf():
    gt = torch.full((1, 3, 8, 8), 0.5, dtype=D)
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)
    assert psnr(gt, gt) == math.inf


def test_psnr_matches_mse_oracle():
    a, b = rand(1, 3, 16, 16, seed=1), rand(1, 3, 16, 16, seed=2)
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse_loss(a, b).item()), abs=1e-12)


def test_ssim_cases():
    a, b = rand(1, 3, 16, 16, seed=3), rand(1, 3, 16, 16, seed=4)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert ssim(a, b) == pytest.approx(1 - ssim_loss(a, b).item(), abs=1e-15)
    assert -1 <= ssim(a, b) <= 1
    c5, c6 = torch.full((1, 3, 12, 12), 0.5, dtype=D), torch.full((1, 3, 12, 12), 0.6, dtype=D)
    assert ssim(c5, c6) == pytest.approx((2 * 0.3 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1), abs=1e-9)


# MACs


def test_single_conv_macs():
    conv = Conv(1, 1, k=3)
    assert conv.macs(4, 4) == {"conv": 144}
    with FlopCounterMode(display=False) as fc:
        conv(torch.zeros(1, 1, 4, 4))
    assert fc.get_total_flops() == 2 * 144


def test_scaling_law(model):
    base = count_macs(model, 512, 512)
    assert count_macs(model, 1024, 1024) / base == pytest.approx(4.00, rel=0.01)
    assert count_macs(model, 1080, 1920) / base == pytest.approx(7.91, rel=0.02)
    assert count_macs(model, 1920, 1080) / base == pytest.approx(7.91, rel=0.02)


def test_macs_linear_in_pixels(model):
    for k in (2, 4, 16):
        ratio = count_macs(model, 128 * k, 128) / count_macs(model, 128, 128)
        assert ratio == pytest.approx(k, rel=0.02)


def test_breakdown_matches_flop_counter(model):
    h, w = 128, 192
    x = torch.rand(1, 3, h, w)
    with FlopCounterMode(display=False) as fc, torch.no_grad():
        model(x)
    counts = fc.get_flop_counts()
    b = mac_breakdown(model, h, w)

    def conv_macs(key):
        return sum(v for op, v in counts[key].items() if "convolution" in str(op)) // 2

    assert conv_macs("MFDNet.lffpm") + conv_macs("MFDNet.hfrm") == b["conv"]
    glob = {str(op): v for op, v in counts["Global"].items()}
    assert glob["aten.bmm"] // 2 == b["attention"]
    assert glob["aten.addmm"] // 2 == b["linear"]
    # pyramid blurs: the analytic count ignores the reflect-padded border rows
    blur = conv_macs("Global") - b["conv"]
    assert blur == pytest.approx(3 * 10 * sum((h >> k) * (w >> k) for k in range(3)), rel=0.03)


def test_count_macs_excludes_attention(model):
    b = mac_breakdown(model, 512, 512)
    assert count_macs(model, 512, 512) == b["conv"] + b["linear"] + b["interp"] + b["pyramid"]
    assert b["attention"] > 0


def test_order_of_magnitude_vs_reference(model):
    # the default config is sized for CPU work: about one GMAC at 512^2
    g = count_macs(model, 512, 512) / 1e9
    assert 0.5 < g < 2.0


def test_invalid_dims(model):
    with pytest.raises(DimensionError):
        count_macs(model, 20, 512)


# params


def test_params_resolution_invariant(model):
    n = count_params(model)
    for h, w in RESOLUTIONS.values():
        count_macs(model, h, w)
        assert count_params(model) == n


def _conv(ci, co, k=1):
    return co * ci * k * k + co


def test_params_minimal_config_enumeration():
    cfg = ModelConfig(depth=1, lffpm=LffpmConfig(base_width=2, n_fetb=1, n_frtb=1, unet_depth=1, heads=1,
                                                  ffn_expansion=1),
                      hfrm=HfrmConfig(mask_hidden=1, fuse_width=3, fab_reduction=4))
    c = 2
    tb = 2 * 2 * c + 2 * (_conv(c, 3 * c) + _conv(c, c)) + 2 * _conv(c, c) + _conv(c, c)

    def cb(c):
        dw = 2 * c * 9 + 2 * c
        return 4 * c + 2 * _conv(c, 2 * c) + dw + (c * c + c) + 2 * _conv(c, c)

    lffpm = (_conv(3, c, 3) + tb + _conv(c, c) + cb(c) + _conv(c, 2 * c, 3) + cb(2 * c) + _conv(2 * c, 4 * c)
             + cb(c) + 2 * c + tb + _conv(c, 3, 3))
    hidden = 1
    level = _conv(9, 1, 3) + _conv(1, 3, 3) + _conv(3, 3, 3) + (hidden * 3 + hidden) + (3 * hidden + 3) + _conv(3, 3)
    spp = _conv(12, 3)
    assert count_params(build_model(cfg)) == lffpm + level + spp


def test_params_monotone_in_width():
    counts = [count_params(build_model(ModelConfig(lffpm=LffpmConfig(base_width=w)))) for w in (8, 16, 32)]
    assert counts == sorted(counts) and len(set(counts)) == 3


# timing


def test_bench_contract():
    m = build_model()
    report = bench_inference(m, {"128x128": (128, 128)}, repeats=3)
    assert list(report.wall_time_s) == ["128x128"]
    assert report.wall_time_s["128x128"] > 0
    assert report.macs["128x128"] == count_macs(m, 128, 128)
    assert report.params == count_params(m)
    assert "128x128" in report.table() and "macs.128x128" in report.key_values()
    with pytest.raises(ValueError):
        bench_inference(m, {"128x128": (128, 128)}, repeats=2)
    with pytest.raises(DimensionError):
        bench_inference(m, {"tiny": (16, 16)}, repeats=3)


@pytest.mark.slow
def test_bench_monotone_in_resolution():
    m = build_model()
    r = bench_inference(m, {"512x512": (512, 512), "1024x1024": (1024, 1024)}, repeats=3)
    assert r.wall_time_s["1024x1024"] >= r.wall_time_s["512x512"]


def test_subquadratic_vs_dense_attention():
    m = build_model()
    with torch.no_grad():
        small, big = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 128, 128)
        t_model = time_callable(lambda: m(big), 3) / time_callable(lambda: m(small), 3)
        f_small, f_big = torch.rand(1, 16, 32, 32), torch.rand(1, 16, 64, 64)
        t_dense = time_callable(lambda: dense_attention(f_big), 3) / time_callable(lambda: dense_attention(f_small), 3)
    # 4x the pixels: the network stays near 4x, global attention approaches 16x
    assert t_model < t_dense
    assert t_model < 8


def test_dense_attention_reference_is_global():
    x = rand(1, 4, 3, 3)
    y = dense_attention(x)
    t = x.flatten(2)[0].T
    a = torch.softmax(t @ t.T / 2.0, dim=-1)
    torch.testing.assert_close(y.flatten(2)[0].T, a @ t, rtol=0, atol=1e-14)


def test_report_formatting():
    r = MetricsReport(psnr=[20.0, math.inf], ssim=[0.9, 1.0], names=["a.png", "b.png"])
    assert r.mean_psnr == math.inf
    assert "mean" in r.table()
    kv = r.key_values()
    assert "image.a.png.psnr = 20.0" in kv and "mean.ssim = 0.95" in kv
