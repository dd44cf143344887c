"""Loop-based float64 reference implementations used as test oracles.

Written against numpy only, independently of the torch code under test.
"""

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, pad=0, dilation=1, groups=1):
    """Zero-padded cross-correlation over (N, C, H, W), by explicit loops."""
    n, c_in, h, wd = x.shape
    c_out, cpg, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    opg = c_out // groups
    for bi in range(n):
        for o in range(c_out):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[bi, g * cpg + ci, i * stride + u * dilation,
                                                          j * stride + v * dilation]
                    out[bi, o, i, j] = acc
    return out


def reflect_index(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def binomial_blur_downsample(x):
    """5-tap binomial blur with reflect padding then stride 2; nested loops."""
    k = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(0, h, 2):
                for j in range(0, w, 2):
                    acc = 0.0
                    for u in range(5):
                        for v in range(5):
                            acc += k[u] * k[v] * x[a, ch, reflect_index(i + u - 2, h), reflect_index(j + v - 2, w)]
                    out[a, ch, i // 2, j // 2] = acc
    return out


def binomial_blur(x):
    """Same blur without the stride (used for mask feathering)."""
    k = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for a in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    out[a, ch, i, j] = sum(k[u] * k[v] * x[a, ch, reflect_index(i + u - 2, h), reflect_index(j + v - 2, w)]
                                           for u in range(5) for v in range(5))
    return out


def bilinear_1d_coords(n_in, n_out):
    """Half-pixel-centre source coordinates, clamped at the borders."""
    scale = n_in / n_out
    res = []
    for o in range(n_out):
        s = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(s)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        res.append((i0, i1, s - i0))
    return res


def bilinear_resize(x, ho, wo):
    n, c, h, w = x.shape
    ys, xs = bilinear_1d_coords(h, ho), bilinear_1d_coords(w, wo)
    out = np.zeros((n, c, ho, wo))
    for i, (y0, y1, fy) in enumerate(ys):
        for j, (x0, x1, fx) in enumerate(xs):
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for a in range(n):
        for i in range(h):
            for j in range(w):
                v = x[a, :, i, j]
                mu = sum(v) / c
                var = sum((t - mu) ** 2 for t in v) / c
                for ch in range(c):
                    out[a, ch, i, j] = (v[ch] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def gate(z):
    c = z.shape[1] // 2
    out = np.zeros((z.shape[0], c) + z.shape[2:])
    for ch in range(c):
        out[:, ch] = z[:, ch] * z[:, ch + c]
    return out


def channel_attention(x, w, b):
    n, c = x.shape[:2]
    out = np.zeros_like(x)
    for a in range(n):
        pooled = [x[a, ch].mean() for ch in range(c)]
        for o in range(c):
            s = b[o] + sum(w[o, i] * pooled[i] for i in range(c))
            out[a, o] = x[a, o] * s
    return out


def gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def gelu_arr(x):
    return np.vectorize(gelu)(x)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def softmax(v):
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return [t / s for t in e]


def attention_pass(x, qkv_w, qkv_b, out_w, out_b, heads, axis):
    """Brute-force attention among positions along ``axis`` (2 = H, 3 = W)."""
    n, c, h, w = x.shape
    d = c // heads
    qkv = conv2d(x, qkv_w, qkv_b)
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    o = np.zeros_like(x)
    for a in range(n):
        for hd in range(heads):
            chans = range(hd * d, (hd + 1) * d)
            if axis == 2:
                lines = [[(i, j) for i in range(h)] for j in range(w)]
            else:
                lines = [[(i, j) for j in range(w)] for i in range(h)]
            for line in lines:
                for (qi, qj) in line:
                    logits = [sum(q[a, ch, qi, qj] * k[a, ch, ki, kj] for ch in chans) / math.sqrt(d)
                              for (ki, kj) in line]
                    p = softmax(logits)
                    for ch in chans:
                        o[a, ch, qi, qj] = sum(pk * v[a, ch, ki, kj] for pk, (ki, kj) in zip(p, line))
    return conv2d(o, out_w, out_b)


def axis_self_attention(x, p, heads):
    y = attention_pass(x, p["h_qkv_w"], p["h_qkv_b"], p["h_out_w"], p["h_out_b"], heads, 2)
    return attention_pass(y, p["w_qkv_w"], p["w_qkv_b"], p["w_out_w"], p["w_out_b"], heads, 3)


def gffn(x, p):
    a = conv2d(x, p["a_w"], p["a_b"])
    b = conv2d(x, p["b_w"], p["b_b"])
    mixed = gelu_arr(a) * b + gelu_arr(b) * a
    return conv2d(mixed, p["out_w"], p["out_b"])


def fab(x, p):
    n, c = x.shape[:2]
    scaled = np.zeros_like(x)
    for a in range(n):
        pooled = [x[a, ch].mean() for ch in range(c)]
        hidden = [max(0.0, p["fc1_b"][o] + sum(p["fc1_w"][o, i] * pooled[i] for i in range(c)))
                  for o in range(p["fc1_w"].shape[0])]
        for ch in range(c):
            s = sigmoid(p["fc2_b"][ch] + sum(p["fc2_w"][ch, i] * hidden[i] for i in range(len(hidden))))
            scaled[a, ch] = x[a, ch] * s
    return conv2d(scaled, p["conv_w"], p["conv_b"])


def avg_pool_grid(x, g):
    n, c, h, w = x.shape
    bh, bw = h // g, w // g
    out = np.zeros((n, c, g, g))
    for i in range(g):
        for j in range(g):
            out[:, :, i, j] = x[:, :, i * bh:(i + 1) * bh, j * bw:(j + 1) * bw].mean(axis=(2, 3))
    return out


def spp(x, fuse_w, fuse_b, grids=(1, 2, 4)):
    h, w = x.shape[-2:]
    feats = [x] + [bilinear_resize(avg_pool_grid(x, g), h, w) for g in grids]
    return conv2d(np.concatenate(feats, axis=1), fuse_w, fuse_b)


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def compute_mask(prior, deflared, band, p):
    x = np.concatenate([prior, deflared, band], axis=1)
    x = leaky_relu(conv2d(x, p["conv1_w"], p["conv1_b"], pad=1))
    return np.tanh(conv2d(x, p["conv2_w"], p["conv2_b"], pad=1))


def gaussian_window(size=11, sigma=1.5):
    g = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma**2)) for i in range(size)]
    s = sum(g)
    return [v / s for v in g]
