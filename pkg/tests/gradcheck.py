"""Central finite-difference check of autograd gradients (float64)."""

import torch


def randomize_(module, seed=0, scale=0.3):
    """Give every parameter (including zero-initialized ones) random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def fd_relative_error(objective, tensors, step=1e-4, max_coords=None, seed=0):
    """Relative error ``|g_autograd - g_fd| / max(|g_autograd|, |g_fd|)`` over all coordinates.

    ``objective`` is a zero-argument callable returning a scalar; ``tensors``
    are leaf tensors with ``requires_grad``. With ``max_coords`` a random subset
    of coordinates is checked.
    """
    for t in tensors:
        t.grad = None
    objective().backward()
    analytic, numeric = [], []
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        flat = t.data.view(-1)
        g = t.grad.reshape(-1)
        idx = torch.arange(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            idx = torch.randperm(flat.numel(), generator=gen)[:max_coords]
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = objective().item()
                flat[i] = orig - step
                down = objective().item()
                flat[i] = orig
            numeric.append((up - down) / (2 * step))
            analytic.append(g[i].item())
    a = torch.tensor(analytic, dtype=torch.float64)
    n = torch.tensor(numeric, dtype=torch.float64)
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / denom
