"""Shared oracles for the test suite."""

import numpy as np
import torch


def fd_check(fn, tensors, n=8, h=1e-5, seed=0):
    """Worst relative error between autograd and central differences.

    ``fn()`` returns a scalar tensor; ``tensors`` are leaf float64 tensors
    with requires_grad. For each tensor, ``n`` random coordinates are
    perturbed by +/-h and the sampled gradient vectors are compared with
    ||g_fd - g_ad|| / max(||g_fd||, ||g_ad||).
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False)
        ad, fd = [], []
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
            fd.append((up - down) / (2 * h))
            ad.append(g.reshape(-1)[i].item())
        ad, fd = np.array(ad), np.array(fd)
        scale = max(np.linalg.norm(ad), np.linalg.norm(fd))
        if scale > 1e-7:  # both ~0: parameter has no effect on this loss
            worst = max(worst, float(np.linalg.norm(ad - fd) / scale))
    return worst


def projection(shape, seed=1):
    """Fixed random weights turning any output into a scalar loss."""
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)


def module_params(module, limit=None):
    params = [p for p in module.parameters() if p.requires_grad]
    if limit is not None and len(params) > limit:
        idx = np.linspace(0, len(params) - 1, limit).round().astype(int)
        params = [params[i] for i in idx]
    return params
