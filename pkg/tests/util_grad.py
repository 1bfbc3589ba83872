"""Directional finite-difference gradient checking for test suites.

Perturbs the given leaf tensors in place along one random direction and
compares the central difference of a scalar function against the autograd
directional derivative.  Callers should run modules in double precision.
"""

import torch


def fd_directional_error(scalar_fn, tensors, eps=1e-6, seed=0):
    """Relative error between autograd and central-FD directional derivatives."""
    g = torch.Generator().manual_seed(seed)
    dirs = []
    for t in tensors:
        d = torch.randn(t.shape, generator=g, dtype=t.dtype)
        dirs.append(d / d.norm())

    y = scalar_fn()
    grads = torch.autograd.grad(y, tensors, allow_unused=False)
    analytic = sum((gr * d).sum().item() for gr, d in zip(grads, dirs))

    with torch.no_grad():
        for t, d in zip(tensors, dirs):
            t += eps * d
        y_plus = scalar_fn().item()
        for t, d in zip(tensors, dirs):
            t -= 2 * eps * d
        y_minus = scalar_fn().item()
        for t, d in zip(tensors, dirs):
            t += eps * d  # restore

    numeric = (y_plus - y_minus) / (2 * eps)
    denom = max(abs(analytic), abs(numeric), 1e-12)
    return abs(analytic - numeric) / denom
