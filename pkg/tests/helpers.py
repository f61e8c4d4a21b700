"""Independent oracles used across the test suite."""

from __future__ import annotations

import math

import numpy as np
import torch


def fd_gradient(fn, x: torch.Tensor, coords, h: float = 1e-3):
    """Central differences of scalar ``fn()`` w.r.t. ``x`` at ``coords`` (x perturbed in place)."""
    out = []
    with torch.no_grad():
        for c in coords:
            orig = x[c].item()
            x[c] = orig + h
            fp = float(fn())
            x[c] = orig - h
            fm = float(fn())
            x[c] = orig
            out.append((fp - fm) / (2.0 * h))
    return np.array(out)


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def sample_coords(shape, k: int, rng: np.random.Generator):
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(k, total), replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in flat]


def model_gradcheck(build_loss, model32, n_coords: int = 200, seed: int = 0, h: float = 1e-4):
    """Reverse-mode gradients (float32) against central differences on a float64 copy.

    ``build_loss(model)`` returns a scalar loss tensor. Returns the max
    relative error over up to ``n_coords`` coordinates spread across all
    parameters, using a floor of 1e-3 times the largest gradient magnitude
    seen so tiny coordinates are not judged on pure rounding noise.
    """
    import copy

    rng = np.random.default_rng(seed)
    model32.zero_grad(set_to_none=True)
    loss = build_loss(model32)
    loss.backward()
    params32 = dict(model32.named_parameters())
    model64 = copy.deepcopy(model32).double()
    params64 = dict(model64.named_parameters())

    names = [n for n, p in params32.items() if p.grad is not None]
    per_param = max(1, n_coords // len(names))
    analytic, numeric = [], []
    for name in names:
        p64 = params64[name]
        coords = sample_coords(tuple(p64.shape), per_param, rng)
        numeric.extend(fd_gradient(lambda: build_loss(model64), p64.data, coords, h))
        g = params32[name].grad.numpy()
        analytic.extend(float(g[c]) for c in coords)
    analytic, numeric = np.array(analytic), np.array(numeric)
    floor = 1e-3 * float(np.max(np.abs(numeric)))
    return rel_error(analytic, numeric, floor), len(numeric)


def loop_infonce(c, t):
    """Float64 double-loop InfoNCE with raw dot products."""
    c = np.asarray(c, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    m = len(c)
    total = 0.0
    for i in range(m):
        scores = [sum(c[i][k] * t[j][k] for k in range(c.shape[1])) for j in range(m)]
        top = max(scores)
        denom = sum(math.exp(s - top) for s in scores)
        total += -(scores[i] - top - math.log(denom))
    return total / m


def brute_force_windows(block: np.ndarray, stride: int, patch: int = 16):
    """Enumerate every patch window over the smallest zero-padded canvas the grid tiles exactly."""
    f, t = block.shape
    fp, tp = max(f, patch), max(t, patch)
    while (fp - patch) % stride:
        fp += 1
    while (tp - patch) % stride:
        tp += 1
    canvas = np.zeros((fp, tp), dtype=block.dtype)
    canvas[:f, :t] = block
    out = []
    r = 0
    while r + patch <= fp:
        c = 0
        while c + patch <= tp:
            out.append(canvas[r:r + patch, c:c + patch].reshape(-1).copy())
            c += stride
        r += stride
    return np.array(out)
