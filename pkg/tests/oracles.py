"""Independent reference implementations used by the tests.

Each oracle is deliberately naive (loops, brute force, sampling) and shares
no code with the package.
"""
from __future__ import annotations

import math

import numpy as np

FD_EPS = 1e-5


def fd_grad(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = f(x)
        flat[k] = orig - eps
        lo = f(x)
        flat[k] = orig
        gf[k] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def brute_chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """O(|p||q|) double loop over squared distances."""
    def sq(u, v):
        return sum((ui - vi) ** 2 for ui, vi in zip(u, v))

    a = sum(min(sq(u, v) for v in q) for u in p) / len(p)
    b = sum(min(sq(v, u) for u in p) for v in q) / len(q)
    return a + b


def naive_dot(a, b) -> float:
    s = 0.0
    for x, y in zip(a, b):
        s += float(x) * float(y)
    return s


def _inside_rect(px, py, cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - cx, py - cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def mc_iou(a, b, n: int = 400_000, seed: int = 0) -> float:
    """Monte-Carlo IoU of two rotated rectangles (x, y, l, w, yaw)."""
    rng = np.random.default_rng(seed)
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    lo_x, hi_x = min(a[0] - ra, b[0] - rb), max(a[0] + ra, b[0] + rb)
    lo_y, hi_y = min(a[1] - ra, b[1] - rb), max(a[1] + ra, b[1] + rb)
    px = rng.uniform(lo_x, hi_x, n)
    py = rng.uniform(lo_y, hi_y, n)
    ia = _inside_rect(px, py, *a)
    ib = _inside_rect(px, py, *b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def brute_ap(scores, is_tp, n_gt: int) -> float:
    """All-point interpolated AP written from the PR-curve definition.

    For every recall level reached, precision is the best precision at any
    cut-off with recall at least that high; AP sums those over recall steps.
    """
    order = sorted(range(len(scores)), key=lambda i: -scores[i])  # stable
    pts = []
    tp = fp = 0
    for i in order:
        if is_tp[i]:
            tp += 1
        else:
            fp += 1
        pts.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in pts}):
        if r <= prev_r:
            continue
        p_interp = max(p for rr, p in pts if rr >= r)
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def fd_partial(f, x: np.ndarray, coords, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of ``f`` at ``x`` for the flat indices ``coords`` only."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for j, k in enumerate(coords):
        orig = flat[k]
        flat[k] = orig + eps
        hi = f(x)
        flat[k] = orig - eps
        lo = f(x)
        flat[k] = orig
        out[j] = (hi - lo) / (2 * eps)
    return out


def fd_directional(f, x: np.ndarray, v: np.ndarray, eps: float = FD_EPS) -> float:
    """Central difference of ``f`` along direction ``v``."""
    x = np.asarray(x, dtype=np.float64)
    return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)
