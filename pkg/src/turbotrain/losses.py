"""Chamfer and focal objectives, in plain numpy and as gradcore subgraphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Graph, backward

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ChamferConfig:
    points_per_cell: int = 20

    def __post_init__(self):
        if self.points_per_cell < 1:
            raise ValueError("need at least one predicted point per cell")


@dataclass(frozen=True)
class OccFocalConfig:
    alpha: float = 2.0
    gamma: float = 0.25

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma < 0:
            raise ValueError(f"focal parameters alpha={self.alpha}, gamma={self.gamma} out of range")


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric squared Chamfer distance and its gradient w.r.t. ``pred``.

    Nearest-neighbour assignments are held fixed when differentiating; ties
    go to the lowest index.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(pred) == 0 or len(target) == 0:
        raise ValueError("chamfer_loss needs two non-empty point sets")
    d = _pairwise_sq(pred, target)
    nn_t = np.argmin(d, axis=1)  # for each predicted point
    nn_p = np.argmin(d, axis=0)  # for each target point
    n_p, n_t = len(pred), len(target)
    loss = d[np.arange(n_p), nn_t].mean() + d[nn_p, np.arange(n_t)].mean()
    grad = 2.0 * (pred - target[nn_t]) / n_p
    np.add.at(grad, nn_p, 2.0 * (pred[nn_p] - target) / n_t)
    return float(loss), grad


def chamfer_graph(g: Graph, pred: int, target: np.ndarray) -> int:
    """Chamfer loss for one point-set pair built from tape primitives."""
    p = g.value(pred)
    t = np.asarray(target, dtype=np.float64)
    n_p, n_t = len(p), len(t)
    # squared distances |p|^2 + |t|^2 - 2 p.t, tiled without broadcasting
    pp = g.sum(g.power(pred, 2), axis=1)
    pp_tile = g.matmul(g.reshape(pp, (n_p, 1)), g.const(np.ones((1, n_t))))
    tt_tile = g.const(np.tile((t * t).sum(axis=1), (n_p, 1)))
    cross = g.matmul(pred, g.const(t.T))
    d = g.sub(g.add(pp_tile, tt_tile), g.scale(cross, 2.0))
    return g.add(g.mean(g.min(d, axis=1)), g.mean(g.min(d, axis=0)))


def batched_chamfer_graph(g: Graph, pred: int, groups: list[np.ndarray], k: int) -> int:
    """Mean Chamfer loss over cells.

    ``pred`` holds ``len(groups) * k`` rows, ``k`` consecutive rows per cell;
    ``groups[c]`` is cell ``c``'s target cloud. Assignments are computed on the
    current values and frozen, which gives the same value and gradient as a
    per-cell min-reduce.
    """
    p = g.value(pred)
    n_cells = len(groups)
    targets = np.concatenate(groups)
    offsets = np.concatenate([[0], np.cumsum([len(t) for t in groups])])
    nn_for_pred = np.empty(len(p), np.int64)
    nn_for_target = np.empty(len(targets), np.int64)
    w_pred = np.full(len(p), 1.0 / (k * n_cells))
    w_target = np.empty(len(targets))
    for c, tgt in enumerate(groups):
        block = p[c * k:(c + 1) * k]
        d = _pairwise_sq(block, tgt)
        nn_for_pred[c * k:(c + 1) * k] = offsets[c] + np.argmin(d, axis=1)
        nn_for_target[offsets[c]:offsets[c + 1]] = c * k + np.argmin(d, axis=0)
        w_target[offsets[c]:offsets[c + 1]] = 1.0 / (len(tgt) * n_cells)
    fwd = g.sum(g.power(g.sub(pred, g.const(targets[nn_for_pred])), 2), axis=1)
    bwd = g.sum(g.power(g.sub(g.gather(pred, nn_for_target), g.const(targets)), 2), axis=1)
    return g.add(g.sum(g.mul(fwd, g.const(w_pred))), g.sum(g.mul(bwd, g.const(w_target))))


def focal_terms(g: Graph, prob: int, alpha: float, gamma: float) -> tuple[int, int]:
    """Elementwise positive and negative focal terms for probabilities ``prob``.

    positive: -alpha (1-p)^gamma log p ; negative: -alpha p^gamma log(1-p).
    """
    p = g.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    q = g.one_minus(p)
    pos = g.scale(g.mul(g.power(q, gamma), g.log(p)), -alpha)
    neg = g.scale(g.mul(g.power(p, gamma), g.log(q)), -alpha)
    return pos, neg


def focal_graph(g: Graph, prob: int, labels: np.ndarray, cfg: OccFocalConfig = OccFocalConfig(),
                weights: tuple[np.ndarray, np.ndarray] | None = None) -> int:
    """Weighted sum of focal terms; default weights give the mean over entries."""
    labels = np.asarray(labels, dtype=np.float64)
    shape = g.value(prob).shape
    if labels.shape != shape:
        raise ValueError(f"labels of shape {labels.shape} do not match predictions {shape}")
    if weights is None:
        w_pos = labels / labels.size
        w_neg = (1.0 - labels) / labels.size
    else:
        w_pos, w_neg = weights
    pos, neg = focal_terms(g, prob, cfg.alpha, cfg.gamma)
    return g.add(g.sum(g.mul(pos, g.const(w_pos))), g.sum(g.mul(neg, g.const(w_neg))))


def occupancy_focal_loss(prob, labels, cfg: OccFocalConfig = OccFocalConfig()) -> tuple[float, np.ndarray]:
    """Mean focal loss over labelled voxels and its gradient w.r.t. ``prob``."""
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if prob.shape != labels.shape:
        raise ValueError(f"length mismatch: {prob.shape} predictions vs {labels.shape} labels")
    g = Graph()
    p = g.param(prob)
    loss = focal_graph(g, p, labels, cfg)
    return float(g.value(loss)), backward(g, loss)[p]
