"""Masked multi-agent reconstruction pretraining of the shared trunk.

Per frame, the non-empty BEV cells of the merged (ego + cooperative) cloud are
masked at ``mask_ratio`` with a fresh draw per frame; masked cells are hidden
from every agent. The trunk sees what is left of all frames, and two
throw-away decoders rebuild the current frame's masked cells: a point decoder
scored by Chamfer distance and an occupancy decoder scored by focal loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .gradcore import Graph, backward
from .losses import ChamferConfig, OccFocalConfig, batched_chamfer_graph, chamfer_loss, focal_graph, occupancy_focal_loss
from .model import ModelConfig, SceneTensors, bind, shared_names, trunk
from .optim import AdamW, OptimizerConfig
from .scene import derive_seed
from .voxel import BevMaskPlan, build_targets, mask_grids, nonempty_cells

log = logging.getLogger(__name__)

__all__ = [
    "PretrainConfig", "PretrainResult", "chamfer_loss", "occupancy_focal_loss", "init_decoder_params",
    "point_decoder", "occ_decoder", "mask_scene", "pretrain_loss", "pretrain_run",
]


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.7
    w_rec: float = 1.0
    w_occ: float = 1.0
    epochs: int = 15
    batch_size: int = 4
    lr: float = 0.002
    weight_decay: float = 1e-2
    seed: int = 0
    chamfer: ChamferConfig = field(default_factory=ChamferConfig)
    focal: OccFocalConfig = field(default_factory=OccFocalConfig)

    def validate(self) -> None:
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")
        if self.w_rec < 0 or self.w_occ < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def init_decoder_params(mcfg: ModelConfig, pcfg: PretrainConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    H, Z, k = mcfg.neck_channels, mcfg.spec.z_levels, pcfg.chamfer.points_per_cell
    hid = 32
    return {
        "pd.w": rng.normal(0.0, 0.1 / math.sqrt(H), (H, 3 * k)),
        "pd.b": rng.uniform(-0.5, 0.5, 3 * k),
        "od.w1": rng.normal(0.0, math.sqrt(2.0 / H), (H, hid)),
        "od.b1": np.zeros(hid),
        "od.w2": rng.normal(0.0, math.sqrt(2.0 / hid), (hid, hid)),
        "od.b2": np.zeros(hid),
        "od.w3": rng.normal(0.0, 0.1, (hid, Z)),
        "od.b3": np.zeros(Z),
    }


def point_decoder(g: Graph, pn: dict[str, int], feat: int, centers: np.ndarray, k: int) -> int:
    """One affine layer to ``k`` 3-D offsets per cell, added to the cell centres.

    ``feat`` is (Mm, H), ``centers`` (Mm, 3); the result is (Mm * k, 3).
    """
    m = g.value(feat).shape[0]
    off = g.reshape(g.linear(feat, pn["pd.w"], pn["pd.b"]), (m * k, 3))
    return g.add(off, g.const(np.repeat(centers, k, axis=0)))


def occ_decoder(g: Graph, pn: dict[str, int], feat: int) -> int:
    """Three affine layers (relu, relu, sigmoid) to per-z-level occupancy."""
    h = g.relu(g.linear(feat, pn["od.w1"], pn["od.b1"]))
    h = g.relu(g.linear(h, pn["od.w2"], pn["od.b2"]))
    return g.sigmoid(g.linear(h, pn["od.w3"], pn["od.b3"]))


def mask_scene(st: SceneTensors, mcfg: ModelConfig, ratio: float, seed: int):
    """Masked copies of the scene's inputs plus the current frame's completed plan.

    Returns ``(feats, occupied, plan, n_visible)`` where ``n_visible`` counts
    unmasked non-empty cells summed over frames.
    """
    spec = mcfg.spec
    feats = st.feats.copy()
    occupied = st.occupied.copy()
    T = feats.shape[1]
    plan, visible = None, 0
    for t in range(T):
        merged = np.concatenate(st.frame_points[t])
        cur = mask_grids(nonempty_cells(merged, spec), ratio, derive_seed(seed, t))
        feats[:, t, cur.masked] = 0.0
        occupied[:, t, cur.masked] = False
        visible += len(cur.nonempty) - len(cur.masked)
        if t == T - 1:
            plan = build_targets(merged, cur, spec) if len(cur.masked) else cur
    return feats, occupied, plan, visible


def pretrain_loss(g: Graph, pn: dict[str, int], st: SceneTensors, mcfg: ModelConfig, pcfg: PretrainConfig,
                  seed: int):
    """(total, L_rec, L_occ) node ids for one scene, or ``None`` if nothing is masked."""
    feats, occupied, plan, _ = mask_scene(st, mcfg, pcfg.mask_ratio, seed)
    if plan is None or len(plan.masked) == 0:
        return None
    h = trunk(g, pn, st, mcfg, feats=feats, occupied=occupied)
    feat = g.gather(h, plan.masked)
    spec = mcfg.spec
    centers = np.column_stack([spec.cell_centers()[plan.masked],
                               np.full(len(plan.masked), 0.5 * (spec.z_range[0] + spec.z_range[1]))])
    k = pcfg.chamfer.points_per_cell
    pts = point_decoder(g, pn, feat, centers, k)
    l_rec = batched_chamfer_graph(g, pts, plan.target_points, k)
    l_occ = focal_graph(g, occ_decoder(g, pn, feat), plan.occupancy, pcfg.focal)
    total = g.add(g.scale(l_rec, pcfg.w_rec), g.scale(l_occ, pcfg.w_occ))
    return total, l_rec, l_occ


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]  # trunk only; decoders are dropped
    trace: list[tuple[int, float, float]]  # (epoch, mean L_rec, mean L_occ)
    decoders: dict[str, np.ndarray] = field(default_factory=dict)


def pretrain_run(scenes: list[SceneTensors], params: dict[str, np.ndarray], mcfg: ModelConfig,
                 pcfg: PretrainConfig) -> PretrainResult:
    """Train trunk + decoders on the reconstruction objective.

    ``params`` supplies the initial trunk (head entries are ignored).
    """
    pcfg.validate()
    if not scenes:
        raise ValueError("pretraining needs at least one scene")
    usable = []
    for i, st in enumerate(scenes):
        if not st.occupied[:, -1].any():
            log.warning("scene %s has no non-empty cells; skipped", st.scene_id)
            continue
        usable.append(st)
    if not usable:
        raise ValueError("no scene has any non-empty cell")
    if all(mask_scene(st, mcfg, pcfg.mask_ratio, pcfg.seed)[3] == 0 for st in usable):
        raise ValueError(
            f"mask ratio {pcfg.mask_ratio} hides every non-empty cell in every frame; the encoder would see no input")

    trunk_params = {k: np.array(params[k]) for k in shared_names(params)}
    dec = init_decoder_params(mcfg, pcfg, derive_seed(pcfg.seed, 1))
    all_params = {**trunk_params, **dec}
    steps_per_epoch = math.ceil(len(usable) / pcfg.batch_size)
    opt = AdamW(all_params, OptimizerConfig(lr=pcfg.lr, weight_decay=pcfg.weight_decay),
                total_steps=pcfg.epochs * steps_per_epoch)
    rng = np.random.default_rng(derive_seed(pcfg.seed, 2))
    trace = []
    for epoch in range(pcfg.epochs):
        order = rng.permutation(len(usable))
        rec_sum = occ_sum = 0.0
        n_seen = 0
        for b in range(steps_per_epoch):
            batch = order[b * pcfg.batch_size:(b + 1) * pcfg.batch_size]
            g = Graph()
            pn = bind(g, all_params)
            totals = []
            for j in batch:
                out = pretrain_loss(g, pn, usable[j], mcfg, pcfg, derive_seed(pcfg.seed, 1000 + epoch * 100003 + int(j)))
                if out is None:
                    continue
                totals.append(out[0])
                rec_sum += float(g.value(out[1]))
                occ_sum += float(g.value(out[2]))
                n_seen += 1
            if not totals:
                continue
            loss = totals[0]
            for t in totals[1:]:
                loss = g.add(loss, t)
            loss = g.scale(loss, 1.0 / len(totals))
            if not np.isfinite(g.value(loss)):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}, batch {b}")
            gm = backward(g, loss)
            opt.step({k: gm[pn[k]] for k in all_params})
        trace.append((epoch, rec_sum / max(n_seen, 1), occ_sum / max(n_seen, 1)))
        log.info("pretrain epoch %d: L_rec %.4f L_occ %.4f", epoch, trace[-1][1], trace[-1][2])
    trunk_out = {k: all_params[k] for k in trunk_params}
    decoders = {k: all_params[k] for k in dec}
    return PretrainResult(trunk_out, trace, decoders)
