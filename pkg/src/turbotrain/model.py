"""Tiny cooperative perception + prediction network on a BEV cell grid.

Data flow for one scene with N agents and T frames over M cells::

    cell features (N*T*M, F) -> encode_frame -> (N*T*M, C)
    -> temporal_fuse over T  -> (N*M, C)
    -> agent_fuse over N     -> (M, C)
    -> neck (KxK neighbourhood) -> (M, H)       [end of shared trunk]
    -> detection head  (M, 1 + 5)
    -> prediction head (M, 2 * T_fut)
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .gradcore import Graph
from .losses import OccFocalConfig, focal_graph
from .metrics import DetectionBox, nms
from .scene import AgentPose, Scene, wrap_angle
from .voxel import VoxelSpec, cell_features, transform_points

SHARED_PREFIXES = ("enc.", "tmp.", "fuse.", "neck.")
DET_PREFIX = "det."
PRED_PREFIX = "pred."
EMPTY_LOGIT = -30.0
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    spec: VoxelSpec = VoxelSpec(x_range=(-25.6, 25.6), y_range=(-12.8, 12.8), bev_cell=1.6)
    t_frames: int = 5
    t_fut: int = 6
    enc_hidden: int = 24
    channels: int = 16
    neck_kernel: int = 5
    neck_channels: int = 32
    head_hidden: int = 32
    score_threshold: float = 0.7
    nms_iou: float = 0.5
    ref_length: float = 4.3
    ref_width: float = 1.9
    smooth_l1_beta: float = 1.0
    pos_weight: float = 3.0  # objectness weight of positive cells relative to negatives
    pos_extent: float = 1.0  # positives: cells centred inside this fraction of the box; 0 = centre cell only
    focal: OccFocalConfig = OccFocalConfig()

    @property
    def in_features(self) -> int:
        return self.spec.z_levels + 3


@dataclass(frozen=True)
class PredictedTrajectory:
    box: DetectionBox
    waypoints: np.ndarray  # (t_fut, 2)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))

    C, T, K = cfg.channels, cfg.t_frames, cfg.neck_kernel
    p = {
        "enc.w1": he(cfg.in_features, cfg.enc_hidden),
        "enc.b1": np.zeros(cfg.enc_hidden),
        "enc.w2": he(cfg.enc_hidden, C),
        "enc.b2": np.zeros(C),
        "tmp.gate": np.full(T, 1.0 / T),
        "tmp.w": np.tile(np.eye(C), (T, 1)),
        "tmp.b": np.zeros(C),
        "fuse.w": np.zeros((C, 1)),
        "fuse.b": np.zeros(1),
        "neck.w": he(K * K * C, cfg.neck_channels),
        "neck.b": np.zeros(cfg.neck_channels),
    }
    p.update(init_head_params(cfg, rng))
    return p


def init_head_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    H, Hh = cfg.neck_channels, cfg.head_hidden
    return {
        "det.w1": rng.normal(0.0, math.sqrt(2.0 / H), (H, Hh)),
        "det.b1": np.zeros(Hh),
        "det.cls.w": rng.normal(0.0, 0.01, (Hh, 1)),
        "det.cls.b": np.zeros(1),
        "det.reg.w": rng.normal(0.0, 0.01, (Hh, 5)),
        "det.reg.b": np.zeros(5),
        "pred.w1": rng.normal(0.0, math.sqrt(2.0 / H), (H, Hh)),
        "pred.b1": np.zeros(Hh),
        "pred.w2": rng.normal(0.0, 0.01, (Hh, 2 * cfg.t_fut)),
        "pred.b2": np.zeros(2 * cfg.t_fut),
    }


def shared_names(params) -> list[str]:
    return [k for k in params if k.startswith(SHARED_PREFIXES)]


def head_names(params, prefix: str) -> list[str]:
    return [k for k in params if k.startswith(prefix)]


# ----------------------------------------------------------------- scene prep

@dataclass(eq=False)
class SceneTensors:
    """Model-ready arrays for one scene, all in the ego agent's current frame."""

    scene_id: str
    feats: np.ndarray  # (N, T, M, F)
    occupied: np.ndarray  # (N, T, M) bool
    frame_points: list[list[np.ndarray]]  # [t][agent] ego-frame points
    pos_cells: np.ndarray  # (P,) positive cell ids
    box_targets: np.ndarray  # (P, 5)
    traj_targets: np.ndarray  # (P, 2 * t_fut)
    gt_boxes: list[DetectionBox] = field(default_factory=list)
    gt_futures: list[np.ndarray] = field(default_factory=list)


def box_yaw(heading: float) -> float:
    """Heading folded to [-pi/2, pi/2): a box looks the same after a half turn."""
    y = wrap_angle(heading)
    if y >= math.pi / 2:
        y -= math.pi
    elif y < -math.pi / 2:
        y += math.pi
    return y


def prepare_scene(scene: Scene, cfg: ModelConfig, ego: int = 0) -> SceneTensors:
    if scene.t_hist != cfg.t_frames:
        raise ValueError(f"scene {scene.scene_id} has {scene.t_hist} frames, model expects {cfg.t_frames}")
    if scene.t_fut != cfg.t_fut:
        raise ValueError(f"scene {scene.scene_id} horizon {scene.t_fut} != model horizon {cfg.t_fut}")
    spec = cfg.spec
    n, T, M = scene.n_agents, scene.t_hist, spec.n_cells
    ego_pose = scene.poses[ego][-1]
    order = [ego] + [a for a in range(n) if a != ego]
    feats = np.zeros((n, T, M, cfg.in_features))
    frame_points: list[list[np.ndarray]] = [[None] * n for _ in range(T)]
    for slot, a in enumerate(order):
        for t in range(T):
            pts = transform_points(scene.frames[a][t].points, scene.poses[a][t], ego_pose)
            frame_points[t][slot] = pts
            feats[slot, t] = cell_features(pts, spec)
    occupied = feats[..., -1] > 0

    centers = spec.cell_centers()
    nx, ny = spec.bev_shape
    world_to_ego = AgentPose(0.0, 0.0, 0.0)
    pos, boxes, trajs, gt_boxes, gt_fut = [], [], [], [], []
    taken: set[int] = set()
    dyaw = -ego_pose.yaw
    for ob in scene.objects:
        st = ob.state
        c = transform_points(np.array([[st.x, st.y, 0.0]]), world_to_ego, ego_pose)[0, :2]
        fut = transform_points(np.column_stack([ob.future, np.zeros(len(ob.future))]), world_to_ego, ego_pose)[:, :2]
        yaw = box_yaw(st.yaw + dyaw)
        if not (spec.x_range[0] <= c[0] < spec.x_range[1] and spec.y_range[0] <= c[1] < spec.y_range[1]):
            continue
        gt_boxes.append(DetectionBox(float(c[0]), float(c[1]), st.length, st.width, yaw))
        gt_fut.append(fut)
        ix = int((c[0] - spec.x_range[0]) // spec.bev_cell)
        iy = int((c[1] - spec.y_range[0]) // spec.bev_cell)
        cells = [min(ix, nx - 1) * ny + min(iy, ny - 1)]
        if cfg.pos_extent > 0:
            # cells whose centre falls inside the (scaled) box footprint
            d = centers - c
            cs, sn = math.cos(yaw), math.sin(yaw)
            u, v = d[:, 0] * cs + d[:, 1] * sn, -d[:, 0] * sn + d[:, 1] * cs
            inside = (np.abs(u) <= 0.5 * cfg.pos_extent * st.length) & (np.abs(v) <= 0.5 * cfg.pos_extent * st.width)
            cells += [int(k) for k in np.nonzero(inside)[0] if k != cells[0]]
        for cell in cells:
            if cell in taken:
                continue
            taken.add(cell)
            pos.append(cell)
            off = c - centers[cell]
            boxes.append([off[0], off[1], st.length - cfg.ref_length, st.width - cfg.ref_width, yaw])
            trajs.append((fut - c).reshape(-1))
    return SceneTensors(
        scene_id=scene.scene_id,
        feats=feats,
        occupied=occupied,
        frame_points=frame_points,
        pos_cells=np.array(pos, dtype=np.int64),
        box_targets=np.array(boxes, dtype=np.float64).reshape(-1, 5),
        traj_targets=np.array(trajs, dtype=np.float64).reshape(-1, 2 * cfg.t_fut),
        gt_boxes=gt_boxes,
        gt_futures=gt_fut,
    )


@functools.lru_cache(maxsize=8)
def neighbour_index(spec: VoxelSpec, k: int) -> np.ndarray:
    """(M * k * k,) row ids of each cell's kxk neighbourhood; M pads out-of-grid."""
    nx, ny = spec.bev_shape
    r = k // 2
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ix, iy = ix.reshape(-1), iy.reshape(-1)
    cols = []
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            jx, jy = ix + dx, iy + dy
            ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
            cols.append(np.where(ok, jx * ny + jy, nx * ny))
    out = np.stack(cols, axis=1).reshape(-1)
    out.flags.writeable = False
    return out


# -------------------------------------------------------------- trunk pieces

def bind(g: Graph, params: dict[str, np.ndarray]) -> dict[str, int]:
    return {k: g.param(v, name=k) for k, v in params.items()}


def encode_frame(g: Graph, pn: dict[str, int], feats: np.ndarray, occupied: np.ndarray) -> int:
    """Per-cell two-layer MLP; cells flagged empty come out as exact zeros."""
    x = g.const(feats.reshape(-1, feats.shape[-1]))
    h = g.relu(g.linear(x, pn["enc.w1"], pn["enc.b1"]))
    h = g.relu(g.linear(h, pn["enc.w2"], pn["enc.b2"]))
    c = g.value(h).shape[1]
    keep = np.repeat(occupied.reshape(-1, 1).astype(np.float64), c, axis=1)
    return g.mul(h, g.const(keep))


def temporal_fuse(g: Graph, pn: dict[str, int], grids: int, n_agents: int, n_frames: int, n_cells: int) -> int:
    """Gate each frame by a learned scalar, then mix the stacked frames affinely.

    ``grids`` is (N*T*M, C) ordered agent, frame (oldest first), cell.
    """
    gate_len = g.value(pn["tmp.gate"]).size
    if gate_len != n_frames:
        raise ValueError(f"temporal module configured for {gate_len} frames, got {n_frames}")
    c = g.value(grids).shape[1]
    x = g.reshape(grids, (n_agents, n_frames, n_cells, c))
    x = g.reshape(g.transpose(x, (0, 2, 1, 3)), (n_agents * n_cells, n_frames * c))
    gate = g.reshape(pn["tmp.gate"], (n_frames, 1))
    gate = g.reshape(g.gather(gate, np.repeat(np.arange(n_frames), c)), (1, n_frames * c))
    gate = g.gather(gate, np.zeros(n_agents * n_cells, np.int64))
    return g.linear(g.mul(x, gate), pn["tmp.w"], pn["tmp.b"])


def agent_fuse(g: Graph, pn: dict[str, int], grids: int, n_agents: int, n_cells: int,
               seen: np.ndarray | None = None) -> int:
    """Per-cell softmax over agents of a learned score, then a weighted sum.

    ``seen`` (N, M) marks cells an agent observed; unseen cells get a large
    negative score so they do not dilute observing agents.
    """
    if n_agents == 0:
        raise ValueError("agent fusion needs at least one agent")
    c = g.value(grids).shape[1]
    logits = g.linear(grids, pn["fuse.w"], pn["fuse.b"])  # (N*M, 1)
    if seen is not None:
        offset = np.where(seen.reshape(-1, 1), 0.0, EMPTY_LOGIT)
        logits = g.add(logits, g.const(offset))
    lv = g.value(logits).reshape(n_agents, n_cells)
    shift = np.tile(lv.max(axis=0), n_agents).reshape(-1, 1)
    e = g.exp(g.sub(logits, g.const(shift)))
    denom = g.sum(g.reshape(e, (n_agents, n_cells, 1)), axis=0)  # (M, 1)
    inv = g.gather(g.power(denom, -1.0), np.tile(np.arange(n_cells), n_agents))
    w = g.matmul(g.mul(e, inv), g.const(np.ones((1, c))))
    return g.sum(g.reshape(g.mul(w, grids), (n_agents, n_cells, c)), axis=0)


def layer_norm(g: Graph, x: int, eps: float = LN_EPS) -> int:
    """Per-row standardisation over channels (no learned scale or shift)."""
    m, c = g.value(x).shape
    mu = g.matmul(g.reshape(g.mean(x, axis=1), (m, 1)), g.const(np.ones((1, c))))
    xc = g.sub(x, mu)
    var = g.mean(g.power(xc, 2), axis=1)
    inv = g.power(g.add(var, g.const(np.full(m, eps))), -0.5)
    return g.mul(xc, g.matmul(g.reshape(inv, (m, 1)), g.const(np.ones((1, c)))))


def neck(g: Graph, pn: dict[str, int], fused: int, nbr: np.ndarray, k: int) -> int:
    m, c = g.value(fused).shape
    padded = g.concat([fused, g.const(np.zeros((1, c)))], axis=0)
    cols = g.reshape(g.gather(padded, nbr), (m, k * k * c))
    return layer_norm(g, g.relu(g.linear(cols, pn["neck.w"], pn["neck.b"])))


def trunk(g: Graph, pn: dict[str, int], st: SceneTensors, cfg: ModelConfig,
          feats: np.ndarray | None = None, occupied: np.ndarray | None = None) -> int:
    """Shared representation (M, neck_channels); ``feats``/``occupied`` override the scene's (masking)."""
    feats = st.feats if feats is None else feats
    occupied = st.occupied if occupied is None else occupied
    n, T, M, _ = feats.shape
    enc = encode_frame(g, pn, feats, occupied)
    tem = temporal_fuse(g, pn, enc, n, T, M)
    fused = agent_fuse(g, pn, tem, n, M, seen=occupied.any(axis=1))
    return neck(g, pn, fused, neighbour_index(cfg.spec, cfg.neck_kernel), cfg.neck_kernel)


def heads(g: Graph, pn: dict[str, int], h: int) -> tuple[int, int, int]:
    """(objectness logits (M,1), box regressands (M,5), waypoint offsets (M, 2*T_fut))."""
    d = g.relu(g.linear(h, pn["det.w1"], pn["det.b1"]))
    cls = g.linear(d, pn["det.cls.w"], pn["det.cls.b"])
    reg = g.linear(d, pn["det.reg.w"], pn["det.reg.b"])
    p = g.relu(g.linear(h, pn["pred.w1"], pn["pred.b1"]))
    traj = g.linear(p, pn["pred.w2"], pn["pred.b2"])
    return cls, reg, traj


def task_losses(g: Graph, outputs: tuple[int, int, int], st: SceneTensors, cfg: ModelConfig) -> tuple[int, int]:
    """(L_det, L_pred) for one scene.

    L_det is a focal objectness term averaged over all cells (positives
    weighted by ``pos_weight``) plus smooth-L1 box regression at positive cells; L_pred is smooth-L1 on waypoint offsets at
    positive cells. Both regression sums are divided by the positive count.
    """
    cls, reg, traj = outputs
    M = g.value(cls).shape[0]
    labels = np.zeros((M, 1))
    labels[st.pos_cells, 0] = 1.0
    n_pos = max(len(st.pos_cells), 1)
    w_pos = labels * (cfg.pos_weight / M)
    w_neg = (1.0 - labels) / M
    l_det = focal_graph(g, g.sigmoid(cls), labels, cfg.focal, (w_pos, w_neg))
    if len(st.pos_cells) == 0:
        zero = g.scale(g.sum(traj), 0.0)
        return l_det, zero
    rdiff = g.sub(g.gather(reg, st.pos_cells), g.const(st.box_targets))
    l_det = g.add(l_det, g.scale(g.sum(g.smooth_l1(rdiff, cfg.smooth_l1_beta)), 1.0 / n_pos))
    tdiff = g.sub(g.gather(traj, st.pos_cells), g.const(st.traj_targets))
    l_pred = g.scale(g.sum(g.smooth_l1(tdiff, cfg.smooth_l1_beta)), 1.0 / n_pos)
    return l_det, l_pred


def forward_e2e(st: SceneTensors, params: dict[str, np.ndarray], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell detection outputs (M, 6: logit + 5 regressands) and waypoint offsets (M, 2*T_fut)."""
    g = Graph()
    pn = bind(g, params)
    cls, reg, traj = heads(g, pn, trunk(g, pn, st, cfg))
    return np.concatenate([g.value(cls), g.value(reg)], axis=1), g.value(traj)


def decode(det_out: np.ndarray, traj_out: np.ndarray, cfg: ModelConfig) -> list[PredictedTrajectory]:
    """Threshold objectness, build boxes from cell centres + offsets, then NMS."""
    score = 1.0 / (1.0 + np.exp(-det_out[:, 0]))
    centers = cfg.spec.cell_centers()
    cand = np.nonzero(score > cfg.score_threshold)[0]
    boxes, trajs = [], []
    for cell in cand:
        dx, dy, dl, dw, yaw = det_out[cell, 1:]
        x, y = centers[cell, 0] + dx, centers[cell, 1] + dy
        boxes.append(DetectionBox(float(x), float(y), max(cfg.ref_length + dl, 0.1),
                                  max(cfg.ref_width + dw, 0.1), float(yaw), float(score[cell])))
        trajs.append(np.array([x, y]) + traj_out[cell].reshape(cfg.t_fut, 2))
    return [PredictedTrajectory(boxes[i], trajs[i]) for i in nms(boxes, cfg.nms_iou)]


def predict(st: SceneTensors, params, cfg: ModelConfig) -> list[PredictedTrajectory]:
    return decode(*forward_e2e(st, params, cfg), cfg)
