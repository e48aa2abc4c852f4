"""Ego-frame transforms, voxelization, BEV cells and reconstruction masking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import AgentPose, PointCloudFrame


@dataclass(frozen=True)
class VoxelSpec:
    x_range: tuple[float, float] = (-102.4, 102.4)
    y_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (-0.4, 2.0)
    voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.2)
    max_points_per_voxel: int = 5
    max_voxels: int = 32000
    bev_cell: float = 0.4

    def __post_init__(self):
        for (lo, hi), size, axis in zip((self.x_range, self.y_range, self.z_range), self.voxel_size, "xyz"):
            if not hi > lo or size <= 0:
                raise ValueError(f"bad {axis} range {lo, hi} or voxel size {size}")
            n = (hi - lo) / size
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"{axis} range {lo, hi} not divisible by voxel size {size}")
        for (lo, hi), size, axis in zip((self.x_range, self.y_range), self.voxel_size[:2], "xy"):
            ratio = self.bev_cell / size
            if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
                raise ValueError(f"BEV cell {self.bev_cell} is not an integer multiple of the {axis} voxel size {size}")
            n = (hi - lo) / self.bev_cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"{axis} range {lo, hi} not divisible by BEV cell {self.bev_cell}")
        if self.max_points_per_voxel < 1 or self.max_voxels < 1:
            raise ValueError("voxel capacities must be positive")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / s))
            for (lo, hi), s in zip((self.x_range, self.y_range, self.z_range), self.voxel_size)
        )

    @property
    def bev_shape(self) -> tuple[int, int]:
        return (int(round((self.x_range[1] - self.x_range[0]) / self.bev_cell)),
                int(round((self.y_range[1] - self.y_range[0]) / self.bev_cell)))

    @property
    def n_cells(self) -> int:
        nx, ny = self.bev_shape
        return nx * ny

    @property
    def z_levels(self) -> int:
        return self.grid_shape[2]

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) centers; cell id = ix * ny + iy."""
        nx, ny = self.bev_shape
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        cx = self.x_range[0] + (ix.reshape(-1) + 0.5) * self.bev_cell
        cy = self.y_range[0] + (iy.reshape(-1) + 0.5) * self.bev_cell
        return np.column_stack([cx, cy])


@dataclass(eq=False)
class VoxelGrid:
    coords: np.ndarray  # (V, 3) int voxel indices, first-seen order
    points: np.ndarray  # (V, max_points, 3), unused slots zero
    counts: np.ndarray  # (V,)
    dropped_out_of_range: int = 0
    dropped_over_cap: int = 0
    dropped_over_limit: int = 0

    @property
    def n_kept(self) -> int:
        return int(self.counts.sum())


@dataclass(eq=False)
class BevMaskPlan:
    nonempty: np.ndarray  # sorted cell ids
    masked: np.ndarray  # sorted subset of nonempty
    target_points: list[np.ndarray] = field(default_factory=list)  # per masked cell, ego frame
    occupancy: np.ndarray | None = None  # (len(masked), z_levels) in {0, 1}


def pose_matrix(p: AgentPose) -> np.ndarray:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]])


def transform_points(points: np.ndarray, src: AgentPose, ego: AgentPose) -> np.ndarray:
    """Rigid BEV transform from ``src``-local to ``ego``-local coordinates; z unchanged."""
    m = np.linalg.inv(pose_matrix(ego)) @ pose_matrix(src)
    out = np.empty_like(points, dtype=np.float64)
    out[:, 0] = m[0, 0] * points[:, 0] + m[0, 1] * points[:, 1] + m[0, 2]
    out[:, 1] = m[1, 0] * points[:, 0] + m[1, 1] * points[:, 1] + m[1, 2]
    out[:, 2] = points[:, 2]
    return out


def transform_to_ego(frame: PointCloudFrame, src: AgentPose, ego: AgentPose) -> PointCloudFrame:
    return PointCloudFrame(frame.agent, frame.t, frame.timestamp, transform_points(frame.points, src, ego), "ego")


def _in_range(points: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    ok = np.ones(len(points), dtype=bool)
    for axis, (lo, hi) in enumerate((spec.x_range, spec.y_range, spec.z_range)):
        ok &= (points[:, axis] >= lo) & (points[:, axis] < hi)
    return ok


def voxel_indices(points: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    mins = np.array([spec.x_range[0], spec.y_range[0], spec.z_range[0]])
    idx = np.floor((points - mins) / np.array(spec.voxel_size)).astype(np.int64)
    return np.minimum(idx, np.array(spec.grid_shape) - 1)


def voxelize(points: np.ndarray, spec: VoxelSpec) -> VoxelGrid:
    """Hard voxelization keeping the first points (input order) of each voxel."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cap = spec.max_points_per_voxel
    ok = _in_range(points, spec)
    pts = points[ok]
    n_out = int(len(points) - ok.sum())
    if len(pts) == 0:
        return VoxelGrid(np.zeros((0, 3), np.int64), np.zeros((0, cap, 3)), np.zeros(0, np.int64), n_out)
    idx = voxel_indices(pts, spec)
    nx, ny, nz = spec.grid_shape
    key = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")  # voxels by first appearance
    rank_of_voxel = np.empty(len(uniq), np.int64)
    rank_of_voxel[order] = np.arange(len(uniq))
    vox = rank_of_voxel[inverse]
    # slot of each point inside its voxel, counting in input order
    by_voxel = np.argsort(vox, kind="stable")
    starts = np.searchsorted(vox[by_voxel], np.arange(len(uniq)))
    slot = np.empty(len(pts), np.int64)
    slot[by_voxel] = np.arange(len(pts)) - starts[vox[by_voxel]]
    in_cap = slot < cap
    in_limit = vox < spec.max_voxels
    n_vox = min(len(uniq), spec.max_voxels)
    keep = in_cap & in_limit
    grid_pts = np.zeros((n_vox, cap, 3))
    grid_pts[vox[keep], slot[keep]] = pts[keep]
    counts = np.bincount(vox[keep], minlength=n_vox)[:n_vox]
    coords = idx[first[order[:n_vox]]]
    return VoxelGrid(
        coords=coords,
        points=grid_pts,
        counts=counts,
        dropped_out_of_range=n_out,
        dropped_over_cap=int((~in_cap & in_limit).sum()),
        dropped_over_limit=int((~in_limit).sum()),
    )


def cell_ids(points: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    """BEV cell id per point, -1 outside the 3-D range."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ok = _in_range(points, spec)
    nx, ny = spec.bev_shape
    ix = np.floor((points[:, 0] - spec.x_range[0]) / spec.bev_cell).astype(np.int64)
    iy = np.floor((points[:, 1] - spec.y_range[0]) / spec.bev_cell).astype(np.int64)
    ids = np.clip(ix, 0, nx - 1) * ny + np.clip(iy, 0, ny - 1)
    return np.where(ok, ids, -1)


def nonempty_cells(points: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    ids = cell_ids(points, spec)
    return np.unique(ids[ids >= 0])


def mask_count(k: int, ratio: float) -> int:
    # rounding first keeps e.g. 0.3 * 10 from ceiling to 4
    return min(k, math.ceil(round(ratio * k, 9)))


def mask_grids(nonempty, ratio: float = 0.7, seed: int = 0) -> BevMaskPlan:
    """Uniformly choose ``ceil(ratio * K)`` of the ``K`` non-empty cells to mask."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    nonempty = np.unique(np.asarray(nonempty, dtype=np.int64))
    k = mask_count(len(nonempty), ratio)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(nonempty), size=k, replace=False) if k else np.zeros(0, np.int64)
    return BevMaskPlan(nonempty=nonempty, masked=np.sort(nonempty[pick]))


def build_targets(merged_points: np.ndarray, plan: BevMaskPlan, spec: VoxelSpec) -> BevMaskPlan:
    """Fill per-masked-cell point targets and z-level occupancy from the merged ego-frame cloud."""
    merged_points = np.asarray(merged_points, dtype=np.float64).reshape(-1, 3)
    ids = cell_ids(merged_points, spec)
    zl = voxel_indices(merged_points, spec)[:, 2]
    nz = spec.z_levels
    targets, occ = [], np.zeros((len(plan.masked), nz))
    for row, cell in enumerate(plan.masked):
        sel = ids == cell
        if not sel.any():
            raise ValueError(f"masked cell {cell} has no merged points")
        targets.append(merged_points[sel])
        occ[row, np.unique(zl[sel])] = 1.0
    return BevMaskPlan(plan.nonempty, plan.masked, targets, occ)


def cell_features(points: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    """Per-cell encoder input, (n_cells, z_levels + 3).

    Columns: log1p(point count) per z level / 2, mean x and y offset from the
    cell center in half-cell units, log1p(total count) / 3. Counts come from
    the voxelized cloud, so the per-voxel cap applies. Empty cells are zero.
    """
    nz = spec.z_levels
    feats = np.zeros((spec.n_cells, nz + 3))
    grid = voxelize(points, spec)
    if grid.n_kept == 0:
        return feats
    valid = np.arange(grid.points.shape[1])[None, :] < grid.counts[:, None]
    pts = grid.points[valid]
    zlev = np.repeat(grid.coords[:, 2], grid.counts)
    cid = cell_ids(pts, spec)
    counts = np.zeros((spec.n_cells, nz))
    np.add.at(counts, (cid, zlev), 1.0)
    total = counts.sum(axis=1)
    centers = spec.cell_centers()
    off = np.zeros((spec.n_cells, 2))
    np.add.at(off, cid, pts[:, :2])
    has = total > 0
    off[has] = (off[has] / total[has, None] - centers[has]) / (spec.bev_cell / 2.0)
    feats[:, :nz] = np.log1p(counts) / 2.0
    feats[:, nz:nz + 2] = off
    feats[:, nz + 2] = np.log1p(total) / 3.0
    return feats
