"""Synthetic multi-agent driving scenes and their line-delimited file format.

Randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``),
whose stream is fixed across platforms for a given seed. Batch generation
derives each scene's seed from ``(master_seed, index)`` through
``np.random.SeedSequence`` so scenes can be regenerated independently.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]; in-range values are returned untouched."""
    if -math.pi < a <= math.pi:
        return float(a)
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ValueError(f"non-finite pose {self}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class ObjectState:
    x: float
    y: float
    length: float
    width: float
    yaw: float
    speed: float
    heading: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"object extents must be positive, got {self.length}x{self.width}")
        if self.speed < 0:
            raise ValueError(f"negative speed {self.speed}")


@dataclass(eq=False)
class PointCloudFrame:
    """Points (K, 3) for one agent at one frame, in the frame named by ``frame``.

    ``frame`` is ``"local"`` for the sensing agent's own coordinates or
    ``"ego"`` once transformed.
    """

    agent: int
    t: int
    timestamp: float
    points: np.ndarray
    frame: str = "local"

    def __eq__(self, other):
        if not isinstance(other, PointCloudFrame):
            return NotImplemented
        return (
            (self.agent, self.t, self.timestamp, self.frame) == (other.agent, other.t, other.timestamp, other.frame)
            and self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
        )


@dataclass(eq=False)
class SceneObject:
    id: int
    state: ObjectState
    future: np.ndarray  # (T_fut, 2) future centers

    def __eq__(self, other):
        if not isinstance(other, SceneObject):
            return NotImplemented
        return self.id == other.id and self.state == other.state and np.array_equal(self.future, other.future)


@dataclass(eq=False)
class Scene:
    scene_id: str
    seed: int
    frame_period: float
    t_hist: int
    t_fut: int
    poses: list[list[AgentPose]]  # [agent][frame], frame t_hist-1 is current
    frames: list[list[PointCloudFrame]]
    objects: list[SceneObject]

    @property
    def n_agents(self) -> int:
        return len(self.poses)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            (self.scene_id, self.seed, self.frame_period, self.t_hist, self.t_fut)
            == (other.scene_id, other.seed, other.frame_period, other.t_hist, other.t_fut)
            and self.poses == other.poses
            and self.frames == other.frames
            and self.objects == other.objects
        )


EVAL_X = (-102.4, 102.4)
EVAL_Y = (-40.0, 40.0)


@dataclass
class ScenarioConfig:
    n_agents: int = 2
    n_objects: int = 6
    x_extent: tuple[float, float] = (-24.0, 24.0)
    y_extent: tuple[float, float] = (-10.0, 10.0)
    speed_range: tuple[float, float] = (0.0, 3.0)
    rays: int = 1500
    range_limit: float = 50.0
    noise: float = 0.02
    seed: int = 0
    t_hist: int = 5
    t_fut: int = 6
    frame_period: float = 0.5
    heading_noise: float = 0.03
    yaw_jitter: float = 0.25
    length_range: tuple[float, float] = (3.8, 4.8)
    width_range: tuple[float, float] = (1.7, 2.1)
    object_height: float = 1.6
    min_range: float = 2.0
    min_spacing: float = 6.0

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ValueError("scenario needs at least one agent")
        if self.n_agents > 4:
            raise ValueError(f"at most 4 agents supported, got {self.n_agents}")
        if self.n_objects < 0 or self.rays < 0:
            raise ValueError("object and ray counts must be non-negative")
        lo_x, hi_x = self.x_extent
        lo_y, hi_y = self.y_extent
        if not (EVAL_X[0] <= lo_x < hi_x <= EVAL_X[1] and EVAL_Y[0] <= lo_y < hi_y <= EVAL_Y[1]):
            raise ValueError(f"extents {self.x_extent}, {self.y_extent} exceed the evaluation range")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            raise ValueError(f"bad speed range {self.speed_range}")
        if self.range_limit <= 0 or self.noise < 0:
            raise ValueError("range limit must be positive and noise non-negative")


def derive_seed(master_seed: int, index: int) -> int:
    """Per-scene seed from the master seed and scene index."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def box_corners(x, y, length, width, yaw) -> np.ndarray:
    """Four BEV corners, counter-clockwise."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def ray_box_distances(origin: np.ndarray, dirs: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to the first crossing of a polygon edge (inf if none)."""
    best = np.full(len(dirs), np.inf)
    for k in range(len(corners)):
        a = corners[k]
        e = corners[(k + 1) % len(corners)] - a
        denom = dirs[:, 0] * e[1] - dirs[:, 1] * e[0]
        ao = a - origin
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ao[0] * e[1] - ao[1] * e[0]) / denom
            u = (ao[0] * dirs[:, 1] - ao[1] * dirs[:, 0]) / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
        best = np.where(ok & (t < best), t, best)
    return best


def cast_rays(pose: AgentPose, objects: list[ObjectState], cfg: ScenarioConfig, rng: np.random.Generator):
    """Cast ``cfg.rays`` BEV rays from ``pose``.

    Returns world-frame points (K, 3) before noise and the index of the box
    each point landed on (-1 for ground).
    """
    n = cfg.rays
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    az = (np.arange(n) + rng.uniform(0.0, 1.0, n)) * (2.0 * math.pi / n)
    ground = rng.uniform(cfg.min_range, cfg.range_limit, n)
    dirs = np.stack([np.cos(az), np.sin(az)], axis=1)
    origin = np.array([pose.x, pose.y])
    hit_d = np.full(n, np.inf)
    hit_id = np.full(n, -1, dtype=np.int64)
    for i, ob in enumerate(objects):
        d = ray_box_distances(origin, dirs, box_corners(ob.x, ob.y, ob.length, ob.width, ob.yaw))
        closer = d < hit_d
        hit_d = np.where(closer, d, hit_d)
        hit_id = np.where(closer, i, hit_id)
    on_box = hit_d < ground
    dist = np.where(on_box, hit_d, ground)
    z = np.where(on_box, cfg.object_height * (1.0 - dist / ground), 0.0)
    pts = np.column_stack([origin[0] + dirs[:, 0] * dist, origin[1] + dirs[:, 1] * dist, z])
    return pts, np.where(on_box, hit_id, -1)


def world_to_local(points: np.ndarray, pose: AgentPose) -> np.ndarray:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx = points[:, 0] - pose.x
    dy = points[:, 1] - pose.y
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, points[:, 2]])


def sample_lidar(
    pose: AgentPose,
    objects: list[ObjectState],
    cfg: ScenarioConfig,
    rng: np.random.Generator | None = None,
    agent: int = 0,
    t: int = 0,
    timestamp: float = 0.0,
) -> PointCloudFrame:
    """Simulated sweep for one agent, returned in that agent's local frame."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    pts, _ = cast_rays(pose, objects, cfg, rng)
    if cfg.noise > 0 and len(pts):
        pts = pts + rng.normal(0.0, cfg.noise, pts.shape)
    local = world_to_local(pts, pose)
    keep = np.hypot(local[:, 0], local[:, 1]) <= cfg.range_limit
    return PointCloudFrame(agent=agent, t=t, timestamp=timestamp, points=local[keep])


def _place(rng, cfg: ScenarioConfig, taken: list[tuple[float, float]], spacing: float, margin: float):
    for _ in range(200):
        x = rng.uniform(cfg.x_extent[0] + margin, cfg.x_extent[1] - margin)
        y = rng.uniform(cfg.y_extent[0] + margin, cfg.y_extent[1] - margin)
        if all(math.hypot(x - a, y - b) >= spacing for a, b in taken):
            return x, y
    return None


def generate_scene(cfg: ScenarioConfig, scene_id: str | None = None) -> Scene:
    """Deterministic scene for ``cfg.seed``.

    Agent 0 is the ego and sits at the origin facing +x. Objects move at
    constant speed along a heading perturbed each frame by at most
    ``heading_noise`` radians.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_frames = cfg.t_hist + cfg.t_fut
    dt = cfg.frame_period

    agent_xy = [(0.0, 0.0)]
    poses = [AgentPose(0.0, 0.0, 0.0)]
    for _ in range(1, cfg.n_agents):
        spot = _place(rng, cfg, agent_xy, 8.0, 2.0)
        if spot is None:
            spot = (rng.uniform(*cfg.x_extent), rng.uniform(*cfg.y_extent))
        agent_xy.append(spot)
        poses.append(AgentPose(spot[0], spot[1], rng.uniform(-math.pi, math.pi)))

    tracks = []  # per object: list of ObjectState over all frames
    taken = list(agent_xy)
    spacing = [4.0] * len(agent_xy)
    for _ in range(cfg.n_objects):
        spot = None
        for _try in range(200):
            cand = _place(rng, cfg, [], 0.0, 2.5)
            if all(math.hypot(cand[0] - a, cand[1] - b) >= sp for (a, b), sp in zip(taken, spacing)):
                spot = cand
                break
        if spot is None:
            continue
        taken.append(spot)
        spacing.append(cfg.min_spacing)
        base = 0.0 if rng.uniform() < 0.5 else math.pi
        heading = wrap_angle(base + rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter))
        speed = rng.uniform(*cfg.speed_range)
        length = rng.uniform(*cfg.length_range)
        width = rng.uniform(*cfg.width_range)
        noise = rng.uniform(-cfg.heading_noise, cfg.heading_noise, n_frames)
        # integrate from the current frame outward in both directions
        cur = cfg.t_hist - 1
        states: list[ObjectState | None] = [None] * n_frames
        states[cur] = ObjectState(spot[0], spot[1], length, width, heading, speed, heading)
        for k in range(cur + 1, n_frames):
            p = states[k - 1]
            h = wrap_angle(p.heading + noise[k])
            states[k] = ObjectState(p.x + speed * dt * math.cos(h), p.y + speed * dt * math.sin(h),
                                    length, width, h, speed, h)
        for k in range(cur - 1, -1, -1):
            p = states[k + 1]
            h = wrap_angle(p.heading - noise[k])
            states[k] = ObjectState(p.x - speed * dt * math.cos(p.heading), p.y - speed * dt * math.sin(p.heading),
                                    length, width, h, speed, h)
        tracks.append(states)

    frames, pose_seq = [], []
    for a, pose in enumerate(poses):
        seq, pframes = [], []
        for k in range(cfg.t_hist):
            seq.append(pose)
            objs = [tr[k] for tr in tracks]
            ts = round((k - (cfg.t_hist - 1)) * dt, 9)
            pframes.append(sample_lidar(pose, objs, cfg, rng, agent=a, t=k, timestamp=ts))
        pose_seq.append(seq)
        frames.append(pframes)

    cur = cfg.t_hist - 1
    objects = [
        SceneObject(i, tr[cur], np.array([[s.x, s.y] for s in tr[cur + 1:]]).reshape(cfg.t_fut, 2))
        for i, tr in enumerate(tracks)
    ]
    return Scene(
        scene_id=scene_id if scene_id is not None else f"scene-{cfg.seed}",
        seed=int(cfg.seed),
        frame_period=dt,
        t_hist=cfg.t_hist,
        t_fut=cfg.t_fut,
        poses=pose_seq,
        frames=frames,
        objects=objects,
    )


# ---------------------------------------------------------------- file format

class SceneFormatError(ValueError):
    pass


_RECORD_KEYS = {
    "header": {"record", "version", "scene_id", "seed", "n_agents", "t_hist", "t_fut", "frame_period", "n_objects"},
    "agent": {"record", "agent", "poses"},
    "frame": {"record", "agent", "t", "timestamp", "frame", "points"},
    "object": {"record", "id", "state", "future"},
    "end": {"record", "frames"},
}
_STATE_KEYS = {f.name for f in fields(ObjectState)}


def scene_to_lines(scene: Scene) -> list[str]:
    def dump(obj):
        return json.dumps(obj, separators=(",", ":"))

    lines = [dump({
        "record": "header", "version": FORMAT_VERSION, "scene_id": scene.scene_id, "seed": scene.seed,
        "n_agents": scene.n_agents, "t_hist": scene.t_hist, "t_fut": scene.t_fut,
        "frame_period": scene.frame_period, "n_objects": len(scene.objects),
    })]
    for a, seq in enumerate(scene.poses):
        lines.append(dump({"record": "agent", "agent": a, "poses": [[p.x, p.y, p.yaw] for p in seq]}))
    n_frames = 0
    for seq in scene.frames:
        for fr in seq:
            lines.append(dump({
                "record": "frame", "agent": fr.agent, "t": fr.t, "timestamp": fr.timestamp, "frame": fr.frame,
                "points": [float(v) for v in fr.points.reshape(-1)],
            }))
            n_frames += 1
    for ob in scene.objects:
        st = {k: float(getattr(ob.state, k)) for k in sorted(_STATE_KEYS)}
        lines.append(dump({"record": "object", "id": ob.id, "state": st,
                           "future": [float(v) for v in ob.future.reshape(-1)]}))
    lines.append(dump({"record": "end", "frames": n_frames}))
    return lines


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text("\n".join(scene_to_lines(scene)) + "\n", encoding="utf-8")


def _check_keys(rec: dict, kind: str, lineno: int) -> None:
    expected = _RECORD_KEYS[kind]
    extra = set(rec) - expected
    if extra:
        raise SceneFormatError(f"line {lineno}: unknown field(s) {sorted(extra)} in {kind} record")
    missing = expected - set(rec)
    if missing:
        raise SceneFormatError(f"line {lineno}: {kind} record missing field(s) {sorted(missing)}")


def parse_scene(lines: list[str], source: str = "<scene>") -> Scene:
    records = []
    for lineno, raw in enumerate(lines, 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"{source} line {lineno}: malformed record: {exc.msg}") from exc
        kind = rec.get("record") if isinstance(rec, dict) else None
        if kind not in _RECORD_KEYS:
            raise SceneFormatError(f"{source} line {lineno}: unknown record type {kind!r}")
        _check_keys(rec, kind, lineno)
        records.append((lineno, rec))

    if not records or records[0][1]["record"] != "header":
        raise SceneFormatError(f"{source}: missing section 'header'")
    head = records[0][1]
    if head["version"] != FORMAT_VERSION:
        raise SceneFormatError(f"{source}: unsupported format version {head['version']}")
    n_agents, t_hist, t_fut = head["n_agents"], head["t_hist"], head["t_fut"]

    poses: dict[int, list[AgentPose]] = {}
    frames: dict[tuple[int, int], PointCloudFrame] = {}
    objects: list[SceneObject] = []
    end = None
    for lineno, rec in records[1:]:
        kind = rec["record"]
        if end is not None:
            raise SceneFormatError(f"{source} line {lineno}: record after 'end'")
        if kind == "header":
            raise SceneFormatError(f"{source} line {lineno}: duplicate header")
        if kind == "agent":
            if len(rec["poses"]) != t_hist:
                raise SceneFormatError(f"{source} line {lineno}: agent {rec['agent']} has {len(rec['poses'])} poses, expected {t_hist}")
            poses[rec["agent"]] = [AgentPose(*p) for p in rec["poses"]]
        elif kind == "frame":
            flat = np.array(rec["points"], dtype=np.float64)
            if flat.size % 3:
                raise SceneFormatError(f"{source} line {lineno}: field 'points' length {flat.size} not a multiple of 3")
            frames[(rec["agent"], rec["t"])] = PointCloudFrame(
                rec["agent"], rec["t"], rec["timestamp"], flat.reshape(-1, 3), rec["frame"])
        elif kind == "object":
            st = rec["state"]
            if set(st) != _STATE_KEYS:
                raise SceneFormatError(f"{source} line {lineno}: field 'state' keys {sorted(st)} != {sorted(_STATE_KEYS)}")
            fut = np.array(rec["future"], dtype=np.float64)
            if fut.size != 2 * t_fut:
                raise SceneFormatError(f"{source} line {lineno}: field 'future' has {fut.size} values, expected {2 * t_fut}")
            objects.append(SceneObject(rec["id"], ObjectState(**st), fut.reshape(t_fut, 2)))
        elif kind == "end":
            end = rec

    for a in range(n_agents):
        if a not in poses:
            raise SceneFormatError(f"{source}: missing section 'agent {a}'")
        for t in range(t_hist):
            if (a, t) not in frames:
                raise SceneFormatError(f"{source}: missing section 'frame agent={a} t={t}'")
    if len(objects) != head["n_objects"]:
        raise SceneFormatError(f"{source}: missing section 'object' ({len(objects)} of {head['n_objects']})")
    if end is None:
        raise SceneFormatError(f"{source}: missing section 'end'")
    if end["frames"] != len(frames):
        raise SceneFormatError(f"{source}: end record counts {end['frames']} frames, found {len(frames)}")

    return Scene(
        scene_id=head["scene_id"], seed=head["seed"], frame_period=head["frame_period"],
        t_hist=t_hist, t_fut=t_fut,
        poses=[poses[a] for a in range(n_agents)],
        frames=[[frames[(a, t)] for t in range(t_hist)] for a in range(n_agents)],
        objects=objects,
    )


def read_scene(path) -> Scene:
    path = Path(path)
    return parse_scene(path.read_text(encoding="utf-8").splitlines(), source=str(path))
