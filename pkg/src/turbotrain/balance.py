"""Gradient-conflict suppression, the free/balanced schedule and the joint training loop.

Two gradient groups over the shared trunk: detection (classification +
box regression) and prediction. A step is *free* when ``s mod (n+m) < n``:
one backward pass on the summed loss. Otherwise it is *balanced*: both task
gradients are computed separately and, if they conflict (negative inner
product), detection's gradient loses its component along prediction's before
the two are added. Head parameters always receive only their own task's
gradient.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gradcore import Graph, backward, flatten_gradients, unflatten_gradients
from .model import DET_PREFIX, PRED_PREFIX, ModelConfig, SceneTensors, bind, head_names, heads, shared_names, task_losses, trunk
from .optim import AdamW, OptimizerConfig
from .scene import derive_seed

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
FREE, BALANCED = "free", "balanced"


def conflict_delta(g_i: np.ndarray, g_j: np.ndarray) -> float:
    """Inner product of two flat task gradients."""
    g_i, g_j = np.asarray(g_i, dtype=np.float64), np.asarray(g_j, dtype=np.float64)
    if g_i.shape != g_j.shape or g_i.ndim != 1:
        raise ValueError(f"task gradients must be equal-length vectors, got {g_i.shape} and {g_j.shape}")
    return float(np.dot(g_i, g_j))


def _project_off(g: np.ndarray, onto: np.ndarray, delta: float) -> np.ndarray:
    nn = float(np.dot(onto, onto))
    if delta >= 0 or nn < NORM_FLOOR:
        return g
    return g - (delta / nn) * onto


def suppress_conflict(g_i: np.ndarray, g_j: np.ndarray, symmetric: bool = False) -> np.ndarray:
    """Combine two task gradients, removing ``g_i``'s conflict with ``g_j``.

    Non-conflicting pairs (inner product >= 0, or a vanishing ``g_j``) are
    simply summed. Otherwise the result is ``g_i + (1 - delta/|g_j|^2) g_j``.
    With ``symmetric`` both gradients are projected off each other first.
    """
    g_i, g_j = np.asarray(g_i, dtype=np.float64), np.asarray(g_j, dtype=np.float64)
    delta = conflict_delta(g_i, g_j)
    nn = float(np.dot(g_j, g_j))
    if delta >= 0 or nn < NORM_FLOOR:
        return g_i + g_j
    if symmetric:
        return _project_off(g_i, g_j, delta) + _project_off(g_j, g_i, delta)
    return g_i + (1.0 - delta / nn) * g_j


@dataclass(frozen=True)
class BalanceSchedule:
    n: int = 2000  # free steps per cycle
    m: int = 1000  # balanced steps per cycle
    step: int = 0

    def __post_init__(self):
        if self.n < 0 or self.m < 0 or self.n + self.m < 1:
            raise ValueError(f"invalid schedule (n={self.n}, m={self.m}): need n, m >= 0 and n + m >= 1")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")

    @property
    def cycle_pos(self) -> int:
        return self.step % (self.n + self.m)

    @property
    def phase(self) -> str:
        return FREE if self.cycle_pos < self.n else BALANCED

    def advance(self) -> "BalanceSchedule":
        return replace(self, step=self.step + 1)


def hybrid_combine(schedule: BalanceSchedule, g_det: np.ndarray, g_pred: np.ndarray,
                   symmetric: bool = False) -> tuple[np.ndarray, BalanceSchedule]:
    if schedule.phase == FREE:
        if np.shape(g_det) != np.shape(g_pred):
            raise ValueError("task gradients differ in length")
        return np.asarray(g_det, dtype=np.float64) + np.asarray(g_pred, dtype=np.float64), schedule.advance()
    return suppress_conflict(g_det, g_pred, symmetric), schedule.advance()


def parse_balance(text: str) -> tuple[int, int]:
    """``"N,M"`` -> (N, M)."""
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"balance must look like N,M, got {text!r}")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"balance must look like N,M with integers, got {text!r}") from None
    BalanceSchedule(n, m)
    return n, m


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    balance: tuple[int, int] | None = None  # None: every step free
    symmetric: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.balance is not None:
            BalanceSchedule(*self.balance)


@dataclass
class StepRecord:
    step: int
    phase: str
    delta: float | None
    norm_det: float | None
    norm_pred: float | None
    cosine: float | None
    loss_det: float
    loss_pred: float
    combined_dot_pred: float | None = None  # in-memory only, for the alignment check

    CSV_FIELDS = ("step", "phase", "delta", "norm_det", "norm_pred", "cosine", "loss_det", "loss_pred")

    def csv_row(self) -> dict:
        return {k: ("" if getattr(self, k) is None else getattr(self, k)) for k in self.CSV_FIELDS}


class TrainingDiverged(FloatingPointError):
    def __init__(self, record: StepRecord):
        super().__init__(f"non-finite loss at step {record.step} (L_det={record.loss_det}, L_pred={record.loss_pred})")
        self.record = record


def batch_losses(g: Graph, pn: dict[str, int], batch: list[SceneTensors], cfg: ModelConfig) -> tuple[int, int]:
    """Batch-mean (L_det, L_pred) node ids."""
    dets, preds = [], []
    for st in batch:
        ld, lp = task_losses(g, heads(g, pn, trunk(g, pn, st, cfg)), st, cfg)
        dets.append(ld)
        preds.append(lp)
    ld, lp = dets[0], preds[0]
    for a, b in zip(dets[1:], preds[1:]):
        ld, lp = g.add(ld, a), g.add(lp, b)
    return g.scale(ld, 1.0 / len(batch)), g.scale(lp, 1.0 / len(batch))


def _stats(g_det: np.ndarray, g_pred: np.ndarray) -> tuple[float, float, float, float]:
    delta = conflict_delta(g_det, g_pred)
    nd, np_ = float(np.linalg.norm(g_det)), float(np.linalg.norm(g_pred))
    cos = delta / (nd * np_) if nd > 0 and np_ > 0 else 0.0
    return delta, nd, np_, float(min(max(cos, -1.0), 1.0))


def train_step(params: dict[str, np.ndarray], batch: list[SceneTensors], cfg: ModelConfig,
               schedule: BalanceSchedule, symmetric: bool = False):
    """Gradients for one step. Returns ``(grads, record, next_schedule)``.

    Free phase: one backward on L_det + L_pred. Balanced phase: one backward
    per task; shared parameters get the combined gradient, each head only its
    own task's.
    """
    g = Graph()
    pn = bind(g, params)
    ld, lp = batch_losses(g, pn, batch, cfg)
    vd, vp = float(g.value(ld)), float(g.value(lp))
    phase = schedule.phase
    rec = StepRecord(schedule.step, phase, None, None, None, None, vd, vp)
    if not (math.isfinite(vd) and math.isfinite(vp)):
        raise TrainingDiverged(rec)
    if phase == FREE:
        gm = backward(g, g.add(ld, lp))
        return {k: gm[pn[k]] for k in params}, rec, schedule.advance()
    shared = shared_names(params)
    order = [pn[k] for k in shared]
    gm_d = backward(g, ld)
    gm_p = backward(g, lp)
    g_det = flatten_gradients(gm_d, order)
    g_pred = flatten_gradients(gm_p, order)
    combined, nxt = hybrid_combine(schedule, g_det, g_pred, symmetric)
    rec.delta, rec.norm_det, rec.norm_pred, rec.cosine = _stats(g_det, g_pred)
    rec.combined_dot_pred = float(np.dot(combined, g_pred))
    shapes = {pn[k]: params[k].shape for k in shared}
    by_id = unflatten_gradients(combined, order, shapes)
    grads = {k: by_id[pn[k]] for k in shared}
    for k in head_names(params, DET_PREFIX):
        grads[k] = gm_d[pn[k]]
    for k in head_names(params, PRED_PREFIX):
        grads[k] = gm_p[pn[k]]
    return grads, rec, nxt


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_run(scenes: list[SceneTensors], params: dict[str, np.ndarray], cfg: ModelConfig,
              tcfg: TrainConfig) -> tuple[dict[str, np.ndarray], list[StepRecord]]:
    """Joint training of trunk and heads; returns (trained params, step log).

    ``params`` is copied, not modified. With ``tcfg.balance`` unset every step
    is free, i.e. plain joint training on the summed loss.
    """
    tcfg.validate()
    if not scenes:
        raise ValueError("training needs at least one scene")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    n_batches = math.ceil(len(scenes) / tcfg.batch_size)
    total = tcfg.epochs * n_batches
    schedule = BalanceSchedule(*tcfg.balance) if tcfg.balance else BalanceSchedule(max(total, 1), 0)
    opt = AdamW(params, tcfg.optimizer, total_steps=total)
    rng = np.random.default_rng(derive_seed(tcfg.seed, 3))
    records: list[StepRecord] = []
    for epoch in range(tcfg.epochs):
        for idx in _batches(len(scenes), tcfg.batch_size, rng):
            try:
                grads, rec, schedule = train_step(params, [scenes[i] for i in idx], cfg, schedule, tcfg.symmetric)
            except TrainingDiverged as exc:
                records.append(exc.record)
                log.error("%s", exc)
                raise
            records.append(rec)
            opt.step(grads)
        last = records[-n_batches:]
        log.info("train epoch %d: L_det %.4f L_pred %.4f", epoch,
                 np.mean([r.loss_det for r in last]), np.mean([r.loss_pred for r in last]))
    return params, records


def diagnose_conflicts(params: dict[str, np.ndarray], scenes: list[SceneTensors], cfg: ModelConfig,
                       steps: int, batch_size: int = 4, seed: int = 0) -> list[StepRecord]:
    """Per-batch conflict statistics without touching the parameters."""
    if not scenes:
        raise ValueError("diagnosis needs at least one scene")
    rng = np.random.default_rng(derive_seed(seed, 4))
    schedule = BalanceSchedule(0, 1)
    out: list[StepRecord] = []
    batches: list[np.ndarray] = []
    while len(out) < steps:
        if not batches:
            batches = _batches(len(scenes), batch_size, rng)
        idx = batches.pop(0)
        _, rec, schedule = train_step(params, [scenes[i] for i in idx], cfg, schedule)
        rec.phase = "diagnose"
        out.append(rec)
    return out


def write_step_log(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=StepRecord.CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.csv_row())
