"""Strategy legs (one-time, pretrain-only, turbotrain) and held-out evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .balance import StepRecord, TrainConfig, train_run
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, SceneTensors, init_params, predict, prepare_scene, shared_names
from .pretrain import PretrainConfig, pretrain_run
from .scene import ScenarioConfig, derive_seed, generate_scene

log = logging.getLogger(__name__)

STRATEGIES = ("one-time", "pretrain-only", "turbotrain")


def check_strategy(name: str) -> str:
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    return name


def evaluate_params(params: dict[str, np.ndarray], scenes: list[SceneTensors], cfg: ModelConfig) -> MetricsReport:
    rows = []
    for st in scenes:
        out = predict(st, params, cfg)
        rows.append((st.scene_id, [p.box for p in out], [p.waypoints for p in out], st.gt_boxes, st.gt_futures))
    return evaluate(rows, iou_thr=0.5)


def initial_params(cfg: ModelConfig, seed: int, trunk: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Random init; shared entries are replaced by ``trunk`` when given.

    Head initialisation depends only on ``seed``, so strategies compared at
    one seed start their heads identically.
    """
    params = init_params(cfg, derive_seed(seed, 10))
    if trunk is not None:
        missing = [k for k in shared_names(params) if k not in trunk]
        if missing:
            raise ValueError(f"checkpoint lacks shared parameters {missing}")
        for k in shared_names(params):
            if trunk[k].shape != params[k].shape:
                raise ValueError(f"checkpoint parameter {k} has shape {trunk[k].shape}, model expects {params[k].shape}")
            params[k] = np.array(trunk[k])
    return params


def pretrain_trunk(train: list[SceneTensors], cfg: ModelConfig, pcfg: PretrainConfig):
    start = init_params(cfg, derive_seed(pcfg.seed, 10))
    return pretrain_run(train, start, cfg, pcfg)


def train_config_for(strategy: str, tcfg: TrainConfig) -> TrainConfig:
    """Balance only runs under turbotrain; the other strategies train freely."""
    check_strategy(strategy)
    if strategy == "turbotrain":
        if tcfg.balance is None:
            raise ValueError("turbotrain needs a balance schedule (n, m)")
        return tcfg
    return replace(tcfg, balance=None)


@dataclass
class LegResult:
    strategy: str
    seed: int
    report: MetricsReport
    params: dict[str, np.ndarray]
    steps: list[StepRecord]


def run_leg(strategy: str, train: list[SceneTensors], test: list[SceneTensors], cfg: ModelConfig,
            pcfg: PretrainConfig, tcfg: TrainConfig, seed: int,
            trunk: dict[str, np.ndarray] | None = None) -> LegResult:
    """One (strategy, seed) leg. ``trunk`` reuses an already pretrained trunk."""
    check_strategy(strategy)
    pcfg = replace(pcfg, seed=seed)
    tcfg = train_config_for(strategy, replace(tcfg, seed=seed))
    if strategy != "one-time" and trunk is None:
        trunk = pretrain_trunk(train, cfg, pcfg).params
    init = initial_params(cfg, seed, None if strategy == "one-time" else trunk)
    params, steps = train_run(train, init, cfg, tcfg)
    report = evaluate_params(params, test, cfg)
    log.info("%s seed %d: AP %.3f EPA %.3f", strategy, seed, report.ap, report.epa)
    return LegResult(strategy, seed, report, params, steps)


def make_scenes(master_seed: int, count: int, offset: int, scenario: ScenarioConfig, cfg: ModelConfig,
                prefix: str = "scene") -> list[SceneTensors]:
    """Scenes ``offset .. offset+count-1`` of the master seed's stream, model-ready."""
    out = []
    for i in range(offset, offset + count):
        sc = replace(scenario, seed=derive_seed(master_seed, i))
        out.append(prepare_scene(generate_scene(sc, f"{prefix}-{i:05d}"), cfg))
    return out


@dataclass
class LegOutcome:
    strategy: str
    seed: int
    n_train: int
    report: MetricsReport | None
    error: str | None = None
    seconds: float = 0.0


def compare_strategies(train: list[SceneTensors], test: list[SceneTensors], cfg: ModelConfig,
                       pcfg: PretrainConfig, tcfg: TrainConfig, strategies, seeds,
                       train_fraction: float = 1.0, pretrain_full: bool = True,
                       trunk_cache: dict | None = None) -> list[LegOutcome]:
    """Every (strategy, seed) leg; a failing leg is recorded and the rest proceed.

    With ``train_fraction < 1`` the heads and trunk are fine-tuned on the first
    part of ``train`` for proportionally more epochs (same step count), and the
    trunk is pretrained on all of ``train`` unless ``pretrain_full`` is off.
    One pretrained trunk per seed is shared by the strategies that need it;
    ``trunk_cache`` extends that sharing across calls with the same pretraining
    scenes and settings.
    """
    for s in strategies:
        check_strategy(s)
    n_sub = max(1, math.ceil(train_fraction * len(train)))
    subset = train[:n_sub]
    epochs = max(1, round(tcfg.epochs * len(train) / n_sub))
    out = []
    for seed in seeds:
        trunk, trunk_error = None, None
        if any(s != "one-time" for s in strategies):
            pre_scenes = train if pretrain_full else subset
            key = (seed, tuple(st.scene_id for st in pre_scenes), repr(pcfg), repr(cfg))
            try:
                if trunk_cache is not None and key in trunk_cache:
                    trunk = trunk_cache[key]
                else:
                    trunk = pretrain_trunk(pre_scenes, cfg, replace(pcfg, seed=seed)).params
                    if trunk_cache is not None:
                        trunk_cache[key] = trunk
            except Exception as exc:  # recorded per leg below
                trunk_error = f"pretraining failed: {exc}"
                log.error("seed %d: %s", seed, trunk_error)
        for s in strategies:
            t0 = time.perf_counter()
            if s != "one-time" and trunk is None:
                out.append(LegOutcome(s, seed, n_sub, None, trunk_error))
                continue
            try:
                leg = run_leg(s, subset, test, cfg, pcfg, replace(tcfg, epochs=epochs), seed, trunk=trunk)
                out.append(LegOutcome(s, seed, n_sub, leg.report, None, time.perf_counter() - t0))
            except Exception as exc:
                log.error("leg %s seed %d failed: %s", s, seed, exc)
                out.append(LegOutcome(s, seed, n_sub, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0))
    return out


SUMMARY_METRICS = ("epa", "ap", "ade", "fde", "mr")


def summarize(outcomes: list[LegOutcome]) -> list[dict]:
    """Mean and population std per metric per strategy, best EPA first."""
    rows = []
    for s in dict.fromkeys(o.strategy for o in outcomes):
        legs = [o for o in outcomes if o.strategy == s]
        ok = [o for o in legs if o.report is not None]
        row = {"strategy": s, "n_ok": len(ok), "n_failed": len(legs) - len(ok)}
        for m in SUMMARY_METRICS:
            vals = [getattr(o.report, m) for o in ok if getattr(o.report, m) is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
    rows.sort(key=lambda r: (r["epa_mean"] is None, -(r["epa_mean"] or 0.0)))
    return rows
