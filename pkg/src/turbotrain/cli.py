"""Command-line front end for scene generation, pretraining, training and evaluation.

Every command reads one config file (``--config``), applies flag overrides
(flags win) and echoes the effective config into what it writes: checkpoint
metadata, the report JSON, a ``# config=`` first line in CSVs and the scene
manifest.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .balance import diagnose_conflicts, parse_balance, train_run
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .metrics import MetricsReport
from .model import init_params, prepare_scene
from .pipeline import compare_strategies, evaluate_params, initial_params, make_scenes, pretrain_trunk, summarize, train_config_for
from .scene import SceneFormatError, derive_seed, generate_scene, read_scene, write_scene

log = logging.getLogger("turbotrain")

MANIFEST = "manifest.json"


class CliError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _write_csv(path: Path, fieldnames, rows, cfg: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={dump_config(cfg)}\n")
        w = csv.DictWriter(fh, fieldnames=list(fieldnames))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fieldnames})


def read_csv(path) -> tuple[dict, list[dict]]:
    """(echoed config, rows) of a CSV written by this tool."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# config="):
            raise CliError(f"{path}: missing config line")
        return json.loads(first[len("# config="):]), list(csv.DictReader(fh))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _scene_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"scene directory not found: {d}")
    man = d / MANIFEST
    if man.is_file():
        entries = json.loads(man.read_text())["scenes"]
        files = [d / e["file"] for e in entries]
        missing = [str(f) for f in files if not f.is_file()]
        if missing:
            raise CliError(f"manifest {man} lists missing scene files: {missing[:3]}")
        return files
    return sorted(d.glob("*.jsonl"))


def _load_scenes(directory, cfg: RunConfig, what: str = "scenes"):
    files = _scene_files(directory)
    if not files:
        raise CliError(f"no scene files in {directory}")
    mcfg = cfg.model_config()
    out = []
    for f in files:
        try:
            out.append(prepare_scene(read_scene(f), mcfg))
        except SceneFormatError as exc:
            raise CliError(f"{f}: {exc}") from exc
        except ValueError as exc:
            raise CliError(f"{f}: {exc}") from exc
    log.info("loaded %d %s from %s", len(out), what, directory)
    return out


def _load_params(path, what: str) -> tuple[dict, dict]:
    if path is None:
        raise CliError(f"{what} needs --ckpt")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def _meta(cfg: RunConfig, stage: str, **extra) -> dict:
    return {"stage": stage, "config": json.loads(dump_config(cfg)), **extra}


# ----------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    if cfg.gen.count == 0:
        log.warning("count is 0: writing an empty manifest only")
    entries = []
    for i in range(cfg.gen.index_offset, cfg.gen.index_offset + cfg.gen.count):
        seed = derive_seed(cfg.seed, i)
        sid = f"scene-{i:05d}"
        name = f"{sid}.jsonl"
        write_scene(generate_scene(replace(cfg.scenario, seed=seed), sid), out / name)
        entries.append({"id": sid, "seed": seed, "file": name})
    manifest = {"master_seed": cfg.seed, "count": cfg.gen.count, "scenes": entries,
                "config": json.loads(dump_config(cfg))}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.gen.count} scene(s) and {MANIFEST} to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    scenes = _load_scenes(cfg.paths.scenes, cfg)
    out = _out_dir(cfg)
    res = pretrain_trunk(scenes, cfg.model_config(), cfg.pretrain_config())
    save_checkpoint(out / "pretrain.ckpt", res.params, _meta(cfg, "pretrain", trace=res.trace))
    _write_csv(out / "pretrain_loss.csv", ("epoch", "loss_rec", "loss_occ"),
               [{"epoch": e, "loss_rec": r, "loss_occ": o} for e, r, o in res.trace], cfg)
    print(f"pretrained on {len(scenes)} scene(s); wrote {out / 'pretrain.ckpt'}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    trunk = None
    if cfg.strategy == "one-time":
        if cfg.paths.ckpt:
            log.warning("strategy one-time starts from random init; ignoring --ckpt %s", cfg.paths.ckpt)
    else:
        if not cfg.paths.ckpt:
            raise CliError(f"strategy {cfg.strategy} needs a pretrain checkpoint (--ckpt)")
        trunk, _ = _load_params(cfg.paths.ckpt, "train")
    scenes = _load_scenes(cfg.paths.scenes, cfg)
    out = _out_dir(cfg)
    tcfg = train_config_for(cfg.strategy, cfg.train_config())
    params, steps = train_run(scenes, initial_params(mcfg, cfg.seed, trunk), mcfg, tcfg)
    save_checkpoint(out / "model.ckpt", params, _meta(cfg, "train", strategy=cfg.strategy, steps=len(steps)))
    _write_csv(out / "steps.csv", steps[0].CSV_FIELDS if steps else (), [s.csv_row() for s in steps], cfg)
    print(f"trained ({cfg.strategy}) for {len(steps)} step(s); wrote {out / 'model.ckpt'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    params, _ = _load_params(cfg.paths.ckpt, "eval")
    mcfg = cfg.model_config()
    expected = init_params(mcfg, 0)
    bad = [k for k in expected if k not in params or params[k].shape != expected[k].shape]
    if bad:
        raise CliError(f"checkpoint does not fit the configured model (parameters {bad[:4]})")
    scenes = _load_scenes(cfg.paths.test_scenes or cfg.paths.scenes, cfg, "held-out scenes")
    out = _out_dir(cfg)
    report = evaluate_params(params, scenes, mcfg)
    report.config = json.loads(dump_config(cfg))
    (out / "report.json").write_text(report.to_json() + "\n")
    _write_csv(out / "report.csv", MetricsReport.CSV_FIELDS, [report.csv_row()], cfg)
    print(f"AP {report.ap:.4f}  EPA {report.epa:.4f}  over {report.n_scenes} scene(s); wrote {out / 'report.json'}")
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    if cfg.paths.ckpt:
        loaded, _ = _load_params(cfg.paths.ckpt, "diagnose")
        # a pretrain checkpoint carries the trunk only; heads start from init
        params = initial_params(mcfg, cfg.seed, loaded)
        params.update({k: v for k, v in loaded.items() if k in params and v.shape == params[k].shape})
    else:
        log.info("no --ckpt: diagnosing a fresh random init")
        params = initial_params(mcfg, cfg.seed)
    scenes = _load_scenes(cfg.paths.scenes, cfg)
    out = _out_dir(cfg)
    recs = diagnose_conflicts(params, scenes, mcfg, cfg.diagnose.steps, cfg.diagnose.batch_size, cfg.seed)
    _write_csv(out / "conflicts.csv", recs[0].CSV_FIELDS, [r.csv_row() for r in recs], cfg)
    frac = np.mean([r.delta < 0 for r in recs])
    print(f"{len(recs)} step(s), conflicting fraction {frac:.2f}; wrote {out / 'conflicts.csv'}")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    cs = cfg.compare
    train = make_scenes(cfg.seed, cs.n_train, 0, cfg.scenario, mcfg, "train")
    test = make_scenes(cfg.seed, cs.n_test, cs.test_offset, cfg.scenario, mcfg, "test")
    out = _out_dir(cfg)
    outcomes = compare_strategies(train, test, mcfg, cfg.pretrain, cfg.train_config(), cs.strategies, cs.seeds,
                                  cs.train_fraction, cs.pretrain_full)
    leg_fields = ("strategy", "seed", "n_train", "status", "error", "seconds") + MetricsReport.CSV_FIELDS
    leg_rows = []
    for o in outcomes:
        row = {"strategy": o.strategy, "seed": o.seed, "n_train": o.n_train,
               "status": "ok" if o.report else "failed", "error": o.error, "seconds": round(o.seconds, 2)}
        if o.report:
            row.update(o.report.csv_row())
        leg_rows.append(row)
    _write_csv(out / "legs.csv", leg_fields, leg_rows, cfg)
    summary = summarize(outcomes)
    _write_csv(out / "compare.csv", list(summary[0].keys()), summary, cfg)
    for r in summary:
        epa = "n/a" if r["epa_mean"] is None else f"{r['epa_mean']:.4f} ± {r['epa_std']:.4f}"
        print(f"{r['strategy']:>14}  EPA {epa}  ({r['n_ok']} ok, {r['n_failed']} failed)")
    failed = sum(r["n_failed"] for r in summary)
    if failed:
        print(f"{failed} leg(s) failed; see {out / 'legs.csv'}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "diagnose": cmd_diagnose, "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turbotrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--balance", type=parse_balance, help="free,balanced steps per cycle, e.g. 2000,1000")
        p.add_argument("--strategy", help="one-time | pretrain-only | turbotrain")
        p.add_argument("--out", help="output directory")
        p.add_argument("--scenes", help="scene directory")
        p.add_argument("--ckpt", help="checkpoint to read")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name == "gen":
            p.add_argument("--count", type=int, help="number of scenes")
        if name == "eval":
            p.add_argument("--test-scenes", dest="test_scenes", help="held-out scene directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k, None) for k in
                 ("seed", "balance", "strategy", "out", "scenes", "ckpt", "count", "test_scenes")}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (CliError, ConfigError, CheckpointError, SceneFormatError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
