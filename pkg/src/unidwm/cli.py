"""Command-line entry point: make-data, train, eval, compare, generate.

Exit codes: 0 success, 2 configuration or argument error, 3 I/O or file
format error, 4 a metric was undefined for some scene (see --allow-empty).

Evaluation report CSV columns:
  label          run label (e.g. unified, separated)
  scene          scene seed, or "mean" for the per-horizon summary rows
  horizon_s      0..delta_t seconds ahead of the current frame
  model_cd       Chamfer distance (m) of the generated cloud to the truth
  copy_paste_cd  Chamfer distance of the current true cloud to the truth
  rouge_l        ROUGE-L F-score of the decoded caption
  exact_match    1.0 when the decoded caption equals the reference
  config         digest of the resolved run config
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import evalsuite, plotting
from . import trainer as tr
from .config import ConfigError, RunConfig
from .model import make_predictor, prepare
from .ply import write_ply
from .seqmodel import VocabularyError
from .toyworld.captions import PROMPT
from .toyworld.dataset import (Dataset, DatasetFormatError, build_sample, make_dataset, read_dataset,
                               scene_seeds, write_dataset)
from .toyworld.scene import GenerationError
from .toyworld.sensors import LidarSpec

log = logging.getLogger("unidwm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_METRIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config handling


def parse_overrides(items: Optional[List[str]]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(path: Optional[str], overrides: dict, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = RunConfig.load(path) if path else (base or RunConfig())
    return cfg.override(overrides) if overrides else cfg


def parse_ego(text: str, delta_t: int) -> np.ndarray:
    """"dx,dy,dyaw;dx,dy,dyaw;..." -> (delta_t, 3)."""
    try:
        rows = [[float(v) for v in part.split(",")] for part in text.strip().split(";") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"malformed --ego value: {exc}") from exc
    if len(rows) != delta_t or any(len(r) != 3 for r in rows):
        raise UsageError(f"--ego needs {delta_t} triples 'dx,dy,dyaw' separated by ';'")
    arr = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise UsageError("--ego values must be finite")
    return arr


# ---------------------------------------------------------------- commands


def cmd_make_data(args) -> int:
    cfg = resolve_config(args.config, parse_overrides(args.set))
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    out = Path(args.out)
    seeds = scene_seeds(args.seed, args.scenes)
    ds = make_dataset(seeds, cfg.world)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    manifest = {"scenes": len(ds), "dataset_seed": args.seed, "scene_seeds": seeds,
                "answers": [s.answer for s in ds.samples]}
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    cfg.save(f"{out}.config.json")
    print(f"wrote {len(ds)} scenes to {out}")
    return EXIT_OK


def _load_data(path) -> Dataset:
    return read_dataset(path)


def _save(state: tr.TrainState, out: Path, name: str = "checkpoint.bin") -> None:
    tr.save_checkpoint(state, out / name)
    tr.write_metrics_csv(state.metrics, out / "metrics.csv")


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.separated:
        overrides["model.separated_mode"] = True
    if args.pool_mode:
        overrides["model.pool_mode"] = args.pool_mode
    resume = tr.load_checkpoint(args.resume) if args.resume else None
    # a bare --resume continues with the stored config
    base = resume.config if resume is not None else None
    cfg = resolve_config(args.config, overrides, base)
    init = tr.load_checkpoint(args.init) if args.init else None
    if resume is not None and resume.config.digest() != cfg.digest():
        raise ConfigError("resume checkpoint was trained with a different config")
    ds = _load_data(args.data)
    if len(ds) == 0:
        raise ConfigError("training needs at least one scene")
    if ds.world != cfg.to_dict()["world"]:
        raise ConfigError("dataset was generated with a different world config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    data = [prepare(s, cfg) for s in ds.samples]
    phases = {"a": ["a"], "joint": ["joint"], "all": ["a", "joint"]}[args.phase]
    stop_at = args.stop_after

    def on_step(state, row):
        if state.step % cfg.train.log_every == 0:
            log.info("%s step %d  L_N %.4f  L_D %.4f  L %.4f  lr %.2e", row["phase"], state.step,
                     row["L_N"], row["L_D"], row["L"], row["lr"])
        if cfg.train.ckpt_every and state.step % cfg.train.ckpt_every == 0:
            _save(state, out)

    if resume is not None:
        state = tr.restore_state(resume, cfg)
        if state.phase not in phases:
            raise ConfigError(f"checkpoint is in phase {state.phase!r}, not part of --phase {args.phase}")
        phases = phases[phases.index(state.phase):]
    else:
        if init is not None:
            model = tr.restore_model(init, cfg)
            metrics = init.manifest["metrics"]
        else:
            model = tr.build_model(cfg)
            metrics = []
        state = tr.new_state(model, phases[0], ds.seeds, metrics)

    for i, phase in enumerate(phases):
        if state.phase != phase:
            state = tr.new_state(state.model, phase, ds.seeds, state.metrics)
        budget = tr.phase_steps(cfg, phase)
        tr.run_phase(state, data, budget, on_step, stop_at)
        if state.step < budget:  # stopped early on request
            _save(state, out)
            print(f"stopped at {phase} step {state.step}; resume with --resume {out / 'checkpoint.bin'}")
            return EXIT_OK
        if phase == "a" and len(phases) > i + 1:
            _save(state, out, "phase_a.bin")
    _save(state, out)
    plotting.plot_losses(state.metrics, out / "loss.png")
    print(f"trained {', '.join(phases)}; checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def _eval_config(args, ckpt: tr.Checkpoint) -> RunConfig:
    """Checkpoint config with the eval section taken from --config and --set applied."""
    cfg = ckpt.config
    if args.config:
        given = RunConfig.load(args.config)
        cfg = RunConfig.from_dict({**cfg.to_dict(), "eval": given.to_dict()["eval"]})
    overrides = parse_overrides(args.set)
    if any(not k.startswith("eval.") for k in overrides):
        raise ConfigError("eval accepts only eval.* overrides; model settings come from the checkpoint")
    return cfg.override(overrides) if overrides else cfg


def cmd_eval(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    cfg = _eval_config(args, ckpt)
    ds = _load_data(args.data)
    overlap = set(ds.seeds) & set(ckpt.manifest["train_seeds"])
    if overlap and not args.allow_train_overlap:
        raise ConfigError(f"{len(overlap)} evaluation scenes were used for training")
    model = tr.restore_model(ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    ply_dir = out / "ply"
    if args.dump_ply:
        ply_dir.mkdir(exist_ok=True)

    def dump(sample, answer, clouds):
        if not args.dump_ply:
            return
        for h, (gen, gt) in enumerate(zip(clouds, sample.point_clouds)):
            write_ply(ply_dir / f"scene{sample.seed}_h{h}_generated.ply", gen)
            write_ply(ply_dir / f"scene{sample.seed}_h{h}_truth.ply", gt)

    label = args.label or ("separated" if cfg.model.separated_mode else "unified")
    report = evalsuite.evaluate(ds.samples, make_predictor(model, cfg), cfg.range_bounds(), label,
                                cfg.digest(), cfg.eval.chamfer_squared, dump)
    report.save(out / "report.csv")
    if report.rows:
        plotting.plot_horizons([report], out / "horizons.png")
    for r in report.summary_rows():
        print(f"{label} horizon {r.horizon_s}s: model CD {r.model_cd:.4f}  copy&paste CD {r.copy_paste_cd:.4f}")
    print(f"{label} ROUGE-L {report.mean('rouge_l'):.4f}  exact match {report.mean('exact_match'):.4f}")
    if report.undefined and not args.allow_empty:
        print(f"undefined metric for scenes {report.undefined}", file=sys.stderr)
        return EXIT_METRIC
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = [evalsuite.EvalReport.load(p) for p in args.reports]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = evalsuite.comparison_csv(reports)
    (out / "comparison.csv").write_text(table)
    plotting.plot_horizons(reports, out / "comparison.png")
    print(table, end="")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    cfg = ckpt.config
    ego = parse_ego(args.ego, cfg.world.delta_t) if args.ego is not None else None
    model = tr.restore_model(ckpt, cfg)
    sample = build_sample(args.scene_seed, cfg.world)
    p = prepare(sample, cfg)
    plan = p.ego if ego is None else torch.as_tensor(ego, dtype=p.ego.dtype)
    answer, bevs = model.generate(p.splat, plan, args.prompt, max_tokens=cfg.eval.max_decode_tokens)
    clouds = model.render_points(bevs, plan.double().numpy(), LidarSpec.from_world(cfg.world))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for h, c in enumerate(clouds):
        write_ply(out / f"horizon{h}.ply", c)
    print(answer)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unidwm", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run config (defaults for missing keys)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (value parsed as JSON); repeatable")

    p = sub.add_parser("make-data", help="generate a toy dataset file")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model (phase A then joint by default)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phase", choices=["a", "joint", "all"], default="all")
    p.add_argument("--resume", help="continue from a checkpoint written by an interrupted run")
    p.add_argument("--init", help="start from the parameters of a checkpoint (fresh optimizer)")
    p.add_argument("--stop-after", type=int, help="stop once the current phase reaches this step")
    p.add_argument("--separated", action="store_true", help="separated generation ablation")
    p.add_argument("--pool-mode", choices=["max", "avg", "attention"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a held-out dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label")
    p.add_argument("--dump-ply", action="store_true", help="write generated and true clouds per horizon")
    p.add_argument("--allow-empty", action="store_true", help="exit 0 even when a metric is undefined")
    p.add_argument("--allow-train-overlap", action="store_true", help="permit scenes seen in training")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="summary table and figure over several eval reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("generate", help="caption a scene and generate futures under an ego plan")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene-seed", type=int, required=True)
    p.add_argument("--ego", help='planned motions "dx,dy,dyaw;..." (default: the true ones)')
    p.add_argument("--prompt", default=PROMPT)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_generate)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, VocabularyError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError, tr.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except evalsuite.UndefinedMetric as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
