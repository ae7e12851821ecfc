"""Command-line entry point: ``alp <subcommand> [flags]``.

Exit codes:
    0  success
    1  unexpected failure
    2  invalid configuration or missing input file
    3  training aborted on a non-finite value
    4  inputs that do not match each other (scene not in log, checkpoint shapes)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import ndmath as nd
from .config import ConfigError, RunConfig, config_hash, parse_config
from .downstream import CheckpointMismatch, PerceptionModel, dataset, evaluate
from .pipeline import TrainingDiverged, configure_determinism, explore, transfer
from .worldsim import TrajectoryLog, coverage_from_log, generate_scene, generate_split

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
RANDOM_INIT = "random"

log = logging.getLogger("alp")


class UsageError(Exception):
    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


def _require(path: str | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}", EXIT_CONFIG)
    return Path(path)


def load_config(args) -> RunConfig:
    text = _require(args.config, "config file").read_text(encoding="utf-8") if args.config else ""
    try:
        cfg = parse_config(text)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "out", None):
            overrides["out_dir"] = args.out
        return cfg.with_(**overrides) if overrides else cfg
    except ConfigError as exc:
        key = f" (key {exc.key})" if exc.key else ""
        raise UsageError(f"invalid config{key}: {exc}", EXIT_CONFIG) from exc


def worker_count(cfg: RunConfig, deterministic: bool) -> int:
    if deterministic:
        return 1
    cap = os.environ.get("ALP_THREADS")
    n = min(cfg.num_envs, os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise UsageError(f"ALP_THREADS must be an integer, got {cap!r}", EXIT_CONFIG) from exc
    return n


# ---------------------------------------------------------------- subcommands

def cmd_train_explore(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    for name in ("metrics.jsonl", "timing.jsonl", "dataset.alpd"):
        if (out / name).exists():
            (out / name).unlink()

    def progress(record):
        log.info("step=%d policy_loss=%.4f reward_mean=%.4g", record["step"], record["policy_loss"],
                 record["reward_mean"])

    try:
        res = explore(cfg, out, args.deterministic, worker_count(cfg, args.deterministic), progress=progress)
    except TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"frames={res.metrics[-1]['step']} windows={len(res.metrics)} samples={len(res.samples)} "
          f"config_hash={res.config_hash} out={out}")
    return EXIT_OK


def _load_init(path: str) -> dict | None:
    if path == RANDOM_INIT:
        return None
    return nd.checkpoint.load(_require(path, "checkpoint"))


def cmd_finetune(args) -> int:
    cfg = load_config(args)
    configure_determinism(cfg.seed, args.deterministic)
    init = _load_init(args.checkpoint)
    samples = dataset.read(_require(args.dataset, "dataset"))
    if not samples:
        raise UsageError(f"dataset is empty: {args.dataset}", EXIT_CONFIG)
    task = args.task or cfg.finetune_task
    profile = cfg.profile()
    try:
        model, train_rep, test_rep = transfer(cfg, init, samples, cfg.seed, generate_split(profile, "train"),
                                              generate_split(profile, "test"), task)
    except CheckpointMismatch as exc:
        raise UsageError(str(exc), EXIT_MISMATCH) from exc
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nd.checkpoint.save(out / f"{task}.alpw", nd.checkpoint.state_entries(model))
    with open(out / f"{task}_reports.jsonl", "w") as fh:
        for rep in (train_rep, test_rep):
            rep.model = args.checkpoint
            fh.write(rep.to_json() + "\n")
            print(rep.to_json())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    configure_determinism(cfg.seed, args.deterministic)
    entries = nd.checkpoint.load(_require(args.checkpoint, "checkpoint"))
    task = args.task or cfg.finetune_task
    model = PerceptionModel(task, cfg.image_size, cfg.channels, cfg.feature_dim)
    own = model.state_dict()
    if set(own) != set(entries) or any(tuple(own[k].shape) != entries[k].shape for k in own):
        raise UsageError(f"checkpoint does not fit a {task} model", EXIT_MISMATCH)
    model.load_state_dict({k: torch.as_tensor(np.array(entries[k])) for k in own})
    scenes = generate_split(cfg.profile(), args.split)
    n = cfg.eval_train_frames if args.split == "train" else cfg.eval_test_frames
    rep = evaluate(model, scenes, args.split, n, seed=cfg.seed, profile=cfg.profile())
    rep.model = args.checkpoint
    rep.config_hash = config_hash(cfg)
    print(rep.to_json())
    return EXIT_OK


def cmd_export_coverage(args) -> int:
    cfg = load_config(args)
    records = TrajectoryLog.read(_require(args.log, "trajectory log").read_bytes())
    scene = generate_scene(args.scene, cfg.profile())
    try:
        grid = coverage_from_log(records, scene)
    except ValueError as exc:
        raise UsageError(str(exc), EXIT_MISMATCH) from exc
    out = Path(args.pgm) if args.pgm else Path(cfg.out_dir) / f"coverage_{scene.seed}.pgm"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(grid.to_pgm())
    print(f"scene={scene.seed} unique_cells={grid.unique_cells} path_length={grid.path_length:g}")
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir) / "scenes"
    out.mkdir(parents=True, exist_ok=True)
    for scene in generate_split(cfg.profile(), args.split):
        (out / f"scene_{scene.seed}.txt").write_text(scene.dump())
        print(f"scene={scene.seed} size={scene.width:g}x{scene.height:g} objects={len(scene.objects)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--deterministic", action="store_true", help="serial, seeded execution")
    common.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="alp", description="Exploration pretraining and perception transfer.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("train-explore", parents=[common], help="run Stage-1 exploration")
    s.set_defaults(fn=cmd_train_explore)
    s = sub.add_parser("finetune", parents=[common], help="finetune a perception head and evaluate both splits")
    s.add_argument("--checkpoint", required=True, help=f"ALPW file or '{RANDOM_INIT}'")
    s.add_argument("--dataset", required=True, help="ALPD labeled dataset")
    s.add_argument("--task", choices=("segmentation", "depth", "presence"), default=None)
    s.set_defaults(fn=cmd_finetune)
    s = sub.add_parser("evaluate", parents=[common], help="evaluate a finetuned perception model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--task", choices=("segmentation", "depth", "presence"), default=None)
    s.set_defaults(fn=cmd_evaluate)
    s = sub.add_parser("export-coverage", parents=[common], help="coverage map from a trajectory log")
    s.add_argument("--log", required=True)
    s.add_argument("--scene", type=int, required=True, help="scene seed")
    s.add_argument("--pgm", default=None, help="output image path")
    s.set_defaults(fn=cmd_export_coverage)
    s = sub.add_parser("gen-scenes", parents=[common], help="write text dumps of a scene split")
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.set_defaults(fn=cmd_gen_scenes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
