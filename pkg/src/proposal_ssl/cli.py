"""Command-line entry point for scene generation, pre-training, and probing."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .evaluate import embed_scenes, probe_report
from .gradcheck import pipeline_grad_audit
from .model import Model
from .pointcloud import load_point_cloud, remove_ground
from .proposals import generate_paired_proposals
from .synth import (LabeledScene, SceneConfig, generate_scene, load_scene_labels,
                    save_labeled_scene)
from .training import (ConfigError, TrainConfig, load_checkpoint,
                       load_train_config, parse_config, pretrain)

log = logging.getLogger("proposal_ssl")


def _setup_logging():
    level = os.environ.get("PC_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_scenes(dataset_dir) -> list[LabeledScene]:
    scenes = []
    for bin_path in sorted(Path(dataset_dir).glob("*.bin")):
        label_path = bin_path.with_name(bin_path.stem + "_labels.csv")
        if not label_path.exists():
            raise ConfigError(f"missing label sidecar for {bin_path.name}")
        cloud = load_point_cloud(bin_path)
        classes, instances = load_scene_labels(label_path)
        scenes.append(LabeledScene(cloud, classes, instances))
    if not scenes:
        raise ConfigError(f"no labeled scenes found in {dataset_dir!r}")
    return scenes


def cmd_gen_scenes(args) -> int:
    raw = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    num_scenes = int(raw.get("num_scenes", 8))
    base_seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    for i in range(num_scenes):
        cfg = SceneConfig(
            ground_extent=float(raw.get("ground_extent", 20.0)),
            objects_per_scene=int(raw.get("objects_per_scene", 9)),
            points_per_object=int(raw.get("points_per_object", 150)),
            ground_points=int(raw.get("ground_points", 1200)),
            noise_sigma=float(raw.get("noise_sigma", 0.01)),
            seed=base_seed * 100_003 + i,
        )
        scene = generate_scene(cfg)
        save_labeled_scene(scene, out / f"scene_{i:03d}.bin",
                           out / f"scene_{i:03d}_labels.csv")
    log.info("wrote %d scenes to %s", num_scenes, out)
    return 0


def cmd_pretrain(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_train_config(args.config, overrides)
    if not cfg.dataset_dir:
        raise ConfigError("config key 'dataset_dir' is required for pretrain")
    if not Path(cfg.dataset_dir).is_dir():
        raise ConfigError(f"dataset_dir does not exist: {cfg.dataset_dir!r}")
    final = pretrain(cfg, args.out, resume=args.checkpoint)
    log.info("final checkpoint: %s", final)
    return 0


def cmd_probe(args) -> int:
    cfg = load_train_config(args.config,
                            {"seed": args.seed} if args.seed is not None else None)
    scenes = _load_scenes(cfg.dataset_dir)
    model, _, _, step = load_checkpoint(args.checkpoint)
    report = probe_report(model, scenes, cfg, split_seed=cfg.seed)
    report["checkpoint_step"] = step
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_inspect_proposals(args) -> int:
    cfg = load_train_config(args.config,
                            {"seed": args.seed} if args.seed is not None else None)
    from .augment import DropoutConfig, random_augment_params, sample_views
    from .training import load_dataset, _frame_rng

    frames = load_dataset(cfg.dataset_dir)
    pc = remove_ground(frames[0], cfg.ground_filter)
    rng = _frame_rng(cfg.seed, 2, 0)
    p1, p2 = random_augment_params(rng), random_augment_params(rng)
    x1, x2, m = sample_views(pc, DropoutConfig(cfg.total_sample, cfg.shared_sample),
                             p1, p2, rng=rng)
    n = min(cfg.num_proposals, len(m))
    ps1, ps2 = generate_paired_proposals(pc, x1, x2, m, n,
                                         cfg.proposal_radius, cfg.proposal_k)
    dump = {
        "frame": 0,
        "radius": cfg.proposal_radius,
        "proposals": [
            {
                "index": i,
                "center_id": int(ps1.centers[i]),
                "members_view1": [int(v) for v in ps1.members[i]],
                "members_view2": [int(v) for v in ps2.members[i]],
            }
            for i in range(n)
        ],
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "proposals.json").write_text(json.dumps(dump, indent=2) + "\n")
    print(f"wrote {n} proposals to {out / 'proposals.json'}")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = load_train_config(args.config,
                            {"seed": args.seed} if args.seed is not None else None)
    scenes = _load_scenes(cfg.dataset_dir)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    z, _, labels = embed_scenes(model, scenes, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "embeddings.csv"
    header = ",".join(f"z{i}" for i in range(z.shape[1])) + ",label"
    rows = [header]
    for row, lab in zip(z, labels):
        rows.append(",".join(repr(float(v)) for v in row) + f",{int(lab)}")
    path.write_text("\n".join(rows) + "\n")
    print(f"wrote {len(z)}x{z.shape[1]} embeddings to {path}")
    return 0


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    err = pipeline_grad_audit(seed=seed)
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err < 1e-4 else 1


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "inspect-proposals": cmd_inspect_proposals,
    "export-embeddings": cmd_export_embeddings,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proposal-ssl",
        description="Proposal-level contrastive pre-training on point clouds")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name != "grad-check":
            p.add_argument("--config", required=True)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=None)
        if name in ("pretrain", "probe", "export-embeddings"):
            p.add_argument("--checkpoint", default=None)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
