"""Command-line harness: ``train``, ``eval``, ``landscape`` and ``synth-data``.

Exit status is 0 on success, 1 for a bad configuration or unusable input and
2 when training or evaluation hits a non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attacks import NonFiniteLossError, parse_attack
from .data import Dataset, default_data_dir, load_dataset_dir, save_npz, synth_dataset
from .landscape import export_landscape
from .metrics import read_manifest, write_manifest, write_metrics_csv
from .models import Architecture, TargetNet, load_checkpoint, save_checkpoint, split_state
from .training import METHODS, SCHEDULES, ConfigError, TrainConfig, Trainer, evaluate_checkpoint

EXIT_CONFIG = 1
EXIT_NUMERIC = 2

DEFAULT_EVAL_ATTACKS = "clean,fgsm,pgd10,pgd20,pgd50"

log = logging.getLogger("fgsmsdi")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_dims(text: str) -> Tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 3x16x16, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def parse_attack_list(text: str) -> List[str]:
    names = [a.strip() for a in text.split(",") if a.strip()]
    for a in names:
        try:
            parse_attack(a)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return names


# ---------------------------------------------------------------------------
# shared plumbing


def load_datasets(cfg: TrainConfig) -> Tuple[Dataset, Dataset]:
    """``synthetic``, ``cifar10`` (under ``$FGSMSDI_DATA_DIR``) or a dataset directory."""
    if cfg.dataset == "synthetic":
        common = dict(num_classes=cfg.classes, image_shape=tuple(cfg.dims), noise=cfg.noise,
                      seed=cfg.data_seed)
        return (synth_dataset(size=cfg.train_size, split="train", **common),
                synth_dataset(size=cfg.test_size, split="test", **common))
    path = default_data_dir() if cfg.dataset == "cifar10" else Path(cfg.dataset)
    return load_dataset_dir(path)


def architecture_for(cfg: TrainConfig, data: Dataset) -> Architecture:
    return Architecture(kind=cfg.arch, image_shape=data.image_shape, num_classes=data.num_classes)


def write_run_manifest(path, cfg: TrainConfig, arch: Architecture, **extra) -> None:
    write_manifest(path, cfg.to_dict(), seed=cfg.seed,
                   architecture=dataclasses.asdict(arch), **extra)


def load_run(checkpoint: Path, manifest: Optional[Path] = None):
    """Target network, config and test set for a checkpoint written by ``train``."""
    manifest = manifest or checkpoint.parent / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no run manifest at {manifest}; pass --manifest")
    doc = read_manifest(manifest)
    cfg = TrainConfig.from_dict(doc["config"]).resolved()
    arch = Architecture(**doc["architecture"])
    state = load_checkpoint(checkpoint)
    target_state = split_state(state, "target") or state
    return cfg, arch, target_state


# ---------------------------------------------------------------------------
# subcommands

_TRAIN_FLAGS = {
    "method": "method", "dataset": "dataset", "epsilon": "epsilon", "alpha": "alpha",
    "steps": "steps", "k": "k", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
    "schedule": "schedule", "seed": "seed", "max_lr": "max_lr", "milestones": "milestones",
    "arch": "arch", "noise": "noise", "train_size": "train_size", "test_size": "test_size",
    "eval_subset": "eval_subset", "classes": "classes", "dims": "dims", "data_seed": "data_seed",
}


def train_config_from_args(args) -> TrainConfig:
    base = {}
    if args.manifest:
        base = read_manifest(args.manifest)["config"]
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    return TrainConfig.from_dict(base).resolved()


def cmd_train(args) -> int:
    cfg = train_config_from_args(args)
    train_set, test_set = load_datasets(cfg)
    if cfg.dataset != "synthetic":
        cfg = dataclasses.replace(cfg, dims=train_set.image_shape, classes=train_set.num_classes)
    arch = architecture_for(cfg, train_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out / "manifest.json", cfg, arch,
                       data={"train": train_set.provenance, "test": test_set.provenance})

    trainer = Trainer(cfg, train_set, test_set)

    def on_epoch(rows):
        write_metrics_csv(out / "metrics.csv", trainer.records)
        for r in rows:
            log.info("epoch %d %s/%s acc=%.4f loss=%.4f", r.epoch, r.split, r.attack, r.accuracy, r.loss)

    result = trainer.run(on_epoch)
    write_metrics_csv(out / "metrics.csv", result.records)
    save_checkpoint(out / "best.advt", result.best_state)
    save_checkpoint(out / "last.advt", result.last_state)

    summary = {"best_epoch": result.best_epoch, "last_epoch": result.last_epoch,
               "overfit_epoch": result.overfit_epoch}
    if args.final_attacks:
        for tag, state in (("best", result.best_state), ("last", result.last_state)):
            summary[tag] = evaluate_checkpoint(split_state(state, "target"), arch, test_set,
                                               args.final_attacks, cfg.epsilon, cfg.seed)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg, arch, state = load_run(Path(args.checkpoint), args.manifest and Path(args.manifest))
    _, test_set = load_datasets(cfg)
    if args.samples:
        test_set = test_set.subset(args.samples)
    eps = cfg.epsilon if args.epsilon is None else args.epsilon
    results = evaluate_checkpoint(state, arch, test_set, args.attacks, eps, args.seed)
    print(json.dumps(results, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_landscape(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg, arch, state = load_run(ckpt, args.manifest and Path(args.manifest))
    _, test_set = load_datasets(cfg)
    sub = test_set.subset(args.samples).astype(np.float32)
    net = TargetNet(arch)
    net.load_state_dict(state)
    net.eval()
    out = Path(args.out) if args.out else ckpt.with_name(ckpt.stem + ".landscape.txt")
    eps = cfg.epsilon if args.epsilon is None else args.epsilon
    grid = export_landscape(net, sub.images, sub.labels, eps, args.resolution, args.seed, out)
    print(json.dumps({"path": str(out), "resolution": grid.resolution, "origin": grid.origin,
                      "max": float(grid.values.max())}))
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = dict(num_classes=args.classes, image_shape=args.dims, noise=args.noise, seed=args.seed)
    train_set = synth_dataset(size=args.size, split="train", **common)
    test_set = synth_dataset(size=args.test_size, split="test", **common)
    save_npz(out / "train.npz", train_set)
    save_npz(out / "test.npz", test_set)
    print(json.dumps({"train": len(train_set), "test": len(test_set), "dims": list(args.dims),
                      "out": str(out)}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgsmsdi", description="Fast adversarial training with learnable initialization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a target network")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--dataset", help="'synthetic' (default), 'cifar10', or a directory with train.npz/test.npz")
    t.add_argument("--epsilon", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--k", type=int, help="generator update period in batches")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--schedule", choices=SCHEDULES)
    t.add_argument("--max-lr", type=float)
    t.add_argument("--milestones", type=lambda s: [int(v) for v in s.split(",") if v])
    t.add_argument("--seed", type=int)
    t.add_argument("--arch", choices=("linear", "mlp", "cnn"))
    t.add_argument("--noise", type=float)
    t.add_argument("--classes", type=int)
    t.add_argument("--dims", type=parse_dims)
    t.add_argument("--train-size", type=int)
    t.add_argument("--test-size", type=int)
    t.add_argument("--data-seed", type=int)
    t.add_argument("--eval-subset", type=int)
    t.add_argument("--manifest", help="start from the config in an existing run manifest")
    t.add_argument("--final-attacks", type=lambda s: [] if s == "none" else parse_attack_list(s),
                   default=parse_attack_list(DEFAULT_EVAL_ATTACKS),
                   help=f"suite for the best/last checkpoints (default {DEFAULT_EVAL_ATTACKS}; 'none' skips)")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="robust accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--attacks", type=parse_attack_list, default=parse_attack_list(DEFAULT_EVAL_ATTACKS))
    e.add_argument("--manifest")
    e.add_argument("--epsilon", type=float)
    e.add_argument("--samples", type=int, default=0, help="evaluate only the first N test samples")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    ls = sub.add_parser("landscape", help="export a 2-D loss-landscape grid")
    ls.add_argument("--checkpoint", required=True)
    ls.add_argument("--resolution", type=int, default=21)
    ls.add_argument("--manifest")
    ls.add_argument("--epsilon", type=float)
    ls.add_argument("--samples", type=int, default=100)
    ls.add_argument("--seed", type=int, default=0)
    ls.add_argument("--out")
    ls.set_defaults(func=cmd_landscape)

    s = sub.add_parser("synth-data", help="write a synthetic train/test pair as .npz")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--size", type=int, default=2000)
    s.add_argument("--test-size", type=int, default=500)
    s.add_argument("--dims", type=parse_dims, default=(3, 16, 16))
    s.add_argument("--noise", type=float, default=TrainConfig.noise)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
