"""Command-line entry point: gen-data, train, eval, export-sim, gradcheck.

Every command is deterministic given its flags and seeds, refuses to
clobber existing outputs without --force, and removes partial outputs
when it fails. `train` accepts dotted config overrides such as
`--loss.mu 1 --loss.lambda 0` after its named flags.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import sys

import numpy as np

from .config import (
    RunConfig,
    apply_overrides,
    config_to_dict,
    default_config,
    load_config,
)
from .data import (
    DatasetManifest,
    apply_masks,
    generate_synthetic,
    load_dataset,
    load_split,
    save_dataset,
    zero_shot_split,
)
from .errors import ConfigError, ContractError, DimensionError, DomainError, FormatError
from .gradchecks import CHECKS, run_checks
from .metrics import build_report, write_report_json, write_similarity_csv
from .model import AlignmentModel
from .trainer import embed_split, evaluate_zero_shot, fit, load_checkpoint, save_checkpoint

CONFIG_ENV = "EEGALIGN_CONFIG"
SPLIT_FILES = {"train": "train.bin", "val": "val.bin", "test": "test.bin"}


def _refuse_collision(path: str, force: bool, is_dir: bool) -> None:
    """Directories count as collisions only when non-empty."""
    if not os.path.exists(path):
        return
    if is_dir and os.path.isdir(path) and not os.listdir(path):
        return
    if not force:
        raise ConfigError(f"output path {path} already exists; pass --force to overwrite")


@contextlib.contextmanager
def _fresh_outputs(dirs=(), files=()):
    """Remove this command's outputs if its body raises.

    Freshly created directories are removed wholesale; directories that
    already existed only lose the specific files listed, so --force over
    a populated location cannot destroy unrelated content.
    """
    fresh_dirs = [d for d in dirs if not os.path.exists(d)]
    try:
        yield
    except BaseException:
        for f in files:
            if os.path.isfile(f):
                try:
                    os.remove(f)
                except OSError:
                    pass
        for d in fresh_dirs:
            shutil.rmtree(d, ignore_errors=True)
        raise


# -- gen-data ----------------------------------------------------------------


def cmd_gen_data(args, extras) -> int:
    _refuse_collision(args.out, args.force, is_dir=True)
    data = generate_synthetic(
        seed=args.seed,
        n_classes=args.classes,
        per_class=args.per_class,
        channels=args.channels,
        timesteps=args.timesteps,
        height=args.height,
        noise=args.noise,
    )
    splits = zero_shot_split(data, n_test_classes=args.held_out,
                             n_val_samples=args.val_samples, seed=args.seed)
    manifest = DatasetManifest(
        splits=dict(SPLIT_FILES),
        channels=args.channels,
        timesteps=args.timesteps,
        height=args.height,
        width=args.height,
        n_classes=args.classes,
        seed=args.seed,
    )
    files = [os.path.join(args.out, name) for name in ["manifest.json", *SPLIT_FILES.values()]]
    with _fresh_outputs(dirs=[args.out], files=files):
        save_dataset(manifest, splits, args.out)
    for name in ("train", "val", "test"):
        split = splits[name]
        print(f"{name}: {len(split)} pairs, {len(set(split.class_ids.tolist()))} classes")
    print(f"wrote dataset to {args.out}")
    return 0


# -- train -------------------------------------------------------------------


def _parse_dotted_overrides(tokens: list[str]) -> dict[str, str]:
    """Turn leftover argv (`--loss.mu 1` or `--loss.mu=1`) into a dict."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(
                f"unrecognized argument {token!r}; config overrides look like --section.key value"
            )
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {token!r} is missing a value")
            value = tokens[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _resolve_config(args, extras) -> RunConfig:
    config_path = args.config or os.environ.get(CONFIG_ENV)
    cfg = load_config(config_path) if config_path else default_config()
    overrides = {}
    if args.epochs is not None:
        overrides["trainer.epochs"] = str(args.epochs)
    if args.seed is not None:
        overrides["trainer.seed"] = str(args.seed)
    overrides.update(_parse_dotted_overrides(extras))
    return apply_overrides(cfg, overrides)


def _run_one_training(cfg: RunConfig, manifest, train, val, out_dir: str, log_path: str):
    model = AlignmentModel(cfg, channels=train.eeg.shape[1], timesteps=train.eeg.shape[2],
                           image_size=manifest.height)
    files = [os.path.join(out_dir, "manifest.json"), os.path.join(out_dir, "params.bin"), log_path]
    with _fresh_outputs(dirs=[out_dir], files=files):
        os.makedirs(out_dir, exist_ok=True)
        ckpt, history = fit(model, train, val, log_path=log_path)
        save_checkpoint(ckpt, out_dir)
    return ckpt, history


def cmd_train(args, extras) -> int:
    cfg = _resolve_config(args, extras)
    cfg.data.path = args.data

    manifest = load_dataset(args.data)
    train = apply_masks(load_split(manifest, "train"), cfg.data.channel_mask, cfg.data.time_window)
    val = apply_masks(load_split(manifest, "val"), cfg.data.channel_mask, cfg.data.time_window)

    if args.repeats < 1:
        raise ConfigError(f"--repeats must be >= 1, got {args.repeats}")
    _refuse_collision(args.out, args.force, is_dir=True)

    base_seed = cfg.trainer.seed
    val_losses = []
    for r in range(args.repeats):
        if args.repeats == 1:
            out_dir = args.out
            log_path = args.log or os.path.join(args.out, "train_log.jsonl")
        else:
            out_dir = os.path.join(args.out, f"repeat-{r}")
            stem = args.log or os.path.join(args.out, "train_log.jsonl")
            root, ext = os.path.splitext(stem)
            log_path = f"{root}.{r}{ext}"
        cfg.trainer.seed = base_seed + r
        ckpt, _ = _run_one_training(cfg, manifest, train, val, out_dir, log_path)
        val_losses.append(ckpt.val_loss)
        print(f"seed {cfg.trainer.seed}: best epoch {ckpt.epoch}, val loss {ckpt.val_loss:.6f} -> {out_dir}")
    if args.repeats > 1:
        print(f"val loss over {args.repeats} repeats: "
              f"mean {np.mean(val_losses):.6f}, median {np.median(val_losses):.6f}")
    return 0


# -- eval / export-sim -------------------------------------------------------


def _load_checkpoint_split(checkpoint_dir: str, data_path: str, split_name: str):
    """Rebuild the model and load one split shaped the way it was trained."""
    ckpt = load_checkpoint(checkpoint_dir)
    manifest = load_dataset(data_path)
    split = load_split(manifest, split_name)
    split = apply_masks(split, ckpt.config.data.channel_mask, ckpt.config.data.time_window)
    c, t = split.eeg.shape[1], split.eeg.shape[2]
    if (c, t) != (ckpt.channels, ckpt.timesteps) or (manifest.height, manifest.width) != (ckpt.image_size,) * 2:
        raise ConfigError(
            f"checkpoint geometry (C={ckpt.channels}, T={ckpt.timesteps}, H={ckpt.image_size}) "
            f"does not match dataset (C={c}, T={t}, H={manifest.height}x{manifest.width})"
        )
    return ckpt, ckpt.build_model(), split


def cmd_eval(args, extras) -> int:
    ckpt, model, split = _load_checkpoint_split(args.checkpoint, args.data, args.split)
    ks = args.ks or ckpt.config.eval.ks
    train_ids = ckpt.train_class_ids if args.split == "test" else None
    report = evaluate_zero_shot(model, split, ks, train_class_ids=train_ids,
                                batch_size=ckpt.config.trainer.batch_size)
    out = {f"Top-{k}": report.top_k[k] for k in sorted(report.top_k)}
    out["mAP"] = report.map_score
    out["n_queries"] = int(report.extras["n_queries"])
    out["split"] = args.split
    text = json.dumps(out, indent=2)
    print(text)
    if args.out:
        _refuse_collision(args.out, args.force, is_dir=False)
        with _fresh_outputs(files=[args.out]):
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
    return 0


def cmd_export_sim(args, extras) -> int:
    ckpt, model, split = _load_checkpoint_split(args.checkpoint, args.data, args.split)
    ks = args.ks or ckpt.config.eval.ks
    report_path = args.report or os.path.splitext(args.out)[0] + ".json"
    _refuse_collision(args.out, args.force, is_dir=False)
    _refuse_collision(report_path, args.force, is_dir=False)

    z_e, z_i = embed_split(model, split, batch_size=ckpt.config.trainer.batch_size)
    sim = z_e @ z_i.T
    with _fresh_outputs(files=[args.out, report_path]):
        write_similarity_csv(args.out, sim)
        report = build_report(sim, ks, similarity_path=args.out)
        write_report_json(report_path, report)
    print(f"wrote {sim.shape[0]}x{sim.shape[1]} similarity matrix to {args.out}")
    print(f"wrote retrieval report to {report_path}")
    return 0


# -- gradcheck ----------------------------------------------------------------


def cmd_gradcheck(args, extras) -> int:
    names = None if args.all else args.components
    if not names and not args.all:
        raise ConfigError("name components to check or pass --all; "
                          f"known: {', '.join(sorted(CHECKS))}")
    reports = run_checks(names, seed=args.seed)
    failed = []
    for name, rep in reports.items():
        print(f"[{name}] tol={rep.tol:g}")
        print(rep.summary())
        if not rep.passed:
            failed.append(name)
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(reports)} component checks passed")
    return 0


# -- wiring --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eegalign",
        description="EEG-image alignment: synthetic data, training, retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset with zero-shot splits")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=50)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--channels", type=int, default=17)
    p.add_argument("--timesteps", type=int, default=250)
    p.add_argument("--height", type=int, default=32, help="square image side in pixels")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--held-out", type=int, default=10, help="classes reserved for the test split")
    p.add_argument("--val-samples", type=int, default=100)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; accepts dotted config overrides")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", help=f"config JSON (default: ${CONFIG_ENV} if set, else built-ins)")
    p.add_argument("--log", help="training log path (default: <out>/train_log.jsonl)")
    p.add_argument("--epochs", type=int, help="shortcut for --trainer.epochs")
    p.add_argument("--seed", type=int, help="shortcut for --trainer.seed")
    p.add_argument("--repeats", type=int, default=1, help="train this many seeds, seed+0..seed+R-1")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--ks", type=int, nargs="+", help="top-k cutoffs (default: checkpoint's eval.ks)")
    p.add_argument("--out", help="also write the report JSON here")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-sim", help="write the similarity matrix CSV plus a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--report", help="report JSON path (default: CSV path with .json)")
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export_sim)

    p = sub.add_parser("gradcheck", help="finite-difference checks for trainable components")
    p.add_argument("components", nargs="*", metavar="component",
                   help=f"any of: {', '.join(sorted(CHECKS))}")
    p.add_argument("--all", action="store_true", help="check every component")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    if extras and args.command != "train":
        print(f"error: unrecognized arguments: {' '.join(extras)}", file=sys.stderr)
        return 2
    try:
        return args.func(args, extras)
    except (ConfigError, ContractError, DimensionError, DomainError, FormatError,
            NotImplementedError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
