"""Command-line entry point: ``changecap {gen,train,predict,score,viz}``.

Every command writes its outputs under temporary names and renames them on
success, refuses to overwrite existing outputs unless ``--force`` is given
and exits with status 0 only on success.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

import numpy as np

from .evalkit import buckets_csv, format_tables, score_run, upsample_bilinear
from .kvconfig import ConfigError, to_kv
from .models import MODEL_KINDS, Captioner
from .numkernel import CheckpointError
from .scenegen import GenConfig, build_dataset, load_gen_config, load_manifest, write_pgm
from .scenegen.dataset import load_dataset_config
from .trainer import (CHECKPOINT, SPLITS, TrainConfig, TrainingError, load_features,
                      load_train_config, predict_split, read_predictions, train)

EXPECTED_ERRORS = (ConfigError, CheckpointError, TrainingError, ValueError, KeyError,
                   FileNotFoundError, FileExistsError, IsADirectoryError)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _claim_dir(path, force):
    """Return a fresh ``path.partial`` directory; ``path`` must be empty or ``force`` set."""
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise FileExistsError(f"{path} is not empty (pass --force to overwrite)")
    tmp = path.rstrip("/") + ".partial"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    return tmp


def _publish_dir(tmp, path):
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


def _claim_file(path, force):
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists (pass --force to overwrite)")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _checkpoint_path(path):
    return os.path.join(path, CHECKPOINT) if os.path.isdir(path) else path


# ------------------------------------------------------------------ commands

def cmd_gen(args):
    cfg = load_gen_config(args.config) if args.config else GenConfig()
    if args.num_scenes is not None:
        cfg.num_scenes = args.num_scenes
    cfg.validate()
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise FileExistsError(f"{args.out} is not empty (pass --force to overwrite)")
    build_dataset(cfg, args.seed or 0, args.out, force=args.force)
    _log(f"wrote {2 * cfg.num_scenes} pairs to {args.out}")


def cmd_train(args):
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.model is not None:
        overrides["model"] = args.model
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = load_train_config(args.config, **overrides) if args.config else TrainConfig(**overrides)
    feats = load_features(args.data, channels=cfg.channels)
    tmp = _claim_dir(args.out, args.force)

    def progress(e):
        val = "n/a" if e["val_loss"] is None else f"{e['val_loss']:.4f}"
        _log(f"epoch {e['epoch']:3d}  train {e['train_loss']:.4f}  val {val}  "
             f"({e['seconds']:.1f}s)")

    result = train(cfg, feats, tmp, progress=progress)
    log = result.log.to_json()
    log["checkpoint"] = os.path.join(args.out, CHECKPOINT)
    for entry in log["epochs"]:
        if entry["checkpoint"]:
            entry["checkpoint"] = log["checkpoint"]
        entry.pop("seconds")           # wall-clock would break byte-identical reruns
    _write_text(os.path.join(tmp, "train_log.json"), json.dumps(log, indent=2, sort_keys=True))
    _write_text(os.path.join(tmp, "train.cfg"), to_kv(cfg))
    _publish_dir(tmp, args.out)
    _log(f"best epoch {result.log.best_epoch}; checkpoint {log['checkpoint']}")


def cmd_predict(args):
    model, meta = Captioner.load(_checkpoint_path(args.checkpoint))
    feats = load_features(args.data, channels=model.cfg.channels)
    want = meta.get("encoder", {}).get("fingerprint")
    if want is not None and want != feats.encoder_fingerprint:
        raise CheckpointError("checkpoint was trained on features from a different encoder")
    _claim_file(args.out, args.force)
    recs = predict_split(model, feats, args.split, args.out)
    _log(f"wrote {len(recs)} predictions to {args.out}")


def cmd_score(args):
    preds = read_predictions(args.predictions)
    pairs = load_manifest(args.data, splits={args.split})
    image_size = load_dataset_config(args.data).image_size
    report = score_run(preds, pairs, image_size=image_size)
    tables = format_tables(report)
    tmp = _claim_dir(args.out, args.force)
    _write_text(os.path.join(tmp, "report.json"), json.dumps(report, indent=2, sort_keys=True))
    _write_text(os.path.join(tmp, "report.txt"), tables)
    _write_text(os.path.join(tmp, "difficulty.csv"), buckets_csv(report))
    _publish_dir(tmp, args.out)
    print(tables)


def _normalise(m):
    lo, hi = float(m.min()), float(m.max())
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


def cmd_viz(args):
    recs = {r["id"]: r for r in read_predictions(args.predictions)}
    if args.pair_id not in recs:
        raise KeyError(f"pair {args.pair_id!r} is not in {args.predictions}")
    rec = recs[args.pair_id]
    tmp = _claim_dir(args.out, args.force)
    written = []
    for tag in ("before", "after"):
        att = rec.get(f"att_{tag}")
        if att is not None:
            up = upsample_bilinear(np.asarray(att, dtype=np.float64), args.image_size,
                                   args.image_size)
            write_pgm(os.path.join(tmp, f"att_{tag}.pgm"), _normalise(up))
            written.append(f"att_{tag}.pgm")
    if rec.get("alpha") is not None:
        lines = ["before,diff,after"]
        lines += [",".join(f"{v:.6f}" for v in row) for row in rec["alpha"]]
        _write_text(os.path.join(tmp, "alpha.csv"), "\n".join(lines) + "\n")
        written.append("alpha.csv")
    _write_text(os.path.join(tmp, "caption.txt"), rec["caption"] + "\n")
    written.append("caption.txt")
    _publish_dir(tmp, args.out)
    _log(f"wrote {', '.join(written)} to {args.out}")


# -------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int,
                        help="random seed for gen and train (default 0, or the training "
                             "config's value); other commands are deterministic")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", required=True, help="output directory or file")

    parser = argparse.ArgumentParser(prog="changecap",
                                     description="Change captioning on synthetic desk scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a dataset")
    p.add_argument("--config", help="generator key=value config file")
    p.add_argument("--num-scenes", type=int, help="override the number of before-scenes")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one model; --out is a run directory")
    p.add_argument("--data", required=True, help="dataset directory written by gen")
    p.add_argument("--model", choices=MODEL_KINDS, help="model kind (default: duda)")
    p.add_argument("--config", help="training key=value config file")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="greedy predictions for a split; --out is a JSON-lines file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint file")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", parents=[common],
                       help="score predictions; --out receives report.json/.txt and difficulty.csv")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--predictions", required=True, help="JSON-lines file written by predict")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("viz", parents=[common],
                       help="attention pixmaps, alpha CSV and caption for one pair")
    p.add_argument("--predictions", required=True, help="JSON-lines file written by predict")
    p.add_argument("--pair-id", required=True, help="id of the pair to visualise")
    p.add_argument("--image-size", type=int, default=64, help="side of the upsampled maps")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except EXPECTED_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"changecap {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
