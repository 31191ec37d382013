"""Command-line entry point: ``vibeam <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 unknown
reference (modality or class), 5 incompatible checkpoints.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, default_config, load_config
from .metrics import EvalRun, dba_score, top1, write_report
from .pipeline import align_subset, finetune_epochs, reproduce_ablations
from .scene import generate_dataset, load_dataset, read_manifest
from .task import episode_features, train_head, write_rows
from .trainer import (CheckpointMismatch, TrainingDiverged, finetune_multimodal,
                      init_from_experts, load_checkpoint, load_head, model_from_checkpoint,
                      pretrain_unimodal, save_head)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_REF, EXIT_COMPAT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _config(path):
    return default_config() if path is None else load_config(path)


def _known_modality(data_dir, name):
    names = [m["name"] for m in read_manifest(data_dir)["modalities"]]
    if name not in names:
        raise CliError(EXIT_REF, f"unknown modality {name!r}; dataset has {names}")


def cmd_gen_data(args):
    cfg = _config(args.config)
    data = generate_dataset(cfg.scene, args.out)
    print(f"wrote {data.episodes} episodes (T={cfg.scene.seq_len}, B={cfg.scene.n_beams}) "
          f"to {args.out}")


def cmd_pretrain(args):
    cfg = _config(args.config)
    _known_modality(args.data, args.modality)
    data = load_dataset(args.data, [args.modality])
    _, rows = pretrain_unimodal(data, args.modality, cfg.latent, cfg.train, out_dir=args.out)
    last = rows[-1]["objective"] if rows else float("nan")
    print(f"pretrained {args.modality} for {len(rows)} epochs; final objective {last:.4f}")


def cmd_finetune(args):
    cfg = _config(args.config)
    if not 0 < args.align_fraction <= 1:
        raise CliError(EXIT_CONFIG, f"--align-fraction must lie in (0, 1], got {args.align_fraction}")
    paths = [p for p in args.init.split(",") if p]
    experts = [load_checkpoint(p) for p in paths]
    model = init_from_experts(experts, cfg.seed)
    data = load_dataset(args.data, model.spec.names)
    full = np.arange(data.episodes)
    try:
        idx = align_subset(full, args.align_fraction, cfg.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    epochs = finetune_epochs(cfg, len(idx), len(full))
    _, rows = finetune_multimodal(data, model, cfg.train, idx, out_dir=args.out, epochs=epochs)
    print(f"fine-tuned on {len(idx)} of {data.episodes} aligned episodes for {epochs} epochs; "
          f"reg_enc {rows[0]['reg_enc']:.4f} -> {rows[-1]['reg_enc']:.4f}")


def cmd_train_task(args):
    cfg = _config(args.config)
    model = model_from_checkpoint(args.repr)
    before = model.params.digest()
    data = load_dataset(args.data, model.spec.names)
    feats = episode_features(model, data, window=cfg.task.window)
    if data.labels.size and data.labels.max() >= cfg.task.classes:
        raise CliError(EXIT_REF, f"label {data.labels.max()} outside [0, {cfg.task.classes})")
    head, rows = train_head(feats, data.labels, cfg.task, seed=cfg.seed)
    if model.params.digest() != before:
        raise RuntimeError("representation parameters changed during head training")
    save_head(args.task, head, model.spec, cfg.seed)
    write_rows(Path(args.task) / "head_log.csv", rows)
    acc = rows[-1]["train_acc"] if rows else float("nan")
    print(f"trained head for {len(rows)} epochs; training accuracy {acc:.4f}")


def cmd_eval(args):
    cfg = _config(args.config)
    model = model_from_checkpoint(args.repr)
    head, _ = load_head(args.task)
    drops = tuple(args.drop_modality or ())
    for name in drops:
        if name not in model.spec.names:
            raise CliError(EXIT_REF, f"unknown modality {name!r} in drop list")
    data = load_dataset(args.data, model.spec.names)
    feats = episode_features(model, data, drop=drops, window=head.cfg.window)
    preds = head.predict_beam(feats)
    y1, y2, y3, score = dba_score(preds, data.labels, cfg.metrics, data.n_beams)
    acc = top1(preds, data.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = EvalRun("eval", drops, preds, data.labels)
    write_report(out / "metrics.csv", [run.row(cfg.metrics, data.n_beams)])
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "truth", "pred"])
        for i, (t, p) in enumerate(zip(data.labels, preds)):
            w.writerow([i, int(t), int(p)])
    print(f"Y1={y1:.6f} Y2={y2:.6f} Y3={y3:.6f} DBA={score:.6f} top1={acc:.6f}")


def cmd_reproduce(args):
    cfg = _config(args.config)
    root = args.out or cfg.output
    s = reproduce_ablations(cfg, root)
    print(f"fused DBA {s['fused_dba']:.4f}; unaligned {s['unaligned_dba']:.4f}; "
          f"shared-only {s['shared_only_dba']:.4f}; results in {root}")


def build_parser():
    p = argparse.ArgumentParser(prog="vibeam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="stage I for one modality")
    g.add_argument("--data", required=True)
    g.add_argument("--modality", required=True)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("finetune", help="stage II from per-modality checkpoints")
    g.add_argument("--data", required=True)
    g.add_argument("--init", required=True, help="comma-separated stage I checkpoints")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--align-fraction", type=float, default=1.0)
    g.set_defaults(func=cmd_finetune)

    g = sub.add_parser("train-task", help="train the beam head on frozen representations")
    g.add_argument("--data", required=True)
    g.add_argument("--repr", required=True)
    g.add_argument("--task", required=True, help="output directory of the head checkpoint")
    g.add_argument("--config")
    g.set_defaults(func=cmd_train_task)

    g = sub.add_parser("eval", help="score a head, optionally hiding modalities")
    g.add_argument("--data", required=True)
    g.add_argument("--repr", required=True)
    g.add_argument("--task", required=True)
    g.add_argument("--drop-modality", nargs="*", default=[])
    g.add_argument("--config")
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("reproduce-ablations", help="run the full ablation pipeline")
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as exc:
        print(f"incompatible checkpoints: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except KeyError as exc:
        print(f"unknown reference: {exc.args[0]}", file=sys.stderr)
        return EXIT_REF
    except (OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
