"""End-to-end ablation run: data, both training stages, heads and reports.

Everything is derived from one RunConfig and its seed, so two runs with
the same config write byte-identical CSVs and checkpoints.

Output layout under the run root::

    data/                         dataset directory
    ckpt/pretrain-<variant>-<m>/  Stage-I checkpoints (+ train_log.csv)
    ckpt/finetune-<run>/          Stage-II checkpoints (+ train_log.csv)
    heads/<run>/                  task heads (+ head_log.csv)
    metrics.csv                   every evaluation (run x drop set)
    head_curves.csv               per-epoch head accuracy (aligned vs not, dual vs shared)
    fraction_sweep.csv            DBA against the aligned fraction
    missing_modality.csv          degradation per drop set
    summary.json                  the quantities behind the ordinal checks
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import dump_config
from .metrics import EvalRun, ablation_report, dba_score, top1, write_report
from .params import substream
from .scene import generate_dataset
from .task import episode_features, train_head, write_rows
from .trainer import (Checkpoint, finetune_multimodal, init_from_experts, pretrain_unimodal,
                      save_checkpoint, save_head)

# the modalities whose joint removal is compared with removing either alone
SENSING_PAIR = ("position", "radar-cube")


def split_episodes(n, test_fraction, seed):
    """Seeded train/test split; both index arrays sorted."""
    perm = substream(seed, "split").permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def align_subset(idx, fraction, seed):
    """Seeded subset of ``round(fraction * len(idx))`` episodes.

    Subsets for smaller fractions are contained in those for larger ones.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"align fraction must lie in (0, 1], got {fraction}")
    idx = np.asarray(idx)
    n = int(round(fraction * len(idx)))
    if n < 1:
        raise ValueError(f"align fraction {fraction} selects no episodes")
    perm = substream(seed, "align-subset").permutation(len(idx))
    return np.sort(idx[perm[:n]])


def finetune_epochs(cfg, n_subset, n_full):
    """Stage-II epochs for an aligned subset.

    With ``equal_updates`` every subset gets the optimizer-update budget of
    the largest one, so the sweep compares amounts of aligned data rather
    than amounts of training.
    """
    K = cfg.train.epochs_finetune
    if not cfg.pipeline.equal_updates:
        return K
    b = cfg.train.batch
    budget = K * math.ceil(n_full / b)
    return math.ceil(budget / math.ceil(n_subset / b))


def drop_sets(names):
    """Every proper subset of modalities to hide, plus hiding all of them."""
    out = []
    for k in range(len(names) + 1):
        out.extend(itertools.combinations(names, k))
    return out


def fraction_tag(f):
    return f"F{f:g}"


class Evaluator:
    """Trains a head on frozen train-split features and scores the test split."""

    def __init__(self, data, train_idx, test_idx, task_cfg, dba_cfg, seed, root):
        self.data, self.train_idx, self.test_idx = data, train_idx, test_idx
        self.task_cfg, self.dba_cfg, self.seed = task_cfg, dba_cfg, seed
        self.root = Path(root)
        self.runs, self.curves = [], []

    def features(self, model, idx, drop=()):
        return episode_features(model, self.data, idx, drop=drop, window=self.task_cfg.window)

    def __call__(self, model, run, drops=((),)):
        f_train = self.features(model, self.train_idx)
        f_test = self.features(model, self.test_idx)
        truths = self.data.labels[self.test_idx]
        B = self.data.n_beams

        def on_test(head):
            p = head.predict_beam(f_test)
            return {"test_top1": top1(p, truths), "test_dba": dba_score(p, truths, self.dba_cfg)[3]}

        out = self.root / "heads" / run
        head, rows = train_head(f_train, self.data.labels[self.train_idx], self.task_cfg,
                                seed=self.seed, eval_fn=on_test)
        save_head(out, head, model.spec, self.seed, {"run": run})
        write_rows(out / "head_log.csv", rows)
        self.curves.extend({"run": run, **r} for r in rows)
        results = {}
        for drop in drops:
            fd = f_test if not drop else self.features(model, self.test_idx, drop)
            preds = head.predict_beam(fd)
            ev = EvalRun(run, tuple(drop), preds, truths, dataset="test")
            self.runs.append(ev)
            results[tuple(drop)] = ev.row(self.dba_cfg, B)
        return results


def reproduce_ablations(cfg, root=None, log=print):
    """Run the whole ablation study; returns the summary dict."""
    root = Path(cfg.output if root is None else root)
    root.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    t0 = time.perf_counter()

    def say(msg):
        if log is not None:
            log(f"[{time.perf_counter() - t0:7.1f}s] {msg}")

    (root / "config.json").write_text(dump_config(cfg))
    data = generate_dataset(cfg.scene, root / "data")
    names = data.names
    say(f"dataset: {data.episodes} episodes, modalities {', '.join(names)}")
    train_idx, test_idx = split_episodes(data.episodes, cfg.pipeline.test_fraction, seed)
    ev = Evaluator(data, train_idx, test_idx, cfg.task, cfg.metrics, seed, root)

    variants = {"dual": cfg.latent, "shared": replace(cfg.latent, private=False)}
    experts = {}
    for variant, latent in variants.items():
        experts[variant] = []
        for m in names:
            ck, rows = pretrain_unimodal(data, m, latent, cfg.train, train_idx,
                                         out_dir=root / "ckpt" / f"pretrain-{variant}-{m}")
            experts[variant].append(ck)
            say(f"pretrain {variant}/{m}: objective {rows[0]['objective']:.2f} -> "
                f"{rows[-1]['objective']:.2f}" if rows else f"pretrain {variant}/{m}: 0 epochs")

    summary = {"seed": seed, "train_episodes": int(len(train_idx)),
               "test_episodes": int(len(test_idx))}

    unaligned = init_from_experts(experts["dual"], seed)
    save_checkpoint(root / "ckpt" / "unaligned",
                    _as_checkpoint(unaligned, "init", cfg))
    summary["unaligned_dba"] = ev(unaligned, "unaligned")[()]["dba"]
    say(f"unaligned PoE of experts: DBA {summary['unaligned_dba']:.4f}")

    sweep = []
    full = max(cfg.pipeline.fractions)
    for frac in sorted(cfg.pipeline.fractions, reverse=True):
        run = f"dual-{fraction_tag(frac)}"
        idx = align_subset(train_idx, frac, seed)
        model = init_from_experts(experts["dual"], seed)
        epochs = finetune_epochs(cfg, len(idx), len(align_subset(train_idx, full, seed)))
        ck, rows = finetune_multimodal(data, model, cfg.train, idx, epochs=epochs,
                                       out_dir=root / "ckpt" / f"finetune-{run}")
        drops = drop_sets(names) if frac == full else ((),)
        res = ev(model, run, drops)
        sweep.append({"d_s": cfg.latent.d_s, "fraction": frac, "episodes": len(idx),
                      "epochs": epochs,
                      "dba": res[()]["dba"], "top1": res[()]["top1"]})
        say(f"finetune {run} on {len(idx)} episodes: DBA {res[()]['dba']:.4f}")
        if frac == full:
            summary["fused_dba"] = res[()]["dba"]
            summary["reg_enc_initial"] = rows[0]["reg_enc"]
            summary["reg_enc_final"] = rows[-1]["reg_enc"]
            summary["single_modality_dba"] = {
                m: res[tuple(n for n in names if n != m)]["dba"] for m in names}
            report = ablation_report([r for r in ev.runs if r.run == run], cfg.metrics,
                                     data.n_beams)
            summary["degradation"] = {r["drop_set"]: r["degradation"] for r in report}
            summary["sensing_pair"] = list(SENSING_PAIR)
            _write_csv(root / "missing_modality.csv", ["drop_set", "dba", "top1", "degradation"],
                       report)
    summary["fraction_dba"] = {fraction_tag(r["fraction"]): r["dba"] for r in sweep}

    shared = init_from_experts(experts["shared"], seed)
    run = f"shared-{fraction_tag(full)}"
    finetune_multimodal(data, shared, cfg.train, align_subset(train_idx, full, seed),
                        out_dir=root / "ckpt" / f"finetune-{run}")
    summary["shared_only_dba"] = ev(shared, run)[()]["dba"]
    say(f"finetune {run}: DBA {summary['shared_only_dba']:.4f}")

    rows = [r.row(cfg.metrics, data.n_beams) for r in ev.runs]
    write_report(root / "metrics.csv", rows)
    _write_csv(root / "fraction_sweep.csv",
               ["d_s", "fraction", "episodes", "epochs", "dba", "top1"], sweep)
    _write_csv(root / "head_curves.csv",
               ["run", "epoch", "loss", "train_acc", "test_top1", "test_dba"], ev.curves)
    (root / "summary.json").write_text(json.dumps(_rounded(summary), indent=2, sort_keys=True)
                                       + "\n")
    say("done")
    return summary


def _as_checkpoint(model, stage, cfg):
    return Checkpoint(model.params.copy(), stage, model.spec, {"train": asdict(cfg.train)},
                      None, 0, cfg.seed)


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


def _rounded(obj):
    if isinstance(obj, float):
        return round(obj, 10)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    return obj
