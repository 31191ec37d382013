"""Two-stage training: unimodal pretraining, then PoE fine-tuning.

Checkpoints are directories holding ``checkpoint.json`` (manifest) and
``params.bin`` (little-endian float64, offsets listed in the manifest).
Optimizer moments go to ``optim.bin`` so interrupted runs can resume.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .fusion import FusionModel, LatentConfig, ModelSpec, NoiseStream, objective
from .optim import OptimConfig, OptimState, optimizer_step
from .params import ParamStore, substream

CHECKPOINT_VERSION = 1
LOG_HEADER = ["epoch", "stage", "elbo", "reg_enc", "reg_dec", "unitarity", "objective"]
SHARED_PREFIXES = ("shared_prior.", "transition.")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs_pretrain: int = 10
    epochs_finetune: int = 10
    lam_enc: float = 1.0
    lam_dec: float = 0.1
    lam_u: float = 1.0
    clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"
    include_task: bool = False
    # stage II only: chance of hiding a modality for a whole training episode
    modality_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0 or self.batch < 1:
            raise ValueError("need lr > 0, clip > 0 and batch >= 1")
        if min(self.lam_enc, self.lam_dec, self.lam_u) < 0:
            raise ValueError("regularization weights must be >= 0")
        if not 0 <= self.modality_dropout < 1:
            raise ValueError("modality_dropout must lie in [0, 1)")

    def optim(self):
        return OptimConfig(self.lr, self.beta1, self.beta2, self.eps, self.clip, self.optimizer)


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    params: ParamStore
    stage: str
    spec: ModelSpec
    config: dict = field(default_factory=dict)
    optim: OptimState | None = None
    epoch: int = 0
    seed: int = 0


def _spec_dict(spec):
    return {"names": list(spec.names),
            "shapes": {k: list(v) for k, v in spec.shapes.items()},
            "latent": asdict(spec.latent)}


def spec_from_dict(d):
    return ModelSpec(tuple(d["names"]), {k: tuple(v) for k, v in d["shapes"].items()},
                     LatentConfig(**d["latent"]))


def _pack(arrays):
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.size
    return table, b"".join(chunks)


def _unpack(table, blob):
    flat = np.frombuffer(blob, dtype="<f8")
    out = {}
    for e in table:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return out


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, ckpt):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, blob = _pack(ckpt.params.arrays())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "module_versions": {"vibeam": __version__},
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "spec": _spec_dict(ckpt.spec),
        "config": ckpt.config,
        "params": table,
    }
    if ckpt.optim is not None:
        moments = {}
        for name in ckpt.optim.m:
            moments[f"m:{name}"] = ckpt.optim.m[name]
            moments[f"v:{name}"] = ckpt.optim.v[name]
        otable, oblob = _pack(moments)
        manifest["optim"] = {"step": ckpt.optim.step, "table": otable}
        _atomic_write(path / "optim.bin", oblob)
    _atomic_write(path / "params.bin", blob)
    _atomic_write(path / "checkpoint.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    man = json.loads((path / "checkpoint.json").read_text())
    if man.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint format {man.get('format_version')!r}")
    arrays = _unpack(man["params"], (path / "params.bin").read_bytes())
    params = ParamStore(arrays.items())
    optim = None
    if "optim" in man:
        moments = _unpack(man["optim"]["table"], (path / "optim.bin").read_bytes())
        optim = OptimState(step=man["optim"]["step"])
        for key, val in moments.items():
            kind, name = key.split(":", 1)
            (optim.m if kind == "m" else optim.v)[name] = val
    return Checkpoint(params, man["stage"], spec_from_dict(man["spec"]), man["config"], optim,
                      man["epoch"], man["seed"])


# --- training loop ---------------------------------------------------------

def _log_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["stage"]] + [f"{r[k]:.10g}" for k in LOG_HEADER[2:]])


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _evaluate_pass(model, data, idx, cfg, active, lam, stage, key, task=None):
    """Objective diagnostics over ``idx`` without updating anything."""
    sums = {"elbo": 0.0, "reg_enc": 0.0, "reg_dec": 0.0, "unitarity": 0.0, "objective": 0.0}
    nb = 0
    batches = _batches(len(idx), cfg.batch, substream(cfg.seed, "shuffle", *key, 0))
    with ad.no_grad():
        for bi, b in enumerate(batches):
            rows = idx[b]
            out = _batch_objective(model, data, rows, cfg, active, lam, (*key, 0, bi), task)
            _accumulate(sums, out, model, active)
            nb += 1
    return {k: v / max(nb, 1) for k, v in sums.items()}


def _batch_objective(model, data, rows, cfg, active, lam, key, task):
    feats = model.prepare(data, rows, names=[m for m in active if m in data.modalities])
    mask = data.mask[rows]
    if cfg.modality_dropout > 0 and len(active) > 1:
        mask = _subset_mask(mask, cfg.modality_dropout, substream(cfg.seed, "subset", *key))
    c = model.cfg
    noise = NoiseStream(cfg.seed, len(rows), c.d_s, c.d_p, model.spec.names, *key)
    labels = data.labels[rows] if task is not None else None
    return objective(model, feats, mask, data.names, noise, lam[0], lam[1], lam[2], active,
                     task, labels)


def _subset_mask(mask, p, rng):
    """Hide each modality for a whole episode with probability ``p``."""
    keep = rng.uniform(size=(mask.shape[0], 1, mask.shape[2])) >= p
    return mask & keep


def _accumulate(sums, out, model, active):
    n = out["elbo"].shape[0]
    sums["elbo"] += float(out["elbo"].data.sum()) / n
    sums["reg_enc"] += float(out["reg_enc"].data)
    sums["reg_dec"] += float(out["reg_dec"].data)
    with ad.no_grad():
        sums["unitarity"] += float(model.unitarity(active).data)
    sums["objective"] += float(out["loss"].data)


def train_loop(model, data, idx, cfg, active, trainable, lam, stage, epochs, key,
               state=None, start_epoch=0, task=None, log_initial=False, checkpoint_fn=None):
    """Minimize the objective over episodes ``idx``; returns (rows, state).

    ``key`` separates RNG streams of different runs.  On a non-finite loss
    the parameters are restored to the last completed epoch and
    TrainingDiverged is raised.
    """
    state = state or OptimState()
    opt = cfg.optim()
    store = model.params
    tensors = {n: store[n] for n in trainable}
    if task is not None:
        tensors.update({n: t for n, t in task.params.items()})
    arrays = {n: t.data for n, t in tensors.items()}
    rows = []
    if log_initial and start_epoch == 0:
        diag = _evaluate_pass(model, data, idx, cfg, active, lam, stage, key, task)
        rows.append({"epoch": 0, "stage": stage, **diag})
    for epoch in range(start_epoch + 1, epochs + 1):
        good = {n: a.copy() for n, a in arrays.items()}
        good_state = OptimState(state.step, {k: v.copy() for k, v in state.m.items()},
                                {k: v.copy() for k, v in state.v.items()})
        sums = {"elbo": 0.0, "reg_enc": 0.0, "reg_dec": 0.0, "unitarity": 0.0, "objective": 0.0}
        batches = _batches(len(idx), cfg.batch, substream(cfg.seed, "shuffle", *key, epoch))
        try:
            for bi, b in enumerate(batches):
                out = _batch_objective(model, data, idx[b], cfg, active, lam, (*key, epoch, bi),
                                       task)
                loss = out["loss"]
                if not math.isfinite(loss.item()):
                    raise ad.NonFiniteError("non-finite loss")
                for t in tensors.values():
                    t.grad = None
                ad.backward(loss)
                grads = {n: t.grad for n, t in tensors.items() if t.grad is not None}
                optimizer_step(arrays, grads, opt, state)
                _accumulate(sums, out, model, active)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            for n, a in good.items():
                arrays[n][...] = a
            state.step, state.m, state.v = good_state.step, good_state.m, good_state.v
            ckpt = checkpoint_fn(epoch - 1, state) if checkpoint_fn else None
            raise TrainingDiverged(f"{stage}: diverged in epoch {epoch}: {exc}", ckpt) from exc
        nb = len(batches)
        rows.append({"epoch": epoch, "stage": stage, **{k: v / nb for k, v in sums.items()}})
    return rows, state


# --- stage I ---------------------------------------------------------------

def model_spec(data, latent):
    return ModelSpec(tuple(data.names), {n: tuple(data.shapes[n]) for n in data.names}, latent)


def pretrain_unimodal(data, modality, latent=None, cfg=None, idx=None, out_dir=None,
                      resume=None, epochs=None):
    """Stage I for one modality.  Only ``data.modalities[modality]`` is read.

    Returns (Checkpoint, log rows).  The checkpoint holds the modality's
    own parameters plus its copies of the shared prior and transition.
    """
    latent = latent or LatentConfig()
    cfg = cfg or TrainConfig()
    if modality not in data.names or modality not in data.modalities:
        raise KeyError(f"dataset has no modality {modality!r}")
    data = data.only(modality)
    idx = np.arange(data.episodes) if idx is None else np.asarray(idx)
    epochs = cfg.epochs_pretrain if epochs is None else epochs
    spec = model_spec(data, latent)
    j = spec.names.index(modality)
    stage = f"pretrain:{modality}"
    keep = (f"{modality}.",) + SHARED_PREFIXES

    model = FusionModel(spec, seed=cfg.seed)
    state, start = None, 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model.params.update(ck.params)
        state, start = ck.optim, ck.epoch
    else:
        model.fit_normalization(data, [modality])
    trainable = [n for n in model.trainable_names() if n.startswith(keep)]
    task = _task_head(model, data, cfg) if cfg.include_task else None

    def snapshot(epoch, st):
        return _stage_checkpoint(model, keep, stage, spec, cfg, st, epoch, out_dir, task)

    rows, state = train_loop(model, data, idx, cfg, (modality,), trainable,
                             (0.0, 0.0, cfg.lam_u), stage, epochs, (1, j), state, start,
                             task, checkpoint_fn=snapshot)
    ckpt = snapshot(epochs, state)
    if out_dir is not None:
        _log_rows(Path(out_dir) / "train_log.csv", rows)
    return ckpt, rows


def _task_head(model, data, cfg):
    from .task import TaskConfig, TaskHead
    c = model.cfg
    T = data.seq_len
    tc = TaskConfig(window=T - 1, classes=data.n_beams)
    return TaskHead(T * c.d_s + c.d_h, tc, seed=cfg.seed)


def _stage_checkpoint(model, keep, stage, spec, cfg, state, epoch, out_dir, task=None):
    params = model.params.subset(keep)
    if task is not None:
        params.update(task.params)
    ckpt = Checkpoint(params, stage, spec, {"train": asdict(cfg)}, state, epoch, cfg.seed)
    if out_dir is not None:
        save_checkpoint(out_dir, ckpt)
    return ckpt


# --- stage II --------------------------------------------------------------

def init_from_experts(checkpoints, seed=0):
    """Assemble a multimodal model from per-modality Stage-I checkpoints.

    Modality parameters are copied; the shared prior and transition are the
    element-wise mean over experts (summed in modality order, so the result
    does not depend on the order of ``checkpoints``).
    """
    cks = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints]
    if not cks:
        raise CheckpointMismatch("no expert checkpoints given")
    ref = _spec_dict(cks[0].spec)
    for c in cks[1:]:
        if _spec_dict(c.spec) != ref:
            raise CheckpointMismatch("expert checkpoints disagree on model layout")
    spec = cks[0].spec
    by_mod = {}
    for c in cks:
        if not c.stage.startswith("pretrain:"):
            raise CheckpointMismatch(f"not a Stage-I checkpoint: {c.stage!r}")
        m = c.stage.split(":", 1)[1]
        if m in by_mod:
            raise CheckpointMismatch(f"two checkpoints for modality {m!r}")
        by_mod[m] = c
    model = FusionModel(spec, seed=seed)
    ordered = [by_mod[m] for m in spec.names if m in by_mod]
    for m, c in by_mod.items():
        for name in c.params.names(f"{m}."):
            model.params.set_array(name, c.params[name].data)
    for name in model.params:
        if name.startswith(SHARED_PREFIXES):
            total = np.zeros_like(model.params[name].data)
            for c in ordered:
                total = total + c.params[name].data
            model.params.set_array(name, total / len(ordered))
    return model


def finetune_multimodal(data, model, cfg=None, idx=None, out_dir=None, resume=None,
                        epochs=None, log_initial=True):
    """Stage II: minimize the regularized multimodal objective over ``idx``."""
    cfg = cfg or TrainConfig()
    idx = np.arange(data.episodes) if idx is None else np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("no aligned episodes to fine-tune on")
    missing = [m for m in model.spec.names if m not in data.modalities]
    if missing:
        raise KeyError(f"dataset lacks modalities {missing}")
    epochs = cfg.epochs_finetune if epochs is None else epochs
    state, start = None, 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model.params.update(ck.params)
        state, start = ck.optim, ck.epoch
    stage = "finetune"
    task = _task_head(model, data, cfg) if cfg.include_task else None
    keep = tuple(f"{m}." for m in model.spec.names) + SHARED_PREFIXES

    def snapshot(epoch, st):
        return _stage_checkpoint(model, keep, stage, model.spec, cfg, st, epoch, out_dir, task)

    rows, state = train_loop(model, data, idx, cfg, model.spec.names, model.trainable_names(),
                             (cfg.lam_enc, cfg.lam_dec, cfg.lam_u), stage, epochs, (2,),
                             state, start, task, log_initial=log_initial, checkpoint_fn=snapshot)
    ckpt = snapshot(epochs, state)
    if out_dir is not None:
        _log_rows(Path(out_dir) / "train_log.csv", rows)
    return ckpt, rows


def model_from_checkpoint(ckpt):
    ck = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    model = FusionModel(ck.spec, seed=ck.seed)
    model.params.update(ck.params.subset([n for n in ck.params if not n.startswith("task.")]))
    return model


# --- task-head checkpoints -------------------------------------------------

def save_head(path, head, spec, seed=0, extra=None):
    """Store a trained head under the trainer's checkpoint format (stage ``task``)."""
    config = {"task": asdict(head.cfg), "in_dim": head.in_dim, **(extra or {})}
    return save_checkpoint(path, Checkpoint(head.params.copy(), "task", spec, config, None, 0, seed))


def load_head(path):
    from .task import TaskConfig, TaskHead
    ck = load_checkpoint(path)
    if ck.stage != "task":
        raise CheckpointMismatch(f"{path} holds stage {ck.stage!r}, not a task head")
    cfg = TaskConfig(**ck.config["task"])
    return TaskHead(ck.config["in_dim"], cfg, params=ck.params), ck
