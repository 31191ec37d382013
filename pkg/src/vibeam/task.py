"""Beam classifier trained on frozen fused representations."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .optim import OptimConfig, OptimState, optimizer_step
from .params import ParamStore, init_mlp, mlp, substream

DESK_WIDTHS = (128, 256, 64, 32)
FULL_WIDTHS = (512, 1024, 256, 64)


@dataclass
class TaskConfig:
    window: int = 4
    widths: tuple = DESK_WIDTHS
    classes: int = 16
    epochs: int = 50
    batch: int = 128
    lr: float = 1e-3
    clip: float = 5.0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.window < 0 or self.classes < 2 or any(w < 1 for w in self.widths):
            raise ValueError("need window >= 0, classes >= 2 and positive widths")


def posterior_mean(step):
    """Mean of the fused shared posterior of a StepPosterior (no sampling)."""
    return step.fused.mean.data.copy()


def aggregate(latents, h_prev, window=None):
    """Concatenate the last ``window + 1`` latents in time order, then ``h_prev``."""
    latents = list(latents)
    if window is None:
        window = len(latents) - 1
    if len(latents) < window + 1:
        raise ValueError(f"need {window + 1} latents for window {window}, got {len(latents)}")
    parts = latents[len(latents) - window - 1:] + [h_prev]
    if any(isinstance(p, ad.Tensor) for p in parts):
        axis = parts[0].ndim - 1
        return ad.concat(parts, axis=axis)
    return np.concatenate([np.asarray(p) for p in parts], axis=-1)


class TaskHead:
    """GELU MLP ``c_t -> logits`` over the beam codebook."""

    def __init__(self, in_dim, cfg, params=None, seed=0, prefix="task"):
        self.in_dim = in_dim
        self.cfg = cfg
        self.prefix = prefix
        if params is None:
            params = ParamStore()
            sizes = [in_dim] + list(cfg.widths) + [cfg.classes]
            init_mlp(params, prefix, sizes, substream(seed, "task-init"), zero_last=True)
        self.params = params

    @property
    def depth(self):
        return len(self.cfg.widths) + 1

    def logits(self, c):
        c = ad.constant(c)
        if c.ndim == 1:
            c = ad.reshape(c, (1, -1))
        if c.shape[1] != self.in_dim:
            raise ad.ShapeError(f"head expects width {self.in_dim}, got {c.shape[1]}")
        return mlp(self.params, self.prefix, c, self.depth)

    def predict(self, c):
        """Class probabilities (softmax), rows sum to one."""
        with ad.no_grad():
            z = self.logits(c).data
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return p

    def predict_beam(self, c):
        return np.argmax(self.predict(c), axis=1)

    def nll(self, c, labels):
        z = self.logits(c)
        rows = np.arange(z.shape[0])
        picked = ad.slice_(z, (rows, np.asarray(labels)))
        return ad.sub(ad.logsumexp(z, axis=1), picked)

    def log_prob_labels(self, means, states, labels):
        """Task log-likelihood for the ELBO: c_T from the last window of means."""
        T = len(means)
        c = aggregate(means, states[T - 1], min(self.cfg.window, T - 1))
        return ad.neg(self.nll(c, labels))


def episode_features(model, data, idx=None, drop=(), window=4):
    """Posterior-mean representations ``c_T`` per episode (no gradient)."""
    mask = data.mask if idx is None else data.mask[np.asarray(idx)]
    if drop:
        mask = mask.copy()
        for name in drop:
            mask[:, :, data.index(name)] = False
    feats = model.prepare(data, idx)
    with ad.no_grad():
        out = model.run(feats, mask, data.names, noise=None)
    means = [m.data for m in out["means"]]
    T = len(means)
    w = min(window, T - 1)
    return aggregate(means, out["states"][T - 1].data, w)


def train_head(features, labels, cfg, seed=0, log_path=None, head=None, eval_fn=None):
    """Cross-entropy training of the head only; returns (head, per-epoch rows)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.classes):
        raise ValueError(f"label outside [0, {cfg.classes})")
    if head is None:
        head = TaskHead(features.shape[1], cfg, seed=seed)
    opt = OptimConfig(lr=cfg.lr, clip=cfg.clip)
    state = OptimState()
    arrays = {n: t.data for n, t in head.params.items()}
    rows = []
    n = len(labels)
    for epoch in range(1, cfg.epochs + 1):
        order = substream(seed, "task-shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            b = order[start:start + cfg.batch]
            head.params.zero_grad()
            loss = ad.mean(head.nll(features[b], labels[b]))
            ad.backward(loss)
            grads = {k: t.grad for k, t in head.params.items() if t.grad is not None}
            optimizer_step(arrays, grads, opt, state)
            total += loss.item() * len(b)
        acc = float(np.mean(head.predict_beam(features) == labels)) if n else 0.0
        row = {"epoch": epoch, "loss": total / max(n, 1), "train_acc": acc}
        if eval_fn is not None:
            row.update(eval_fn(head))
        rows.append(row)
    if log_path is not None:
        write_rows(log_path, rows)
    return head, rows


def write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
