"""Diagonal Gaussians: density, reparameterized sampling, KL and weighted PoE.

All functions work on a single vector (shape ``[d]``) or a batch of rows
(shape ``[n, d]``); reductions run over the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0
_LOG_2PI = math.log(2.0 * math.pi)
# softplus(_ALPHA_ONE) == 1
_ALPHA_ONE = math.log(math.e - 1.0)


class DiagGaussian:
    """Diagonal Gaussian given by mean and log-variance tensors.

    The log-variance is clamped to [-20, 20] on construction.
    """

    __slots__ = ("mean", "log_var")

    def __init__(self, mean, log_var, clamp=True):
        mean = ad.constant(mean)
        log_var = ad.constant(log_var)
        if mean.shape != log_var.shape:
            raise ad.ShapeError(f"mean/log_var shape mismatch {mean.shape} vs {log_var.shape}")
        if clamp:
            log_var = ad.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
        self.mean = mean
        self.log_var = log_var

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def shape(self):
        return self.mean.shape

    def precision(self):
        return ad.exp(ad.neg(self.log_var))

    def variance(self):
        return ad.exp(self.log_var)

    def detach(self):
        return DiagGaussian(self.mean.data.copy(), self.log_var.data.copy(), clamp=False)

    def __repr__(self):
        return f"DiagGaussian(shape={self.shape})"


def _check(a, b, what):
    if a.shape != b.shape:
        raise ad.ShapeError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def log_prob(g, x):
    x = ad.constant(x)
    _check(g.mean, x, "log_prob")
    diff = ad.sub(x, g.mean)
    quad = ad.mul(ad.mul(diff, diff), g.precision())
    inner = ad.add(ad.add(quad, g.log_var), _LOG_2PI)
    return ad.mul(ad.sum_(inner, axis=-1), -0.5)


def kl(q, p):
    """Closed-form KL(q || p), summed over the last axis."""
    _check(q.mean, p.mean, "kl")
    diff = ad.sub(q.mean, p.mean)
    ratio = ad.exp(ad.sub(q.log_var, p.log_var))
    quad = ad.mul(ad.mul(diff, diff), p.precision())
    inner = ad.add(ad.sub(ad.add(ratio, quad), 1.0), ad.sub(p.log_var, q.log_var))
    return ad.mul(ad.sum_(inner, axis=-1), 0.5)


def sample(g, noise):
    """Reparameterized draw ``mean + exp(log_var / 2) * noise``."""
    noise = ad.constant(noise)
    _check(g.mean, noise, "sample")
    return ad.add(g.mean, ad.mul(ad.exp(ad.mul(g.log_var, 0.5)), noise))


@dataclass
class PoEWeights:
    """Expert reliability weights, alpha = softplus(raw) >= 0."""

    raw: ad.Tensor

    @classmethod
    def ones(cls, m):
        return cls(ad.Tensor(np.full(m, _ALPHA_ONE), requires_grad=True))

    def alpha(self, i):
        return ad.softplus(ad.slice_(self.raw, i))

    def values(self):
        return np.logaddexp(0.0, self.raw.data)


def poe_fuse(prior, experts, weights, present):
    """Weighted product of ``prior`` and the present ``experts``.

    ``weights`` is a PoEWeights or a sequence of scalar weights (numbers or
    0-d tensors).  ``present`` holds one entry per expert: a bool, or a
    per-row boolean array when the Gaussians are batched.  Rows with no
    present expert return the prior exactly.
    """
    if prior is None:
        raise ValueError("poe_fuse needs a prior factor")
    if len(present) != len(experts):
        raise ValueError("present mask length differs from expert count")
    for e in experts:
        _check(prior.mean, e.mean, "poe_fuse")

    batched = prior.mean.ndim == 2
    n = prior.mean.shape[0] if batched else None

    prec_prior = prior.precision()
    prec = prec_prior
    weighted_mean = ad.mul(prec_prior, prior.mean)
    any_present = np.zeros(n, dtype=bool) if batched else False
    used = 0
    for i, (e, on) in enumerate(zip(experts, present)):
        on = np.asarray(on, dtype=bool)
        if not on.any():
            continue
        used += 1
        if isinstance(weights, PoEWeights):
            a = weights.alpha(i)
        else:
            a = weights[i]
        lam = ad.mul(e.precision(), a)
        if on.ndim:
            if not batched or on.shape != (n,):
                raise ad.ShapeError(f"present mask shape {on.shape} does not match batch {n}")
            if not on.all():
                lam = ad.mul(lam, _row_mask(on, prior.dim))
        prec = ad.add(prec, lam)
        weighted_mean = ad.add(weighted_mean, ad.mul(lam, e.mean))
        any_present = any_present | on if batched else True

    if used == 0:
        return prior

    mean = ad.div(weighted_mean, prec)
    log_var = ad.neg(ad.log(prec))
    if batched and not np.all(any_present):
        keep = _row_mask(any_present, prior.dim)
        drop = 1.0 - keep
        mean = ad.add(ad.mul(mean, keep), ad.mul(prior.mean, drop))
        log_var = ad.add(ad.mul(log_var, keep), ad.mul(prior.log_var, drop))
    return DiagGaussian(mean, log_var)


def _row_mask(on, d):
    return np.repeat(np.asarray(on, dtype=np.float64)[:, None], d, axis=1)
