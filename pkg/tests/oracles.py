"""Independent reference implementations used by the tests.

Nothing here imports the autodiff engine; every oracle is plain numpy or
scalar math so that agreement is evidence rather than self-consistency.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import simpson

LOG_2PI = math.log(2.0 * math.pi)


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softplus_scalar(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def np_gelu(x):
    return np.vectorize(gelu_scalar)(x)


def np_mlp(arrays, name, x, depth):
    for i in range(depth):
        x = x @ arrays[f"{name}.l{i}.W"] + arrays[f"{name}.l{i}.b"]
        if i < depth - 1:
            x = np_gelu(x)
    return x


def gauss_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def kl_diag(mq, vq, mp, vp):
    return 0.5 * float(np.sum(vq / vp + (mq - mp) ** 2 / vp - 1.0 + np.log(vp / vq)))


def grid_poe_logdensity(prior, experts, alphas, grid):
    """Log of the grid-normalized weighted product prior * prod expert^alpha."""
    logp = gauss_logpdf(grid, *prior)
    for (m, v), a in zip(experts, alphas):
        logp = logp + a * gauss_logpdf(grid, m, v)
    peak = logp.max()
    z = simpson(np.exp(logp - peak), x=grid)
    return logp - peak - math.log(z)


def kl_monte_carlo(mq, vq, mp, vp, n, rng):
    """Mean and standard error of ln q(z) - ln p(z) under z ~ q."""
    z = mq + np.sqrt(vq) * rng.standard_normal((n, len(mq)))
    d = (gauss_logpdf(z, mq, vq) - gauss_logpdf(z, mp, vp)).sum(axis=1)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n))


def linear_gaussian_evidence(x, mu0, var0, a, c, var_x):
    """log N(x; a*mu0 + c, a^2 var0 + var_x) for z ~ N(mu0, var0), x|z ~ N(a z + c, var_x)."""
    return float(gauss_logpdf(x, a * mu0 + c, a * a * var0 + var_x))


def unimodal_vae_elbo(arrays, name, x, eps_s, eps_p, d_s, d_p, d_h, depth, private=True):
    """Single-step, single-modality ELBO from the raw parameter arrays.

    The approximate shared posterior is the alpha-weighted product of the
    prior and the encoder Gaussian; the private posterior is the encoder
    Gaussian alone.  KL terms are analytic, the likelihood uses one draw.
    """
    clamp = lambda lv: np.clip(lv, -20.0, 20.0)
    h = np.zeros((1, d_h))
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    shift, scale = arrays[f"{name}.norm.shift"], arrays[f"{name}.norm.scale"]
    xn = (x - shift) / scale

    prior = np_mlp(arrays, "shared_prior", h, depth)[0]
    pm, pv = prior[:d_s], np.exp(clamp(prior[d_s:]))
    inp = np.concatenate([xn, h], axis=1)
    enc = np_mlp(arrays, f"{name}.enc_s", inp, depth)[0]
    em, ev = enc[:d_s], np.exp(clamp(enc[d_s:]))
    alpha = softplus_scalar(float(arrays[f"{name}.alpha_raw"]))
    prec = 1.0 / pv + alpha / ev
    qv = 1.0 / prec
    qm = (pm / pv + alpha * em / ev) * qv
    qv = np.exp(clamp(np.log(qv)))
    z_s = qm + np.sqrt(qv) * eps_s
    elbo = -kl_diag(qm, qv, pm, pv)
    dec_in = [z_s]
    if private:
        pp = np_mlp(arrays, f"{name}.prior_p", h, depth)[0]
        ppm, ppv = pp[:d_p], np.exp(clamp(pp[d_p:]))
        ep = np_mlp(arrays, f"{name}.enc_p", inp, depth)[0]
        qpm, qpv = ep[:d_p], np.exp(clamp(ep[d_p:]))
        dec_in.append(qpm + np.sqrt(qpv) * eps_p)
        elbo -= kl_diag(qpm, qpv, ppm, ppv)
    dec_in.append(h[0])
    xhat = np_mlp(arrays, f"{name}.dec", np.concatenate(dec_in)[None], depth)[0]
    lv = float(arrays[f"{name}.dec_logvar"])
    elbo += float(np.sum(gauss_logpdf(xn[0], xhat, math.exp(lv))))
    return elbo
