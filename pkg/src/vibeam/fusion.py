"""Sequential shared/private latent model with product-of-experts fusion.

At every step ``t`` each present modality ``m`` contributes

* a shared expert ``q_m(z_s | x_m, h)`` that is fused with the shared prior
  ``p(z_s | h)`` by a weighted product of experts,
* a private posterior ``q_m(z_p | x_m, h)`` that is never fused,
* a decoder ``p_m(x_m | z_s, z_p, h)`` with one learnable log-variance.

The state ``h`` follows a deterministic gated update from
``(h, z_s, [z_p for all modalities])`` with absent private slots zero-filled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import prob
from .params import ParamStore, init_linear, init_mlp, linear, mlp, substream
from .spectral import Frontend, FrontendSpec, init_frontend

RADAR = "radar-cube"
_LOG_2PI = math.log(2.0 * math.pi)
PROJ_DIM = 64


@dataclass
class LatentConfig:
    d_s: int = 16
    d_p: int = 16
    d_h: int = 32
    hidden: int = 128
    # linear layers per encoder/decoder/prior net; 3 = two hidden layers
    depth: int = 3
    private: bool = True
    padded_chirps: int = 4

    def __post_init__(self):
        if min(self.d_s, self.d_p, self.d_h, self.hidden, self.depth) < 1:
            raise ValueError("latent, state and hidden sizes must be >= 1")


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model's parameter layout."""

    names: tuple
    shapes: dict
    latent: LatentConfig = field(default_factory=LatentConfig)

    def feat_dim(self, name):
        return int(np.prod(self.shapes[name]))


@dataclass
class StepPosterior:
    experts: dict
    fused: prob.DiagGaussian
    private: dict
    z_s: ad.Tensor
    z_p: dict
    h: ad.Tensor
    present: dict
    prior_s: prob.DiagGaussian
    prior_p: dict


def _gaussian(out, d):
    mean = ad.slice_(out, (slice(None), slice(0, d)))
    log_var = ad.slice_(out, (slice(None), slice(d, 2 * d)))
    return prob.DiagGaussian(mean, log_var)


class FusionModel:
    """Parameters plus forward computations of the representation model."""

    def __init__(self, spec, params=None, seed=0):
        self.spec = spec
        self.cfg = spec.latent
        self.seed = seed
        self.params = params if params is not None else self.init_params(spec, seed)
        self.frontends = {}
        for name in spec.names:
            if name == RADAR:
                self.frontends[name] = Frontend(self.params, f"{name}.frontend", self.radar_spec(name))
        self._proj = {}

    # --- construction ------------------------------------------------------

    def radar_spec(self, name=RADAR):
        return _radar_spec(self.spec, name)

    @staticmethod
    def init_params(spec, seed):
        c = spec.latent
        store = ParamStore()
        M = len(spec.names)
        hid = [c.hidden] * (c.depth - 1)
        for j, name in enumerate(spec.names):
            rng = substream(seed, "init", j)
            din = dout = _net_dim(spec, name)
            if name == RADAR:
                init_frontend(store, f"{name}.frontend", _radar_spec(spec, name))
            shift, scale = _default_norm(spec.shapes[name], name)
            store.add(f"{name}.norm.shift", shift)
            store.add(f"{name}.norm.scale", scale)
            init_mlp(store, f"{name}.enc_s", [din + c.d_h] + hid + [2 * c.d_s], rng)
            if c.private:
                init_mlp(store, f"{name}.enc_p", [din + c.d_h] + hid + [2 * c.d_p], rng)
                init_mlp(store, f"{name}.prior_p", [c.d_h] + hid + [2 * c.d_p], rng)
            dec_in = c.d_s + (c.d_p if c.private else 0) + c.d_h
            init_mlp(store, f"{name}.dec", [dec_in] + hid + [dout], rng, zero_last=True)
            store.add(f"{name}.dec_logvar", np.array(0.0))
            store.add(f"{name}.alpha_raw", np.array(math.log(math.e - 1.0)))
        rng = substream(seed, "init", M)
        init_mlp(store, "shared_prior", [c.d_h] + hid + [2 * c.d_s], rng)
        trans_in = c.d_h + c.d_s + (M * c.d_p if c.private else 0)
        init_linear(store, "transition.gate", trans_in, c.d_h, rng)
        init_linear(store, "transition.cand", trans_in, c.d_h, rng)
        return store

    def trainable_names(self):
        return [n for n in self.params if ".norm." not in n]

    def modality_prefixes(self, name):
        return [f"{name}."]

    # --- input transforms --------------------------------------------------

    def fit_normalization(self, data, names=None):
        """Set fixed per-modality input normalization from present entries."""
        for name in names or self.spec.names:
            if name not in data.modalities:
                continue
            j = data.index(name)
            x = data.modalities[name][data.mask[:, :, j]]
            if len(x) == 0:
                continue
            x = x.reshape(len(x), -1)
            if name == "rf-power":
                x = np.log(x + 1e-3)
            if name == RADAR:
                shift = np.zeros(x.shape[1])
                scale = np.full(x.shape[1], max(np.sqrt(np.mean(x ** 2)), 1e-8))
            else:
                shift = x.mean(axis=0)
                scale = np.maximum(x.std(axis=0), 1e-6)
            self.params.set_array(f"{name}.norm.shift", shift)
            self.params.set_array(f"{name}.norm.scale", scale)

    def transform(self, name, x):
        """Raw modality values [n, ...] -> normalized flat features [n, D]."""
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if name == "rf-power":
            x = np.log(np.maximum(x, 0.0) + 1e-3)
        shift = self.params[f"{name}.norm.shift"].data
        scale = self.params[f"{name}.norm.scale"].data
        return (x - shift) / scale

    # --- networks ----------------------------------------------------------

    def _encoder_features(self, name, x):
        if name != RADAR:
            return ad.constant(x)
        fe = self.frontends[name]
        n = x.shape[0]
        cube = x.reshape((n,) + tuple(self.spec.shapes[name]))
        Y = fe.forward(fe.encode_input(cube))
        return ad.mul(fe.features_from_pairs(Y, n), self._radar_gain(name))

    def _radar_gain(self, name):
        # the window has unit Frobenius norm, so X*W is ~sqrt(S*C') smaller than X
        rs = self.radar_spec(name)
        return math.sqrt(rs.samples * rs.padded_chirps)

    def shared_prior(self, h):
        return _gaussian(mlp(self.params, "shared_prior", h, self.cfg.depth), self.cfg.d_s)

    def private_prior(self, name, h):
        return _gaussian(mlp(self.params, f"{name}.prior_p", h, self.cfg.depth), self.cfg.d_p)

    def encode(self, name, x, h):
        feats = self._encoder_features(name, x)
        inp = ad.concat([feats, h], axis=1)
        q_s = _gaussian(mlp(self.params, f"{name}.enc_s", inp, self.cfg.depth), self.cfg.d_s)
        q_p = None
        if self.cfg.private:
            q_p = _gaussian(mlp(self.params, f"{name}.enc_p", inp, self.cfg.depth), self.cfg.d_p)
        return q_s, q_p

    def decode(self, name, z_s, z_p, h):
        parts = [z_s, z_p, h] if self.cfg.private else [z_s, h]
        out = mlp(self.params, f"{name}.dec", ad.concat(parts, axis=1), self.cfg.depth)
        if name != RADAR:
            return out
        fe = self.frontends[name]
        n = out.shape[0]
        out = ad.mul(out, 1.0 / self._radar_gain(name))
        X = fe.inverse(fe.pairs_from_features(out, n))
        return fe.data_from_pairs(X, n)

    def alpha(self, name):
        return ad.softplus(self.params[f"{name}.alpha_raw"])

    def transition(self, h, z_s, z_p_all):
        parts = [h, z_s] + (list(z_p_all) if self.cfg.private else [])
        inp = ad.concat(parts, axis=1)
        gate = ad.sigmoid(linear(self.params, "transition.gate", inp))
        cand = ad.tanh(linear(self.params, "transition.cand", inp))
        return ad.add(ad.mul(ad.sub(1.0, gate), h), ad.mul(gate, cand))

    def loglik(self, name, x, xhat):
        """Per-row Gaussian log-likelihood with the modality's scalar variance."""
        lv = self.params[f"{name}.dec_logvar"]
        r = ad.sub(ad.constant(x), xhat)
        sq = ad.sum_(ad.mul(r, r), axis=1)
        D = xhat.shape[1]
        return ad.mul(ad.add(ad.add(ad.mul(sq, ad.exp(ad.neg(lv))), ad.mul(lv, float(D))),
                             D * _LOG_2PI), -0.5)

    def projection(self, name):
        """Fixed random sign projection used by the decoder regularizer."""
        D = self.decoder_dim(name)
        if D <= PROJ_DIM:
            return None
        if name not in self._proj:
            rng = substream(self.seed, "proj", self.spec.names.index(name))
            self._proj[name] = rng.choice([-1.0, 1.0], size=(D, PROJ_DIM)) / math.sqrt(PROJ_DIM)
        return self._proj[name]

    def decoder_dim(self, name):
        return self.spec.feat_dim(name)

    # --- inference ---------------------------------------------------------

    def infer_step(self, xs, present, h_prev, noise_s, noise_p, active=None):
        """One step of inference.

        ``xs[name]`` holds normalized features [n, D]; ``present[name]`` a
        boolean row mask.  Modalities outside ``active`` are treated as
        absent.  Noise arrays are standard-normal draws (zeros give means).
        """
        names = self.spec.names if active is None else active
        n = h_prev.shape[0]
        prior_s = self.shared_prior(h_prev)
        experts, privates, prior_p, pres = {}, {}, {}, {}
        for name in names:
            on = np.asarray(present.get(name, np.zeros(n, bool)), dtype=bool)
            if not on.any():
                continue
            x = xs[name]
            if x.shape[0] != n:
                raise ad.ShapeError(f"{name}: batch {x.shape[0]} vs state batch {n}")
            q_s, q_p = self.encode(name, x, h_prev)
            experts[name] = q_s
            privates[name] = q_p
            pres[name] = on
            if self.cfg.private:
                prior_p[name] = self.private_prior(name, h_prev)
        order = list(experts)
        fused = prob.poe_fuse(prior_s, [experts[m] for m in order],
                              [self.alpha(m) for m in order], [pres[m] for m in order])
        z_s = prob.sample(fused, noise_s)
        z_p = {}
        slots = []
        for name in self.spec.names:
            if self.cfg.private and name in privates:
                z = prob.sample(privates[name], noise_p[name])
                if not pres[name].all():
                    z = ad.mul(z, np.repeat(pres[name][:, None].astype(float), self.cfg.d_p, 1))
                z_p[name] = z
                slots.append(z)
            elif self.cfg.private:
                slots.append(ad.constant(np.zeros((n, self.cfg.d_p))))
        h = self.transition(h_prev, z_s, slots)
        return StepPosterior(experts, fused, privates, z_s, z_p, h, pres, prior_s, prior_p)

    def prepare(self, data, idx=None, names=None):
        """Normalized features per modality, [n, T, D], for episodes ``idx``."""
        names = self.spec.names if names is None else names
        sel = slice(None) if idx is None else np.asarray(idx)
        out = {}
        for name in names:
            if name not in data.modalities:
                continue
            x = data.modalities[name][sel]
            n, T = x.shape[:2]
            out[name] = self.transform(name, x.reshape(n * T, -1)).reshape(n, T, -1)
        return out

    def run(self, feats, mask, names, noise=None, active=None, task=None, labels=None,
            want_regs=False):
        """Unroll over time; return per-episode ELBO terms and diagnostics.

        ``feats`` maps name -> [n, T, D]; ``mask`` is [n, T, M] over
        ``names`` (the dataset's modality order).  ``noise`` is a callable
        ``noise(t) -> (eps_s, {name: eps_p})`` or None for posterior means.
        """
        active = tuple(self.spec.names if active is None else active)
        n, T = mask.shape[:2]
        c = self.cfg
        h = ad.constant(np.zeros((n, c.d_h)))
        elbo = ad.constant(np.zeros(n))
        terms = {"loglik": 0.0, "kl_shared": 0.0, "kl_private": 0.0}
        enc_terms, enc_count = [], 0
        residuals = []
        means, states = [], [h]
        for t in range(T):
            present = {m: mask[:, t, names.index(m)] for m in active if m in names}
            xs = {m: feats[m][:, t] for m in present if present[m].any()}
            if noise is None:
                eps_s = np.zeros((n, c.d_s))
                eps_p = {m: np.zeros((n, c.d_p)) for m in self.spec.names}
            else:
                eps_s, eps_p = noise(t)
            step = self.infer_step(xs, present, h, eps_s, eps_p, active)
            kl_s = prob.kl(step.fused, step.prior_s)
            step_elbo = ad.neg(kl_s)
            terms["kl_shared"] += float(kl_s.data.sum())
            res_t = {}
            for m in step.experts:
                on = step.present[m].astype(float)
                xhat = self.decode(m, step.z_s, step.z_p.get(m), h)
                ll = self.loglik(m, xs[m], xhat)
                step_elbo = ad.add(step_elbo, ad.mul(ll, on))
                terms["loglik"] += float((ll.data * on).sum())
                if c.private:
                    klp = ad.mul(prob.kl(step.private[m], step.prior_p[m]), on)
                    step_elbo = ad.sub(step_elbo, klp)
                    terms["kl_private"] += float(klp.data.sum())
                if want_regs:
                    enc_terms.append(ad.sum_(ad.mul(prob.kl(step.experts[m], step.fused), on)))
                    enc_count += int(on.sum())
                    res_t[m] = (ad.sub(ad.constant(xs[m]), xhat), step.present[m])
            elbo = ad.add(elbo, step_elbo)
            residuals.append(res_t)
            means.append(step.fused.mean)
            h = step.h
            states.append(h)
        if task is not None:
            logp = task.log_prob_labels(means, states, labels)
            elbo = ad.add(elbo, logp)
        out = {"elbo": elbo, "terms": terms, "means": means, "states": states}
        if want_regs:
            out["reg_enc"] = (ad.mul(_sum_all(enc_terms), 1.0 / enc_count) if enc_count
                              else ad.constant(0.0))
            out["reg_dec"] = self.reg_dec_sequence(residuals)
        return out

    def reg_dec_sequence(self, residuals):
        """Decoder regularizer averaged over the steps where a pair is observed."""
        total = ad.constant(0.0)
        names = self.spec.names
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                vals = []
                for res_t in residuals:
                    if a not in res_t or b not in res_t:
                        continue
                    (ra, pa), (rb, pb) = res_t[a], res_t[b]
                    rows = np.nonzero(pa & pb)[0]
                    if len(rows) < 2:
                        continue
                    pick = lambda r: r if len(rows) == r.shape[0] else ad.slice_(r, rows)
                    vals.append(reg_dec({a: pick(ra), b: pick(rb)},
                                        {a: self.projection(a), b: self.projection(b)}))
                if vals:
                    total = ad.add(total, ad.mul(_sum_all(vals), 1.0 / len(vals)))
        return total

    def unitarity(self, active=None):
        active = self.spec.names if active is None else active
        total = ad.constant(0.0)
        for name, fe in self.frontends.items():
            if name in active:
                total = ad.add(total, fe.unitarity_penalty())
        return total


def _radar_spec(spec, name):
    two_n, s, c = spec.shapes[name]
    return FrontendSpec(two_n // 2, s, c, max(c, spec.latent.padded_chirps))


def _net_dim(spec, name):
    """Width of the encoder input and decoder output for a modality."""
    if name == RADAR:
        return _radar_spec(spec, name).z_size
    return spec.feat_dim(name)


def _sum_all(ts):
    total = ts[0]
    for t in ts[1:]:
        total = ad.add(total, t)
    return total


def _default_norm(shape, name):
    D = int(np.prod(shape))
    return np.zeros(D), np.ones(D)


# --- regularizers and objective --------------------------------------------

def reg_enc(steps):
    """Mean KL(q_m || fused) over rows, steps and present modalities.

    ``steps`` is a list of StepPosterior (or objects with ``experts``,
    ``fused`` and ``present``).
    """
    terms, count = [], 0
    for st in steps:
        for m, q in st.experts.items():
            on = np.asarray(st.present[m], dtype=float)
            k = prob.kl(q, st.fused)
            terms.append(ad.sum_(ad.mul(k, on)) if k.ndim else ad.mul(k, float(on)))
            count += int(on.sum())
    if not count:
        return ad.constant(0.0)
    return ad.mul(_sum_all(terms), 1.0 / count)


def reg_dec(residuals, projections=None):
    """Sum over modality pairs of the squared Frobenius norm of the unbiased
    mini-batch cross-covariance of their residuals ([n, D] each)."""
    names = list(residuals)
    n = residuals[names[0]].shape[0]
    if n < 2:
        raise ValueError("decoder regularizer needs a batch of at least 2")
    centered = {}
    for m in names:
        r = ad.constant(residuals[m])
        if r.shape[0] != n:
            raise ad.ShapeError(f"residual batch mismatch {r.shape[0]} vs {n}")
        P = None if projections is None else projections.get(m)
        if P is not None:
            r = ad.matmul(r, P)
        mu = ad.mul(ad.sum_(r, axis=0), 1.0 / n)
        centered[m] = ad.sub(r, ad.expand(mu, 0, n))
    total = ad.constant(0.0)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            cov = ad.mul(ad.matmul(ad.transpose(centered[a]), centered[b]), 1.0 / (n - 1))
            total = ad.add(total, ad.sum_(ad.mul(cov, cov)))
    return total


def objective(model, feats, mask, names, noise=None, lam_enc=0.0, lam_dec=0.0, lam_u=0.0,
              active=None, task=None, labels=None):
    """Minimization form: -mean(ELBO) + lam_enc*R_enc + lam_dec*R_dec + lam_u*unitarity."""
    if min(lam_enc, lam_dec, lam_u) < 0:
        raise ValueError("regularization weights must be >= 0")
    want = lam_enc > 0 or lam_dec > 0
    out = model.run(feats, mask, names, noise, active, task, labels, want_regs=True)
    n = mask.shape[0]
    loss = ad.mul(ad.sum_(out["elbo"]), -1.0 / n)
    if lam_enc > 0:
        loss = ad.add(loss, ad.mul(out["reg_enc"], lam_enc))
    if lam_dec > 0:
        loss = ad.add(loss, ad.mul(out["reg_dec"], lam_dec))
    if lam_u > 0:
        loss = ad.add(loss, ad.mul(model.unitarity(active), lam_u))
    out["loss"] = loss
    out["want_regs"] = want
    return out


def elbo_sequence(model, x_seq, mask, names, noise=None, include_task=False, task=None, y=None):
    """ELBO of one episode: ``x_seq[name]`` is [T, ...] raw data, ``mask`` [T, M]."""
    feats = {}
    for name, x in x_seq.items():
        x = np.asarray(x)
        feats[name] = model.transform(name, x.reshape(x.shape[0], -1))[None]
    labels = None if y is None else np.array([y])
    out = model.run(feats, np.asarray(mask, bool)[None], names, noise,
                    task=task if include_task else None, labels=labels)
    for key, val in out["terms"].items():
        if not math.isfinite(val):
            raise ad.NonFiniteError(f"non-finite ELBO term {key!r}")
    return ad.sum_(out["elbo"]), out


class NoiseStream:
    """Deterministic standard-normal draws for reparameterization."""

    def __init__(self, seed, n, d_s, d_p, names, *key):
        self.rng = substream(seed, "noise", *key)
        self.n, self.d_s, self.d_p, self.names = n, d_s, d_p, names
        self._cache = {}

    def __call__(self, t):
        while t not in self._cache:
            k = len(self._cache)
            eps_s = self.rng.standard_normal((self.n, self.d_s))
            eps_p = {m: self.rng.standard_normal((self.n, self.d_p)) for m in self.names}
            self._cache[k] = (eps_s, eps_p)
        return self._cache[t]
