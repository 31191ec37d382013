"""The ten acceptance criteria, one test each, with a pass/fail line per criterion."""

import json
import math
import time

import numpy as np
import pytest

import oracles
from conftest import CALIBRATION
from vibeam import autodiff as ad
from vibeam import prob
from vibeam.fusion import FusionModel, LatentConfig, ModelSpec, elbo_sequence
from vibeam.metrics import dba_score, read_report, top1
from vibeam.params import ParamStore, init_mlp, mlp
from vibeam.spectral import Frontend, FrontendSpec, init_frontend
from vibeam.scene import synth_radar_cube, stack_complex


# --- 1: autodiff soundness --------------------------------------------------

def _primitive_cases(rng):
    """(name, inputs, function of the inputs) for every engine primitive."""
    A = lambda *s: rng.standard_normal(s)
    P = lambda *s: rng.uniform(0.5, 2.0, s)
    C = lambda *s: np.where(rng.random(s) < 0.5, -1.0, 1.0) * rng.uniform(0.3, 1.7, s)
    return [
        ("add", [A(3, 4), A(3, 4)], lambda a, b: ad.add(a, b)),
        ("add-scalar", [A(3, 4), A()], lambda a, b: ad.add(a, b)),
        ("sub", [A(3, 4), A(3, 4)], lambda a, b: ad.sub(a, b)),
        ("mul", [A(3, 4), A(3, 4)], lambda a, b: ad.mul(a, b)),
        ("div", [A(3, 4), P(3, 4)], lambda a, b: ad.div(a, b)),
        ("neg", [A(3, 4)], ad.neg),
        ("matmul", [A(3, 4), A(4, 2)], ad.matmul),
        ("cmatmul", [A(2, 3, 4), A(2, 4, 2)], ad.cmatmul),
        ("transpose", [A(2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
        ("reshape", [A(3, 4)], lambda a: ad.reshape(a, (2, 6))),
        ("concat", [A(3, 2), A(3, 4)], lambda a, b: ad.concat([a, b], axis=1)),
        ("slice", [A(4, 5)], lambda a: ad.slice_(a, (slice(1, 3), slice(None, None, 2)))),
        ("expand", [A(3)], lambda a: ad.expand(a, 0, 4)),
        ("sum", [A(3, 4)], lambda a: ad.sum_(a, axis=0)),
        ("mean", [A(3, 4)], lambda a: ad.mean(a, axis=1)),
        ("exp", [A(3, 4)], ad.exp),
        ("log", [P(3, 4)], ad.log),
        ("sqrt", [P(3, 4)], ad.sqrt),
        ("softplus", [A(3, 4)], ad.softplus),
        ("tanh", [A(3, 4)], ad.tanh),
        ("sigmoid", [A(3, 4)], ad.sigmoid),
        ("gelu", [A(3, 4)], ad.gelu),
        ("clip", [C(3, 4)], lambda a: ad.clip(a, -1.0, 1.0)),
        ("logsumexp", [A(3, 4)], lambda a: ad.logsumexp(a, axis=1)),
    ]


def _check_primitive(rng, inputs, fn):
    leaves = [ad.Tensor(x) for x in inputs]
    probe = fn(*[ad.Tensor(x) for x in inputs])
    weights = rng.standard_normal(probe.shape)
    return ad.grad_check(lambda: ad.sum_(ad.mul(fn(*leaves), weights)), leaves)


def test_criterion_1_autodiff_soundness(report):
    t0 = time.perf_counter()
    worst, worst_name, checks = 0.0, "", 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, inputs, fn in _primitive_cases(rng):
            res = _check_primitive(rng, inputs, fn)
            checks += 1
            if res["max_rel_error"] > worst:
                worst, worst_name = res["max_rel_error"], name
        store = ParamStore()
        init_mlp(store, "net", [5, 7, 6, 3], rng)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((4, 3))
        res = ad.grad_check(lambda: ad.sum_(ad.mul(mlp(store, "net", x, 3), w)),
                            store.tensors())
        checks += 1
        if res["max_rel_error"] > worst:
            worst, worst_name = res["max_rel_error"], "mlp3"
    secs = time.perf_counter() - t0
    report("1 autodiff soundness", worst <= 1e-5 and secs < 60,
           f"{checks} checks, max rel err {worst:.2e} ({worst_name}) <= 1e-5, {secs:.1f}s < 60s")


# --- 2: PoE oracle ----------------------------------------------------------

def test_criterion_2_poe_oracle(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(1, 4))
        prior = (rng.normal(0, 2), rng.uniform(0.2, 4.0))
        experts = [(rng.normal(0, 2), rng.uniform(0.2, 4.0)) for _ in range(m)]
        alphas = rng.uniform(0.2, 2.0, m)
        fused = prob.poe_fuse(
            prob.DiagGaussian([prior[0]], [math.log(prior[1])]),
            [prob.DiagGaussian([mu], [math.log(v)]) for mu, v in experts],
            list(alphas), [True] * m)
        mu, var = fused.mean.data[0], math.exp(fused.log_var.data[0])
        sd = math.sqrt(var)
        grid = np.linspace(mu - 12 * sd, mu + 12 * sd, 20001)
        ref = oracles.grid_poe_logdensity(prior, experts, alphas, grid)
        pts = np.linspace(mu - 4 * sd, mu + 4 * sd, 41)
        got = np.array([prob.log_prob(fused, [p]).item() for p in pts])
        worst = max(worst, float(np.max(np.abs(got - np.interp(pts, grid, ref)))))
    prior = prob.DiagGaussian(rng.standard_normal(3), rng.standard_normal(3))
    empty = prob.poe_fuse(prior, [], [], [])
    same = (empty.mean.data.tobytes() == prior.mean.data.tobytes()
            and empty.log_var.data.tobytes() == prior.log_var.data.tobytes())
    report("2 PoE oracle", worst <= 1e-6 and same,
           f"max |log q - grid| {worst:.2e} <= 1e-6 on 50 cases; poe_fuse(empty) == prior: {same}")


# --- 3: KL oracle -----------------------------------------------------------

def test_criterion_3_kl_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 4))
        mq, mp = rng.normal(0, 1, d), rng.normal(0, 1, d)
        vq, vp = rng.uniform(0.3, 3.0, d), rng.uniform(0.3, 3.0, d)
        q = prob.DiagGaussian(mq, np.log(vq))
        p = prob.DiagGaussian(mp, np.log(vp))
        closed = prob.kl(q, p).item()
        est, se = oracles.kl_monte_carlo(mq, vq, mp, vp, 100_000, rng)
        worst = max(worst, abs(closed - est) / se)
    q = prob.DiagGaussian(rng.standard_normal(4), rng.standard_normal(4))
    self_kl = prob.kl(q, q).item()
    report("3 KL oracle", worst <= 3.0 and self_kl == 0.0,
           f"max |closed - MC| = {worst:.2f} SE <= 3 on 50 pairs; KL(q,q) = {self_kl}")


# --- 4: ELBO bound ----------------------------------------------------------

TOY = "toy"


def _toy_model():
    latent = LatentConfig(d_s=1, d_p=1, d_h=1, hidden=1, depth=1, private=False)
    return FusionModel(ModelSpec((TOY,), {TOY: (1,)}, latent), seed=0)


def _toy_exact_elbo(model, x, nodes=20):
    """ELBO with the expectation over q done by Gauss-Hermite quadrature."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.sqrt(2 * math.pi)
    feats = {TOY: np.full((nodes, 1, 1), float(x))}
    mask = np.ones((nodes, 1, 1), bool)
    out = model.run(feats, mask, (TOY,), noise=lambda t: (z[:, None], {}))
    return ad.sum_(ad.mul(out["elbo"], w))


def _toy_evidence(model, x):
    p = model.params
    b = p["shared_prior.l0.b"].data
    W = p[f"{TOY}.dec.l0.W"].data
    return oracles.linear_gaussian_evidence(
        x, b[0], math.exp(b[1]), W[0, 0], p[f"{TOY}.dec.l0.b"].data[0],
        math.exp(p[f"{TOY}.dec_logvar"].data))


def _randomize(model, rng):
    for name, t in model.params.items():
        if ".norm." not in name:
            model.params.set_array(name, rng.normal(0, 0.8, t.shape))


def _fit_posterior(model, x):
    from scipy.optimize import minimize
    names = [n for n in model.params if ".enc_s." in n or n.endswith("alpha_raw")]
    shapes = [model.params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unpack(v):
        off = 0
        for n, s, k in zip(names, shapes, sizes):
            model.params.set_array(n, v[off:off + k].reshape(s))
            off += k

    def f(v):
        unpack(v)
        model.params.zero_grad()
        loss = ad.neg(_toy_exact_elbo(model, x))
        ad.backward(loss)
        g = [model.params[n].grad for n in names]
        return loss.item(), np.concatenate([np.zeros(k) if gi is None else gi.ravel()
                                            for gi, k in zip(g, sizes)])

    v0 = np.concatenate([model.params[n].data.ravel() for n in names])
    res = minimize(f, v0, jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15})
    unpack(res.x)


def test_criterion_4_elbo_bound(report):
    rng = np.random.default_rng(4)
    max_violation, worst_gap = -math.inf, 0.0
    for _ in range(20):
        model = _toy_model()
        _randomize(model, rng)
        x = rng.normal(0, 2)
        with ad.no_grad():
            elbo = _toy_exact_elbo(model, x).item()
        max_violation = max(max_violation, elbo - _toy_evidence(model, x))
        _fit_posterior(model, x)
        with ad.no_grad():
            fitted = _toy_exact_elbo(model, x).item()
        gap = _toy_evidence(model, x) - fitted
        max_violation = max(max_violation, -gap)
        worst_gap = max(worst_gap, gap)
    ok = max_violation <= 1e-12 and worst_gap <= 1e-3
    report("4 ELBO bound", ok,
           f"max(ELBO - log p(x)) {max_violation:.2e} <= 1e-12 (roundoff) on 40 settings; "
           f"fitted gap {worst_gap:.2e} <= 1e-3")


# --- 5: degenerate-mode equivalence ---------------------------------------

def test_criterion_5_unimodal_vae(report):
    rng = np.random.default_rng(5)
    latent = LatentConfig(d_s=3, d_p=2, d_h=4, hidden=8, depth=3, private=True)
    name = "position"
    worst = 0.0
    for k in range(20):
        model = FusionModel(ModelSpec((name,), {name: (3,)}, latent), seed=k)
        for pname, t in model.params.items():
            model.params.set_array(pname, t.data + rng.normal(0, 0.3, t.shape))
        model.params.set_array(f"{name}.norm.scale", rng.uniform(0.5, 2.0, 3))
        x = rng.normal(0, 2, (1, 3))
        eps_s, eps_p = rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
        with ad.no_grad():
            got, _ = elbo_sequence(model, {name: x}, np.ones((1, 1), bool), (name,),
                                   noise=lambda t: (eps_s, {name: eps_p}))
        ref = oracles.unimodal_vae_elbo(model.params.arrays(), name, x, eps_s[0], eps_p[0],
                                        3, 2, 4, 3)
        worst = max(worst, abs(got.item() - ref) / max(1.0, abs(ref)))
    report("5 unimodal VAE equivalence", worst <= 1e-9,
           f"max rel diff vs numpy VAE oracle {worst:.2e} <= 1e-9 on 20 inputs")


# --- 6: frontend ------------------------------------------------------------

def test_criterion_6_frontend(report):
    rng = np.random.default_rng(6)
    worst_u = worst_rt = 0.0
    peaks_ok = 0
    for _ in range(20):
        n_rx, S, C = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        spec = FrontendSpec(n_rx, S, C, C)
        store = ParamStore()
        init_frontend(store, "fe", spec)
        fe = Frontend(store, "fe", spec)
        worst_u = max(worst_u, fe.unitarity_penalty().item())
        X = rng.standard_normal((2, 3, S, C))
        worst_rt = max(worst_rt, float(np.max(np.abs(fe.inverse(fe.forward(X)).data - X))))
        r0, d0 = int(rng.integers(S)), int(rng.integers(C))
        cube = synth_radar_cube([(1.0, r0, d0, rng.uniform(-1, 1))], n_rx, S, C)
        Y = fe.forward(fe.encode_input(stack_complex(cube)[None])).data
        mag = np.hypot(Y[0], Y[1]).sum(axis=0)
        peaks_ok += np.unravel_index(np.argmax(mag), mag.shape) == (r0, d0)
    ok = worst_u <= 1e-10 and worst_rt <= 1e-9 and peaks_ok == 20
    report("6 frontend", ok,
           f"unitarity {worst_u:.1e} <= 1e-10; round-trip {worst_rt:.1e} <= 1e-9; "
           f"peaks at (r0,d0) {peaks_ok}/20")


# --- 7, 8, 10: ablation pipeline -------------------------------------------

def test_criterion_7_ordinal_claims(pipeline_runs, report):
    cal = json.loads(CALIBRATION.read_text())
    run = pipeline_runs[0]
    s = run["summary"]
    single = max(s["single_modality_dba"].values())
    fr = s["fraction_dba"]
    checks = {
        "a": (s["fused_dba"] > s["unaligned_dba"],
              f"fused {s['fused_dba']:.4f} > unaligned {s['unaligned_dba']:.4f}"),
        "b": (s["fused_dba"] >= s["shared_only_dba"],
              f"shared+private {s['fused_dba']:.4f} >= shared-only {s['shared_only_dba']:.4f}"),
        "c": (s["fused_dba"] >= single - 0.02,
              f"fused {s['fused_dba']:.4f} >= best single {single:.4f} - 0.02"),
        "d": (s["reg_enc_final"] <= 0.5 * s["reg_enc_initial"],
              f"reg_enc {s['reg_enc_initial']:.4g} -> {s['reg_enc_final']:.4g} (<= 0.5x)"),
        "e": (fr["F0.2"] >= fr["F1"] - 0.03 and cal["latent_d_s"] >= 16,
              f"DBA(0.2) {fr['F0.2']:.4f} >= DBA(1.0) {fr['F1']:.4f} - 0.03 "
              f"(F0.05 {fr['F0.05']:.4f}, d_s {cal['latent_d_s']})"),
    }
    fast = run["seconds"] <= 15 * 60
    ok = all(v[0] for v in checks.values()) and fast
    detail = "; ".join(f"({k}) {'ok' if v[0] else 'FAIL'}" for k, v in checks.items())
    report("7 two-stage ordinal claims", ok,
           f"{detail}; runtime {run['seconds'] / 60:.1f} min <= 15 min\n    "
           + "\n    ".join(f"({k}) {v[1]}" for k, v in checks.items()))


def test_criterion_7_matches_calibration(pipeline_runs):
    cal = json.loads(CALIBRATION.read_text())
    s = pipeline_runs[0]["summary"]
    for key in ("unaligned_dba", "fused_dba", "shared_only_dba"):
        assert s[key] == pytest.approx(cal["measured"][key], abs=1e-9)
    assert s["fraction_dba"] == pytest.approx(cal["measured"]["fraction_dba"], abs=1e-9)


def test_criterion_8_missing_modality(pipeline_runs, report):
    s = pipeline_runs[0]["summary"]
    rows = read_report(pipeline_runs[0]["root"] / "metrics.csv")
    fused = [r for r in rows if r["run"] == "dual-F1"]
    deg = s["degradation"]
    cam, rad = s["sensing_pair"]
    both, alone = deg[f"{cam}+{rad}"], max(deg[cam], deg[rad])
    ok = len(fused) == 8 and both >= alone
    report("8 missing-modality robustness", ok,
           f"{len(fused)}/8 drop sets evaluated; deg({cam}+{rad}) {both:.4f} >= "
           f"max(deg({cam}) {deg[cam]:.4f}, deg({rad}) {deg[rad]:.4f})")


def test_criterion_10_determinism(pipeline_runs, report):
    a, b = (r["root"] for r in pipeline_runs)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    diff = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    wanted = [f for f in files if f.suffix in (".csv", ".bin", ".json")]
    n_ckpt = sum(1 for f in files if f.name == "checkpoint.json")
    ok = files == other and not diff and n_ckpt > 0
    report("10 determinism", ok,
           f"{len(wanted)} CSV/checkpoint files ({n_ckpt} checkpoints) byte-identical; "
           f"differing: {diff or 'none'}")


# --- 9: metrics -------------------------------------------------------------

def test_criterion_9_metrics(report):
    worked = dba_score([11, 26], [10, 20], thresholds=(1, 3, 5))
    rng = np.random.default_rng(9)
    equal = 0
    for _ in range(100):
        n = int(rng.integers(1, 200))
        truths = rng.integers(0, 16, n)
        preds = np.where(rng.random(n) < 0.4, truths, rng.integers(0, 16, n))
        y = dba_score(preds, truths, thresholds=(0, 0, 0))
        equal += y[3] == top1(preds, truths)
    ok = worked == (0.5, 0.5, 0.5, 0.5) and equal == 100
    report("9 metric correctness", ok,
           f"worked example {worked} == (0.5, 0.5, 0.5, 0.5); (0,0,0) == top-1 on {equal}/100")


def test_dropping_everything_degrades_most(pipeline_runs):
    deg = pipeline_runs[0]["summary"]["degradation"]
    names = ("rf-power", "position", "radar-cube")
    assert deg["+".join(names)] >= max(deg[m] for m in names)
