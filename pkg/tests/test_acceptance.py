"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time

import jax.numpy as jnp
import numpy as np
import pytest

from fiberlab import analysis, bundles
from fiberlab import rng as frng
from fiberlab.geometry import (
    AffineConnectionModel,
    BilinearField,
    CovectorField,
    SmoothMapModel,
    covector_hessian,
    euclidean,
    sphere2,
)
from fiberlab.scenarios import build_scenario
from fiberlab.stochastic import (
    Driver,
    LocalTensor,
    TimeGrid,
    arnaudon_paycha_split,
    brownian_chart,
    ito_integral,
    quadratic_integral,
    simulate_bundle_semimartingale,
    stochastic_exponential,
    strat_integral,
)

from tests.conftest import scenario

IDS = ("s1-abelian-kk", "s2-hopf", "s3-frame-flat", "s3-frame-sphere")
S1_GRID = TimeGrid(1.0, 0.01)
N_MC = 4000


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} | {detail}")
        assert ok, detail
    return emit


# --- shared S1 driver configurations ------------------------------------------

H1, H2 = Driver("horizontal", (1.0, 0.0)), Driver("horizontal", (0.0, 1.0))
VB = Driver("vertical", (1.0,))
S1_CONFIGS = {
    # name: (simulation kwargs, is a nabla^k-martingale by construction)
    "horizontal BM": (dict(drivers=[H1, H2], ito_correction=True), True),
    "horizontal BM + 0.5 d2^h drift": (dict(drivers=[H1, H2], drift=[Driver("horizontal", (0.0, 0.5))],
                                            ito_correction=True), False),
    "vertical BM": (dict(drivers=[VB], ito_correction=True), True),
    "(d1^h + d_theta, d2^h), Ito-corrected": (dict(drivers=[(H1, VB), H2], ito_correction=True), True),
    "horizontal BM + vertical flow": (dict(drivers=[H1, H2], drift=[VB], ito_correction=True), False),
    "(d1^h + d_theta, d2^h), Stratonovich": (dict(drivers=[(H1, VB), H2], ito_correction=False), False),
}
_cache: dict = {}


def s1_run(name: str):
    if name not in _cache:
        sc = scenario("s1-abelian-kk")
        kwargs, _ = S1_CONFIGS[name]
        ens = simulate_bundle_semimartingale(sc, grid=S1_GRID, seed=2024, N=N_MC, **kwargs)
        _cache[name] = (ens, analysis.martingale_verdict(ens, sc))
    return _cache[name]


# --- 1 ---------------------------------------------------------------------------


def test_01_static_identity_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for sid in IDS:
        sc = build_scenario(sid)  # fresh instances: compile time counts
        worst[sid] = bundles.lemma_identity_suite(sc.tensors, sc.samples(np.random.default_rng(1), 1000))["max"]
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-7 and elapsed < 30.0
    verdict(1, "static identity suite", ok,
            f"max residual {max(worst.values()):.2e} (< 1e-7), {elapsed:.1f} s (< 30 s)")


# --- 2 ---------------------------------------------------------------------------


def test_02_sff_identity(verdict):
    res = {}
    rng = np.random.default_rng(2)
    for sid in IDS:
        sc = scenario(sid)
        proj = bundles.check_projectable(sc.tensors, sc.sample_points(rng, 6)[:, :sc.bundle.base_dim],
                                         sc.group_samples(rng, 3))
        assert proj.projectable, sid
        res[sid] = bundles.sff_identity_residual(sc.tensors, sc.base_connection, sc.samples(rng, 1000))
    verdict(2, "sff identity", max(res.values()) < 1e-6,
            ", ".join(f"{k}: {v:.1e}" for k, v in res.items()) + " (< 1e-6)")


# --- 3 ---------------------------------------------------------------------------


def test_03_kaluza_klein_table(verdict):
    rng = np.random.default_rng(3)
    t2 = analysis.corollary1_static_checks(scenario("s2-hopf"), scenario("s2-hopf").samples(rng, 1000))
    t1 = analysis.corollary1_static_checks(scenario("s1-abelian-kk"), scenario("s1-abelian-kk").samples(rng, 1000))
    bracket = t2["nabla omega(B*,C*) + 1/2 [B,C]"]
    sym = max(t1["symmetric part of nabla omega"], t2["symmetric part of nabla omega"])
    T = max(t1["T"], t2["T"])
    AXX = max(t1["A(X^h,X^h)"], t2["A(X^h,X^h)"])
    ok = max(bracket, sym, T, AXX) < 1e-7
    verdict(3, "Kaluza-Klein table", ok,
            f"bracket row {bracket:.1e}, symmetric part {sym:.1e}, T {T:.1e}, A(X^h,X^h) {AXX:.1e} (< 1e-7)")


# --- 4 ---------------------------------------------------------------------------


def test_04_conversion_formula(verdict):
    t0 = time.perf_counter()
    S = sphere2()
    lc = AffineConnectionModel.levi_civita(S)
    alpha = CovectorField.from_ambient(S, lambda p: jnp.array([p[1] + p[2] ** 2, -p[0], jnp.sin(p[0])]), "alpha")
    hess = covector_hessian(alpha, lc)
    T, N = 0.5, 1000
    dts = [4e-3, 2e-3, 1e-3]
    fine = frng.brownian_increments(4, N, int(round(T / dts[-1])), 2, dts[-1])
    errs = []
    for dt in dts:
        dW = frng.coarsen(fine, int(round(dt / dts[-1]))) if dt != dts[-1] else fine
        ens = brownian_chart(S, [0.3, -0.2], TimeGrid(T, dt), 4, N, dW=dW)
        resid = (strat_integral(alpha, ens).values - ito_integral(alpha, lc, ens).values
                 - 0.5 * quadratic_integral(hess, ens).values)
        errs.append(float(np.mean(np.abs(resid[:, -1]))))
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    C = np.array(errs) / np.array(dts)
    elapsed = time.perf_counter() - t0
    ok = slope >= 0.9 and C.max() / C.min() < 2.0 and elapsed < 120
    verdict(4, "Stratonovich-Ito conversion", ok,
            f"order {slope:.2f} (>= 0.9), C = {np.round(C, 3).tolist()}, {elapsed:.0f} s (< 120 s)")


# --- 5 ---------------------------------------------------------------------------


def test_05_brownian_property(verdict):
    t0 = time.perf_counter()
    S = sphere2()
    grid = TimeGrid(0.5, 1e-3)
    ens = brownian_chart(S, [0.0, 0.0], grid, 5, N_MC)
    q = quadratic_integral(BilinearField.metric(S), ens).values[:, -1]
    mean, se = float(q.mean()), float(q.std(ddof=1) / np.sqrt(q.size))
    tol = 3 * se + analysis.C_DISC * grid.dt
    elapsed = time.perf_counter() - t0
    ok = abs(mean - 1.0) <= tol and elapsed < 300
    verdict(5, "Brownian quadratic variation on S^2", ok,
            f"int g(dB,dB) = {mean:.4f} vs 1 +- {tol:.4f}; {elapsed:.0f} s (< 300 s)")


# --- 6 ---------------------------------------------------------------------------


def test_06_theorem_positive_and_negative(verdict):
    _, pos = s1_run("horizontal BM")
    _, neg = s1_run("horizontal BM + 0.5 d2^h drift")
    te2_neg = [r.consistent for r in neg.te2]
    ok = pos.consistent and not neg.consistent and not all(te2_neg)
    verdict(6, "martingale characterisation on S1", ok,
            f"horizontal BM consistent={pos.consistent}; drifted rejected={not neg.consistent} "
            f"(te2 per alpha {te2_neg})")


# --- 7 ---------------------------------------------------------------------------


def test_07_coherence(verdict):
    rows = []
    for name, (_, truth) in S1_CONFIGS.items():
        _, rep = s1_run(name)
        rows.append((name, truth, rep.consistent, rep.direct["consistent"]))
    agree = sum(t == d for _, _, t, d in rows)
    truth_ok = all(t == truth for _, truth, t, _ in rows)
    detail = f"agreement {agree}/6; " + "; ".join(f"{n}: {'M' if t else 'x'}/{'M' if d else 'x'}"
                                                  for n, _, t, d in rows)
    verdict(7, "theorem vs direct test coherence", agree == 6 and truth_ok, detail)


# --- 8 ---------------------------------------------------------------------------


def test_08_harmonic_and_bismut(verdict):
    sc = scenario("s1-abelian-kk")
    ts = np.linspace(-3, 3, 25)[:, None]
    geo = analysis.geodesic_map(sc, [0.0, 0.0, 0.0], [0.6, 0.8, 0.3], t_max=7.0)
    hg = analysis.harmonic_conditions(geo, sc, ts)
    c = sc.params["c"]
    ctrl = SmoothMapModel(euclidean(1, "interval"), sc.bundle.total,
                          {0: (0, lambda x: jnp.array([jnp.cos(x[0]), jnp.sin(x[0]),
                                                       -c * (x[0] / 2 + jnp.sin(2 * x[0]) / 4)]))}, name="circle")
    hc = analysis.harmonic_conditions(ctrl, sc, ts)
    mg = analysis.martingale_verdict(analysis.map_of_brownian(geo, S1_GRID, 8, N_MC), sc, kk_literal=False)
    mc = analysis.martingale_verdict(analysis.map_of_brownian(ctrl, S1_GRID, 8, N_MC), sc, kk_literal=False)
    ok = (hg.harmonic(1e-5) and mg.consistent and not hc.harmonic(1e-5)
          and max(hc.r1_max, hc.r2_max) > 1e-2 and not mc.consistent)
    verdict(8, "harmonic maps and Bismut consistency", ok,
            f"geodesic r1 {hg.r1_max:.1e} r2 {hg.r2_max:.1e}, F(b) consistent={mg.consistent}; "
            f"control r2 {hc.r2_max:.2f}, F(b) rejected={not mc.consistent}")


# --- 9 ---------------------------------------------------------------------------


def test_09_splitting(verdict):
    sc1 = scenario("s1-abelian-kk")
    ens, _ = s1_run("(d1^h + d_theta, d2^h), Ito-corrected")
    split = arnaudon_paycha_split(sc1.form, ens)
    g_reports = analysis.group_martingale_test(split.V, sc1.bundle.group)
    v_ok = all(r.consistent for r in g_reports)

    sc2 = scenario("s2-hopf")
    drivers = [Driver("horizontal-frame", (0,)), Driver("horizontal-frame", (1,)), Driver("vertical", (1.0, 0.0, 0.0)),
               Driver("vertical", (0.0, 1.0, 0.0))]
    # at dt = 0.02 the stereographic fiber charts need refinement
    grid = TimeGrid(0.5, 0.01)
    fine = frng.brownian_increments(9, 400, 2 * grid.K, len(drivers), grid.dt / 2)
    coarse = simulate_bundle_semimartingale(sc2, drivers, grid, 9, 400, ito_correction=True, dW=frng.coarsen(fine))
    refined = simulate_bundle_semimartingale(sc2, drivers, grid.refined(2), 9, 400, ito_correction=True, dW=fine)
    d_coarse = arnaudon_paycha_split(sc2.form, coarse)
    d_fine = arnaudon_paycha_split(sc2.form, refined)
    ratio = d_fine.defect / d_coarse.defect
    recon = max(split.reconstruction_error, d_coarse.reconstruction_error, d_fine.reconstruction_error)
    ok = recon < 1e-9 and 0.35 <= ratio <= 0.65 and v_ok
    verdict(9, "Arnaudon-Paycha splitting", ok,
            f"reconstruction {recon:.1e} (< 1e-9); defect {d_coarse.defect:.2e} -> {d_fine.defect:.2e} "
            f"(ratio {ratio:.2f}); V G-martingale={v_ok}")


# --- 10 --------------------------------------------------------------------------


def test_10_frame_bundle_example(verdict):
    rng = np.random.default_rng(10)
    worst_tensor, worst_sym = 0.0, 0.0
    for sid in ("s3-frame-flat", "s3-frame-sphere"):
        sc = scenario(sid)
        out = analysis.frame_bundle_checks(sc, sc.samples(rng, 1000))
        worst_tensor = max([worst_tensor] + [v for k, v in out.items() if k.endswith(": T") or k.endswith("pi_* A")])
        worst_sym = max(worst_sym, out["horizontal: (nabla omega)^S + omega.omega"])
    ok = worst_tensor < 1e-7 and worst_sym < 1e-6
    verdict(10, "frame-bundle example", ok,
            f"T and pi_* A {worst_tensor:.1e} (< 1e-7); (nabla^H omega)^S + omega.omega {worst_sym:.1e} (< 1e-6)")


# --- 11 --------------------------------------------------------------------------


def test_11_drift_test_calibration(verdict):
    M = euclidean(2)
    flat = AffineConnectionModel.flat(M)
    alpha = LocalTensor(M, [lambda x: jnp.array([x[1], 1.0])], "x2 dx1 + dx2")
    grid = TimeGrid(1.0, 0.01)
    rejections = 0
    for seed in range(50):
        ens = brownian_chart(M, [0.0, 0.0], grid, 1000 + seed, 1000)
        rejections += not analysis.drift_test(ito_integral(alpha, flat, ens)).consistent
    verdict(11, "drift-test calibration", rejections <= 5, f"{rejections}/50 true martingales rejected (<= 5)")
