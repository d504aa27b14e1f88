import jax.numpy as jnp
import numpy as np
import pytest

from fiberlab import analysis
from fiberlab.errors import SampleSizeError
from fiberlab.geometry import CovectorField, SmoothMapModel, codifferential, euclidean
from fiberlab.stochastic import (
    Driver,
    LocalTensor,
    RealProcessSample,
    TimeGrid,
    brownian_chart,
    ito_integral,
    simulate_bundle_semimartingale,
)

GRID = TimeGrid(1.0, 0.01)


def test_drift_test_trivial_cases():
    rng = np.random.default_rng(0)
    noise = rng.standard_normal((500, GRID.K)) * np.sqrt(GRID.dt)
    z = np.concatenate([np.zeros((500, 1)), np.cumsum(noise, axis=1)], axis=1)
    rep = analysis.drift_test(RealProcessSample(GRID, z, "gauss"))
    assert rep.consistent and rep.verdict == "martingale-consistent"
    assert len(rep.bin_means) == 20 and np.isclose(rep.bin_edges[-1], 1.0)
    drift = np.tile(GRID.times, (500, 1))
    rep = analysis.drift_test(RealProcessSample(GRID, drift, "drift"))
    assert not rep.consistent and np.isclose(rep.global_mean, 1.0)
    d = rep.to_dict()
    assert d["verdict"] == "rejected" and d["c_disc"] == analysis.C_DISC


def test_drift_test_refuses_small_samples():
    with pytest.raises(SampleSizeError, match="increment N"):
        analysis.drift_test(RealProcessSample(GRID, np.zeros((10, GRID.K + 1))))
    with pytest.raises(ValueError):
        analysis.drift_test(RealProcessSample(GRID, np.zeros((200, GRID.K + 1, 2))))


@pytest.mark.slow
def test_flat_plane_ito_integral_is_consistent():
    M = euclidean(2)
    ens = brownian_chart(M, [0.0, 0.0], GRID, 99, 4000)
    from fiberlab.geometry import AffineConnectionModel
    z = ito_integral(CovectorField.constant(M, [1.0, 0.0]), AffineConnectionModel.flat(M), ens)
    assert analysis.drift_test(z).consistent


def test_estimate_c_disc_on_pure_drift():
    # process with bias exactly 1.0 * dt: Z_T = T + dt per path
    make = lambda g: RealProcessSample(g, np.tile(g.times + g.dt * (g.times > 0), (200, 1)))
    c, se = analysis.estimate_c_disc(make, GRID)
    assert np.isclose(c, 1.0) and se == 0


@pytest.mark.slow
def test_vertical_flow_drift_value(s1):
    # deterministic flow along B*: int omega dY = t exactly, (nabla omega)^S(B*, B*) = 0
    grid = TimeGrid(0.5, 0.01)
    ens = simulate_bundle_semimartingale(s1, [Driver("horizontal", (0.0, 0.0))], grid, 1, 200,
                                         drift=[Driver("vertical", (1.0,))])
    tp = analysis.theorem1_processes(ens, s1)
    assert np.allclose(tp.vertical.values[:, :, 0], grid.times, atol=1e-12)
    assert not analysis.drift_test_components(tp.vertical)[0].consistent


@pytest.mark.slow
def test_perturbed_base_connection_rejects(s1):
    ens = simulate_bundle_semimartingale(s1, [Driver("horizontal", (1.0, 0.0)), Driver("horizontal", (0.0, 1.0))],
                                         GRID, 3, 2000, ito_correction=True)
    ok = analysis.martingale_verdict(ens, s1, direct=False, kk_literal=False)
    assert ok.consistent
    bump = lambda x: jnp.zeros((2, 2, 2)).at[0, 0, 0].set(1.0)
    bad = s1.base_connection.perturbed([bump])
    rep = analysis.martingale_verdict(ens, s1, base_connection=bad, direct=False, kk_literal=False)
    assert not rep.consistent and not rep.te2[0].consistent and rep.te2[1].consistent


def test_non_projectable_is_refused(s1):
    bump = lambda u: jnp.zeros((3, 3, 3)).at[0, 1, 1].set(jnp.sin(u[2]))
    bad = s1.connection.perturbed([bump])
    ens = simulate_bundle_semimartingale(s1, [Driver("vertical", (1.0,))], TimeGrid(0.1, 0.05), 1, 4)
    with pytest.raises(ValueError, match="projectable"):
        analysis.theorem1_processes(ens, s1, connection=bad, verify_projectable=True)


def _vertical_flow(sc, p):
    return SmoothMapModel(euclidean(1, "interval"), sc.bundle.total,
                          {0: (0, lambda t: jnp.asarray(p) + jnp.array([0.0, 0.0, 1.0]) * t[0])}, name="p exp(tB)")


def test_vertical_flow_is_harmonic(s1):
    F = _vertical_flow(s1, [0.4, -0.2, 0.0])
    rep = analysis.harmonic_conditions(F, s1, np.linspace(-2, 2, 9)[:, None])
    assert rep.r1_max < 1e-12 and rep.r2_max < 1e-12 and rep.harmonic()
    assert len(rep.grid) == 9 and not rep.holes


def test_r1_uses_codifferential_sign(s1):
    # r1 = -codifferential(F* omega) - tr F*(nabla omega) on a curve with nonzero pull-back
    c = 2.0
    fn = lambda t: jnp.array([jnp.cos(t[0]), jnp.sin(t[0]), 0.3 * t[0] ** 2])
    F = SmoothMapModel(euclidean(1, "interval"), s1.bundle.total, {0: (0, fn)}, name="curve")
    pull = CovectorField(F.source, [lambda t: s1.form.local(0)(fn(t)) @ jnp.stack([-jnp.sin(t[0]), jnp.cos(t[0]), 0.6 * t[0]])[:, None]])
    t = np.array([0.7])
    J = F.differential(t)[:, 0]
    trace = s1.tensors.nabla_omega(F.value(t), J, J)
    rep = analysis.harmonic_conditions(F, s1, t[None])
    assert np.allclose(rep.r1[0], -codifferential(pull, t) - trace, atol=1e-10)


def test_geodesic_and_control_residuals(s1):
    F = analysis.geodesic_map(s1, [0.0, 0.0, 0.0], [0.6, 0.8, 0.3], t_max=4.0)
    rep = analysis.harmonic_conditions(F, s1, np.linspace(-3, 3, 13)[:, None])
    assert rep.harmonic(1e-5)
    # geodesic speed is constant for the Levi-Civita connection
    g = s1.kk_total
    speeds = [F.differential(np.array([s]))[:, 0] @ g.metric(F.value(np.array([s]))) @ F.differential(np.array([s]))[:, 0]
              for s in (-3.0, 0.0, 3.0)]
    assert np.allclose(speeds, speeds[0], rtol=1e-9)
    with pytest.raises(ValueError):
        F.value(np.array([5.0]))
    c = 2.0
    ctrl = SmoothMapModel(euclidean(1, "interval"), s1.bundle.total,
                          {0: (0, lambda x: jnp.array([jnp.cos(x[0]), jnp.sin(x[0]),
                                                       -c * (x[0] / 2 + jnp.sin(2 * x[0]) / 4)]))})
    rc = analysis.harmonic_conditions(ctrl, s1, np.linspace(-3, 3, 13)[:, None])
    assert rc.r2_max > 1e-2 and not rc.harmonic()


def test_corollary_table(s1, s2, rng):
    for sc in (s1, s2):
        table = analysis.corollary1_static_checks(sc, sc.samples(rng, 100))
        assert table["max"] < 1e-7, table
        assert len(table) == 8


def test_frame_bundle_checks(s3_flat, rng):
    out = analysis.frame_bundle_checks(s3_flat, s3_flat.samples(rng, 50))
    assert max(out.values()) < 1e-7


def test_group_martingale_test_shapes(s2):
    from fiberlab.stochastic import stochastic_exponential
    ens = simulate_bundle_semimartingale(s2, [Driver("vertical", (1.0, 0.0, 0.0))], TimeGrid(0.2, 0.02), 2, 100,
                                         ito_correction=True)
    reps = analysis.group_martingale_test(stochastic_exponential(s2.form, ens), s2.bundle.group)
    assert len(reps) == 3 and all(r.n_paths == 100 for r in reps)
