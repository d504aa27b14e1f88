import numpy as np
import pytest

from fiberlab import io, rng as frng
from fiberlab.errors import DomainError, RefinementRequired
from fiberlab.geometry import AffineConnectionModel, BilinearField, CovectorField, euclidean, sphere2
from fiberlab.stochastic import (
    Driver,
    PathEnsemble,
    RealProcessSample,
    TimeGrid,
    arnaudon_paycha_split,
    brownian_chart,
    brownian_development,
    integrate,
    ito_integral,
    project,
    quadratic_integral,
    simulate_bundle_semimartingale,
    stochastic_exponential,
    strat_integral,
)


def test_time_grid():
    g = TimeGrid(1.0, 0.01)
    assert g.K == 100 and np.isclose(g.times[-1], 1.0)
    assert g.refined(2).K == 200
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0.3)
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 0.1)


def test_rng_per_path_reproducible():
    a = frng.brownian_increments(7, 10, 20, 2, 0.01)
    b = frng.brownian_increments(7, 3, 20, 2, 0.01, first_path=4)
    assert np.array_equal(a[4:7], b)
    assert not np.allclose(a[0], a[1])
    c = frng.coarsen(a, 2)
    assert c.shape == (10, 10, 2) and np.allclose(c[:, 0], a[:, 0] + a[:, 1])
    with pytest.raises(ValueError):
        frng.coarsen(a[:, :5], 2)
    z = frng.path_normals(1, 0, 200000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_flat_integrals_closed_form():
    M = euclidean(2)
    grid = TimeGrid(1.0, 0.01)
    ens = brownian_chart(M, [0.0, 0.0], grid, 3, 200)
    x = ens.X
    # f = x1 x2: strat integral of df telescopes
    alpha = CovectorField(M, [lambda y: np.array([1.0, 0.0]) * y[1] + np.array([0.0, 1.0]) * y[0]])
    s = strat_integral(alpha, ens)
    assert np.allclose(s.values[:, -1], x[:, -1, 0] * x[:, -1, 1], atol=1e-12)
    flat = AffineConnectionModel.flat(M)
    q = quadratic_integral(BilinearField.metric(M), ens)
    dx = np.diff(x, axis=1)
    assert np.allclose(q.values[:, -1], np.sum(dx ** 2, axis=(1, 2)))
    ito_vals = ito_integral(alpha, flat, ens)
    hess = BilinearField(M, [lambda y: np.array([[0.0, 1.0], [1.0, 0.0]])])
    conv = s.values - ito_vals.values - 0.5 * quadratic_integral(hess, ens).values
    assert np.max(np.abs(conv)) < 1e-12


def test_sphere_brownian_handover_and_length():
    S = sphere2()
    grid = TimeGrid(0.5, 1e-3)
    ens = brownian_chart(S, [1.8, 0.0], grid, 11, 300)
    assert set(np.unique(ens.charts)) == {0, 1}
    q = quadratic_integral(BilinearField.metric(S), ens)
    assert abs(q.values[:, -1].mean() - 1.0) < 0.05


def test_refinement_required():
    S = sphere2()
    with pytest.raises(RefinementRequired) as exc:
        brownian_chart(S, [0.0, 0.0], TimeGrid(1.0, 0.5), 1, 50)
    assert exc.value.suggested_dt < 0.5


def test_ensemble_validation():
    M = euclidean(1)
    g = TimeGrid(1.0, 0.5)
    with pytest.raises(ValueError):
        PathEnsemble(M, g, np.zeros((2, 2)), np.zeros((2, 2, 1)))
    with pytest.raises(DomainError):
        PathEnsemble(M, g, np.zeros((1, 3)), np.full((1, 3, 1), np.nan))


def test_real_process_algebra():
    g = TimeGrid(1.0, 0.5)
    a = RealProcessSample(g, np.ones((3, 3, 2)), "a")
    assert len(a.components()) == 2
    assert np.allclose((a + a.scaled(2.0) - a).values, 2.0)


def test_horizontal_drivers_stay_horizontal(s1):
    grid = TimeGrid(0.5, 0.01)
    ens = simulate_bundle_semimartingale(s1, [Driver("horizontal", (1.0, 0.0)), Driver("horizontal", (0.0, 1.0))],
                                         grid, 5, 100, ito_correction=True)
    z = strat_integral(s1.form, ens)
    assert np.max(np.abs(z.values)) < 1e-10
    base = project(ens, s1.bundle)
    assert base.manifold is s1.bundle.base and base.dim == 2
    assert ens.path(3).X.shape == (grid.K + 1, 3)
    assert ens.path_seeds[2] == (5, (2,))


def test_deterministic_reruns(s2):
    grid = TimeGrid(0.2, 0.01)
    d = [Driver("horizontal-frame", (0,)), Driver("vertical", (0.0, 0.0, 1.0))]
    a = simulate_bundle_semimartingale(s2, d, grid, 9, 20)
    b = simulate_bundle_semimartingale(s2, d, grid, 9, 20)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.charts, b.charts)


def test_split_on_hopf(s2):
    grid = TimeGrid(0.5, 0.01)
    d = [Driver("horizontal-frame", (0,)), Driver("horizontal-frame", (1,)), Driver("vertical", (1.0, 0.0, 0.0))]
    ens = simulate_bundle_semimartingale(s2, d, grid, 4, 50, ito_correction=True)
    res = arnaudon_paycha_split(s2.form, ens)
    assert res.reconstruction_error < 1e-9
    assert res.defect < 0.05
    V = stochastic_exponential(s2.form, ens)
    U = V.values
    assert np.allclose(np.einsum("nkji,nkjl->nkil", U.conj(), U), np.eye(2), atol=1e-10)


def test_brownian_development(s3_sphere):
    grid = TimeGrid(0.3, 0.01)
    fine = frng.brownian_increments(2, 50, 2 * grid.K, 2, grid.dt / 2)
    P, M = brownian_development(s3_sphere, [0.2, 0.1], grid, 2, 50, dW=frng.coarsen(fine))
    assert M.manifold is s3_sphere.bundle.base
    # the horizontal distribution is nonlinear in chart coordinates: the
    # discrete omega-integral is O(dt), not exactly zero
    z = np.abs(strat_integral(s3_sphere.form, P).values[:, -1]).mean()
    P2, _ = brownian_development(s3_sphere, [0.2, 0.1], grid.refined(2), 2, 50, dW=fine)
    z2 = np.abs(strat_integral(s3_sphere.form, P2).values[:, -1]).mean()
    assert z < 0.02 and z2 < 0.7 * z
    with pytest.raises(DomainError):
        brownian_development(s3_sphere, [0.2, 0.1], grid, 2, 5, frame0=np.eye(2) * 3)


def test_io_roundtrip(tmp_path, s1):
    grid = TimeGrid(0.1, 0.01)
    ens = simulate_bundle_semimartingale(s1, [Driver("vertical", (1.0,))], grid, 1, 4)
    p = io.write_ensemble_binary(ens, tmp_path / "e.bin")
    back = io.read_ensemble_binary(p, s1.bundle.total)
    assert np.array_equal(back.X, ens.X) and np.array_equal(back.charts, ens.charts)
    raw = p.read_bytes()
    assert raw[:8] == io.MAGIC and int.from_bytes(raw[8:12], "little") == 4
    c = io.write_ensemble_csv(ens, tmp_path / "e.csv")
    back = io.read_ensemble_csv(c, s1.bundle.total, grid.dt)
    assert np.array_equal(back.X, ens.X)
    assert c.read_text().splitlines()[0] == "path_id,step,chart_id,x0,x1,x2"
