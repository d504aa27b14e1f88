import jax.numpy as jnp
import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fiberlab.errors import DomainError
from fiberlab.geometry import (
    AffineConnectionModel,
    BilinearField,
    CovectorField,
    SmoothMapModel,
    christoffel_from_metric,
    codifferential,
    covariant_derivative,
    curvature_tensor,
    euclidean,
    inv_small,
    orthonormal_frame,
    second_fundamental_form,
    solve_small,
    sphere2,
    spd_inv_sqrt,
    tension_field,
)

coords = st.floats(-1.5, 1.5, allow_nan=False)


def sympy_christoffel(g, xs):
    ginv = g.inv()
    n = len(xs)
    return np.array([[[sp.simplify(sum(ginv[i, l] * (sp.diff(g[l, j], xs[k]) + sp.diff(g[l, k], xs[j])
                                                            - sp.diff(g[j, k], xs[l])) for l in range(n)) / 2)
                       for k in range(n)] for j in range(n)] for i in range(n)], dtype=object)


def test_kk_christoffels_match_sympy(s1):
    x1, x2, th, c = sp.symbols("x1 x2 theta c")
    om = sp.Matrix([[0, c * x1, 1]])
    g = sp.eye(3)
    g[2, 2] = 0
    g = g + om.T * om
    G = sp.Array(sympy_christoffel(g, [x1, x2, th]).tolist())
    u = np.array([0.4, -0.7, 1.1])
    num = christoffel_from_metric(s1.kk_total, u)
    ref = np.array(G.subs({x1: u[0], x2: u[1], th: u[2], c: 2.0}).tolist(), dtype=float)
    assert np.max(np.abs(num - ref)) < 1e-12
    assert np.max(np.abs(christoffel_from_metric(s1.kk_total, u, method="fd") - ref)) < 1e-6


def test_sphere_christoffels_match_sympy():
    x, y = sp.symbols("x y")
    f = 4 / (1 + x ** 2 + y ** 2) ** 2
    G = sp.Array(sympy_christoffel(sp.diag(f, f), [x, y]).tolist())
    M = sphere2()
    p = np.array([0.3, -1.2])
    ref = np.array(G.subs({x: p[0], y: p[1]}).tolist(), dtype=float)
    assert np.allclose(AffineConnectionModel.levi_civita(M).gamma(p), ref, atol=1e-12)
    assert np.allclose(christoffel_from_metric(M, p), ref, atol=1e-12)


def test_sphere_transitions_and_tensoriality(rng):
    M = sphere2()
    xs = rng.uniform(-1.5, 1.5, (50, 2))
    assert M.check_transitions(xs, 0, 1) < 1e-12
    emb = [c.embedding for c in M.charts]
    for x in xs[:5]:
        y = M.to_chart(x, 0, 1)
        assert np.allclose(emb[0](jnp.asarray(x)), emb[1](jnp.asarray(y)), atol=1e-12)
    alpha = CovectorField.from_ambient(M, lambda p: jnp.array([p[1], -p[0], p[2] ** 2]))
    assert alpha.transform_residual(xs[0], 0, 1) < 1e-12
    assert BilinearField.metric(M).transform_residual(xs[1], 0, 1) < 1e-12


def test_sphere_curvature_is_one():
    M = sphere2()
    lc = AffineConnectionModel.levi_civita(M)
    x = np.array([0.2, 0.5])
    g = M.metric(x)
    E = orthonormal_frame(M, x)
    R = curvature_tensor(lc, x, E[:, 0], E[:, 1], E[:, 1])
    assert abs(E[:, 0] @ g @ R - 1.0) < 1e-12
    assert np.allclose(E.T @ g @ E, np.eye(2), atol=1e-12)


def test_domain_errors():
    M = sphere2()
    with pytest.raises(DomainError):
        M.metric([np.nan, 0.0])
    with pytest.raises(DomainError):
        M.metric([1e9, 0.0])


def test_codifferential_of_df_is_minus_laplacian():
    M = euclidean(2)
    f = lambda x: x[0] ** 2 + 3 * x[0] * x[1] ** 2
    alpha = CovectorField.differential(M, [f])
    x = np.array([0.7, -0.2])
    assert np.isclose(codifferential(alpha, x), -(2 + 6 * x[0]), atol=1e-12)


def test_covariant_derivative_and_sff_of_embedding():
    S = sphere2()
    R3 = euclidean(3)
    F = SmoothMapModel(S, R3, {0: (0, S.charts[0].embedding)}, name="embedding")
    lcS, flat = AffineConnectionModel.levi_civita(S), AffineConnectionModel.flat(R3)
    x = np.array([0.3, 0.4])
    E = orthonormal_frame(S, x)
    n = np.asarray(S.charts[0].embedding(jnp.asarray(x)))
    # unit sphere: second fundamental form is -g(u, v) n, tension -2 n
    assert np.allclose(second_fundamental_form(F, lcS, flat, x, E[:, 0], E[:, 0]), -n, atol=1e-10)
    assert np.allclose(tension_field(F, flat, x), -2 * n, atol=1e-10)
    assert np.allclose(F.differential(x), F.differential_fd(x), atol=1e-8)
    # nabla_{d1} of the coordinate field d1 is gamma^i_11
    d1 = lambda y: jnp.array([1.0, 0.0])
    assert np.allclose(covariant_derivative(lcS, x, np.array([1.0, 0.0]), d1), lcS.gamma(x)[:, 0, 0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(coords, min_size=9, max_size=9))
def test_small_solvers(vals):
    A = np.array(vals).reshape(3, 3) + 4 * np.eye(3)
    assert np.allclose(np.asarray(inv_small(jnp.asarray(A))) @ A, np.eye(3), atol=1e-10)
    B = np.arange(6.0).reshape(3, 2)
    assert np.allclose(A @ np.asarray(solve_small(jnp.asarray(A), jnp.asarray(B))), B, atol=1e-10)
    G = A[:2, :2] @ A[:2, :2].T + 0.1 * np.eye(2)
    S = np.asarray(spd_inv_sqrt(jnp.asarray(G)))
    assert np.allclose(S @ S, np.linalg.inv(G), atol=1e-9)
    assert np.allclose(S, S.T)


@settings(max_examples=25, deadline=None)
@given(coords, coords, coords)
def test_levi_civita_is_torsion_free_and_metric(a, b, t):
    from tests.conftest import scenario
    kk = scenario("s1-abelian-kk").kk_total
    u = np.array([a, b, t])
    lc = AffineConnectionModel.levi_civita(kk)
    assert np.max(np.abs(lc.torsion(u))) < 1e-12
    g = kk.metric(u)
    G = lc.gamma(u)
    dg = (np.array([kk.metric(u + 1e-6 * e) for e in np.eye(3)]) - np.array([kk.metric(u - 1e-6 * e) for e in np.eye(3)])) / 2e-6
    # metric compatibility: d_k g_ij = g_lj G^l_ki + g_il G^l_kj
    rhs = np.einsum("lj,lki->kij", g, G) + np.einsum("il,lkj->kij", g, G)
    assert np.max(np.abs(dg - rhs)) < 1e-6
