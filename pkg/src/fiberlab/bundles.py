"""Principal bundles, connection forms and the fundamental tensors T and A.

All bundles here are given in product trivialisations: a total-space chart
has coordinates ``(x, y)`` with ``x`` a base-chart point and ``y`` fiber
coordinates, and the projection is ``(x, y) -> x``.  Beyond that the code is
generic: everything is computed from the per-chart closures

* ``omega(u)``: ``(dim g, n)`` matrix of connection-form components,
* ``sigma(u)``: ``(n, dim g)`` matrix whose columns are the fundamental fields,
* ``gamma(u)``: Christoffel symbols of the total-space connection.

Vertical projector ``P = sigma omega``, horizontal projector ``Q = I - P``.
Tensor pieces are evaluated with coordinate-constant extensions; T and A are
tensorial, so the result does not depend on that choice.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from fiberlab.geometry import (
    AffineConnectionModel,
    ChartedManifold,
    LocalFn,
    SmoothMapModel,
    curvature_endomorphisms_local,
    gamma_contract,
    inv_small,
    solve_small,
    levi_civita_closure,
)
from fiberlab.lie import LieGroupModel

EXTERIOR_CONVENTIONS = ("half", "plain")


class PrincipalBundleModel:
    """Total space, base, structure group, projection and right action.

    Parameters
    ----------
    total, base : ChartedManifold
    group : LieGroupModel
    base_chart_of : base-chart index for each total-space chart
    fundamental : per-chart closures ``u -> sigma(u)``
    action : ``(src, dst) -> closure (u, g) -> R_g(u)`` from chart ``src`` to ``dst``;
        ``g`` is the group matrix as a (possibly complex) jax array
    section : per-base-chart ``(total chart, closure x -> u)`` picking a reference point in each fiber
    """

    def __init__(self, name: str, total: ChartedManifold, base: ChartedManifold, group: LieGroupModel,
                 base_chart_of: Sequence[int], fundamental: Sequence[LocalFn],
                 action: Callable[[int, int], Callable],
                 section: Sequence[tuple[int, LocalFn]]):
        self.name = name
        self.total = total
        self.base = base
        self.group = group
        self.base_chart_of = tuple(base_chart_of)
        self.fundamental = tuple(fundamental)
        self.action = action
        self.section = tuple(section)
        m = base.dim
        self.projection = SmoothMapModel(
            total, base, {c: (b, lambda u: u[:m]) for c, b in enumerate(self.base_chart_of)},
            name="pi")

    def __repr__(self):
        return f"PrincipalBundleModel({self.name!r})"

    @property
    def dim(self) -> int:
        return self.total.dim

    @property
    def base_dim(self) -> int:
        return self.base.dim

    def sigma(self, u, chart: int = 0) -> np.ndarray:
        return np.asarray(self.fundamental[chart](jnp.asarray(u, dtype=float)))

    def fundamental_vector(self, u, B, chart: int = 0) -> np.ndarray:
        return self.sigma(u, chart) @ np.asarray(B, dtype=float)

    def project(self, u, chart: int = 0) -> np.ndarray:
        return np.asarray(u, dtype=float)[..., :self.base_dim]

    def action_map(self, src: int, dst: int, g) -> LocalFn:
        fn = self.action(src, dst)
        gj = jnp.asarray(g)
        return lambda u: fn(u, gj)

    def act_batch(self, charts, U, Gs, dst=None):
        """Vectorised ``R_{g_i}(u_i)``; stays in each row's chart (or ``dst``) and then hands over."""
        charts = np.asarray(charts)
        U = np.asarray(U, dtype=float)
        Gs = np.asarray(Gs)
        out = np.empty_like(U)
        out_ids = charts.copy() if dst is None else np.asarray(dst).copy()
        for c in np.unique(charts):
            for d in np.unique(out_ids[charts == c]):
                idx = np.nonzero((charts == c) & (out_ids == d))[0]
                out[idx] = np.asarray(_batched_action(self.action(int(c), int(d)))(U[idx], Gs[idx]))
        if dst is None:
            out_ids, out = self.total.handover(out_ids, out)
        return out_ids, out

    def act(self, u, g, chart: int = 0, dst: int | None = None):
        """``R_g(u)``; returns ``(chart, coordinates)``, handing over to a better chart if needed."""
        u = jnp.asarray(u, dtype=float)
        if dst is not None:
            return dst, np.asarray(self.action_map(chart, dst, np.asarray(g))(u))
        v = np.asarray(self.action_map(chart, chart, np.asarray(g))(u))
        ids, out = self.total.handover(np.array([chart]), v[None])
        return int(ids[0]), out[0]

    def act_pushforward(self, u, g, chart: int = 0, dst: int | None = None) -> np.ndarray:
        dst = chart if dst is None else dst
        return np.asarray(jax.jacfwd(self.action_map(chart, dst, np.asarray(g)))(jnp.asarray(u, dtype=float)))


_ACTION_CACHE: dict = {}


def _batched_action(fn):
    if fn not in _ACTION_CACHE:
        _ACTION_CACHE[fn] = jax.jit(jax.vmap(fn))
    return _ACTION_CACHE[fn]


class PointData(NamedTuple):
    """Everything the tensor formulas need at one total-space point."""
    omega: jnp.ndarray      # (k, n)
    domega: jnp.ndarray     # (k, n, n): [a, j, l] = d_l omega_aj
    sigma: jnp.ndarray      # (n, k)
    dsigma: jnp.ndarray     # (n, k, n)
    P: jnp.ndarray          # (n, n) vertical projector
    dP: jnp.ndarray         # (n, n, n): [i, j, l] = d_l P_ij
    H: jnp.ndarray          # (n, m) horizontal lift matrix
    dH: jnp.ndarray         # (n, m, n)
    pistar: jnp.ndarray     # (m, n)
    gamma: jnp.ndarray      # (n, n, n)


def _lift_matrix(omega_fn, m):
    def H(u):
        om = omega_fn(u)
        n = u.shape[0]
        pistar = jnp.eye(m, n)
        system = jnp.concatenate([pistar, om], axis=0)
        rhs = jnp.concatenate([jnp.eye(m), jnp.zeros((om.shape[0], m))], axis=0)
        return solve_small(system, rhs)
    return H


def point_data_local(omega_fn, sigma_fn, gamma_fn, m):
    H_fn = _lift_matrix(omega_fn, m)
    P_fn = lambda u: sigma_fn(u) @ omega_fn(u)

    def data(u):
        n = u.shape[0]
        return PointData(
            omega=omega_fn(u), domega=jax.jacfwd(omega_fn)(u),
            sigma=sigma_fn(u), dsigma=jax.jacfwd(sigma_fn)(u),
            P=P_fn(u), dP=jax.jacfwd(P_fn)(u),
            H=H_fn(u), dH=jax.jacfwd(H_fn)(u),
            pistar=jnp.eye(m, n), gamma=gamma_fn(u),
        )
    return data


# --- pointwise formulas on PointData (traceable) ----------------------------

def _gam(d: PointData, U, V):
    return gamma_contract(d.gamma, U, V)


def covd_vertical_part(d: PointData, W, V):
    """``nabla_W (P V)`` for a constant field ``V``."""
    return jnp.einsum("ijl,l,j->i", d.dP, W, V) + _gam(d, W, d.P @ V)


def covd_horizontal_part(d: PointData, W, V):
    """``nabla_W (Q V)`` for a constant field ``V``."""
    return -jnp.einsum("ijl,l,j->i", d.dP, W, V) + _gam(d, W, V - d.P @ V)


def covd_lift(d: PointData, W, X):
    """``nabla_W X^h`` where ``X^h`` lifts the constant base field ``X``."""
    return jnp.einsum("ial,l,a->i", d.dH, W, X) + _gam(d, W, d.H @ X)


def covd_fundamental(d: PointData, W, B):
    """``nabla_W B*``."""
    return jnp.einsum("ibl,l,b->i", d.dsigma, W, B) + _gam(d, W, d.sigma @ B)


def bracket_lift_fundamental(d: PointData, X, B):
    """Lie bracket ``[X^h, B*]`` of the lift field and the fundamental field."""
    Xh, Bs = d.H @ X, d.sigma @ B
    return jnp.einsum("ibl,l,b->i", d.dsigma, Xh, B) - jnp.einsum("ial,l,a->i", d.dH, Bs, X)


def T_point(d: PointData, U, V):
    Q = jnp.eye(U.shape[0]) - d.P
    W = d.P @ U
    return Q @ covd_vertical_part(d, W, V) + d.P @ covd_horizontal_part(d, W, V)


def A_point(d: PointData, U, V):
    Q = jnp.eye(U.shape[0]) - d.P
    W = Q @ U
    return d.P @ covd_horizontal_part(d, W, V) + Q @ covd_vertical_part(d, W, V)


def nabla_omega_point(d: PointData, U, V):
    """``(nabla_U omega)(V) = U(omega(V)) - omega(nabla_U V)`` (constant ``V``)."""
    return jnp.einsum("ajl,l,j->a", d.domega, U, V) - d.omega @ _gam(d, U, V)


def curvature_point(d: PointData, U, V, convention: str = "half"):
    Q = jnp.eye(U.shape[0]) - d.P
    hU, hV = Q @ U, Q @ V
    val = jnp.einsum("ajl,l,j->a", d.domega, hU, hV) - jnp.einsum("ajl,l,j->a", d.domega, hV, hU)
    return 0.5 * val if convention == "half" else val


def bilinear_array(fn, d: PointData):
    """``out[..., a, b] = fn(d, e_a, e_b)`` over the coordinate basis."""
    n = d.P.shape[0]
    eye = jnp.eye(n)
    out = jax.vmap(lambda a: jax.vmap(lambda b: fn(d, a, b))(eye))(eye)  # [a, b, ...]
    return jnp.moveaxis(jnp.moveaxis(out, 0, -1), 0, -1)


def symmetrized(fn):
    return lambda d, U, V: 0.5 * (fn(d, U, V) + fn(d, V, U))


def sff_correction_point(d: PointData, U, V):
    """``(2 A^S + T^S)(U, V)`` with argument symmetrisations of A and T."""
    return symmetrized(A_point)(d, U, V) * 2.0 + symmetrized(T_point)(d, U, V)


# ---------------------------------------------------------------------------


class ConnectionFormModel:
    """Connection form ``omega`` on a bundle, with vertical/horizontal splitting."""

    def __init__(self, bundle: PrincipalBundleModel, form: Sequence[LocalFn], name: str = "omega"):
        self.bundle = bundle
        self.form = tuple(form)
        self.name = name

    def local(self, chart: int = 0) -> LocalFn:
        return self.form[chart]

    @property
    def manifold(self) -> ChartedManifold:
        return self.bundle.total

    def omega(self, u, chart: int = 0) -> np.ndarray:
        return np.asarray(self.form[chart](jnp.asarray(u, dtype=float)))

    def __call__(self, u, U, chart: int = 0) -> np.ndarray:
        return self.omega(u, chart) @ np.asarray(U, dtype=float)

    def vertical_projector(self, u, chart: int = 0) -> np.ndarray:
        return self.bundle.sigma(u, chart) @ self.omega(u, chart)

    def lift_matrix(self, u, chart: int = 0) -> np.ndarray:
        return np.asarray(_lift_matrix(self.form[chart], self.bundle.base_dim)(jnp.asarray(u, dtype=float)))

    def lift_matrix_fn(self, chart: int = 0) -> LocalFn:
        return _lift_matrix(self.form[chart], self.bundle.base_dim)

    def lift_field(self, X, chart: int = 0) -> LocalFn:
        """Horizontal lift of a base field (constant components or closure of ``x``)."""
        H = _lift_matrix(self.form[chart], self.bundle.base_dim)
        m = self.bundle.base_dim
        Xf = X if callable(X) else (lambda x, c=jnp.asarray(X, dtype=float): c)
        return lambda u: H(u) @ Xf(u[:m])

    def fundamental_field(self, B, chart: int = 0) -> LocalFn:
        sig = self.bundle.fundamental[chart]
        Bc = jnp.asarray(B, dtype=float)
        return lambda u: sig(u) @ Bc

    def reproduction_residual(self, u, chart: int = 0) -> float:
        """``omega(sigma(B)) = B`` for every basis element."""
        k = self.bundle.group.dim
        return float(np.max(np.abs(self.omega(u, chart) @ self.bundle.sigma(u, chart) - np.eye(k))))

    def equivariance_residual(self, u, g, chart: int = 0) -> float:
        """``(R_g)^* omega = Ad_{g^-1} omega`` as matrices on T_uP."""
        G = self.bundle.group
        dst, v = self.bundle.act(u, g, chart)
        J = self.bundle.act_pushforward(u, g, chart, dst)
        lhs = self.omega(v, dst) @ J
        rhs = G.adjoint_matrix(G.inverse(g)) @ self.omega(u, chart)
        return float(np.max(np.abs(lhs - rhs)))


def split(form: ConnectionFormModel, u, U, chart: int = 0):
    """``(vertical, horizontal)`` parts of ``U`` at ``u``."""
    U = np.asarray(U, dtype=float)
    vertical = form.bundle.sigma(u, chart) @ form(u, U, chart)
    return vertical, U - vertical


def horizontal_lift(form: ConnectionFormModel, u, X, chart: int = 0) -> np.ndarray:
    """The unique ``U`` with ``pi_* U = X`` and ``omega(U) = 0``."""
    return form.lift_matrix(u, chart) @ np.asarray(X, dtype=float)


def curvature_form(form: ConnectionFormModel, u, U, V, chart: int = 0, convention: str = "half") -> np.ndarray:
    """``Omega(U, V) = d omega(hU, hV)``.

    ``convention="half"`` uses ``d a(U, V) = 1/2 (U a(V) - V a(U) - a([U, V]))``,
    for which ``v[X^h, Y^h] = -2 Omega(X^h, Y^h)*``; ``"plain"`` drops the 1/2.
    """
    if convention not in EXTERIOR_CONVENTIONS:
        raise ValueError(f"convention must be one of {EXTERIOR_CONVENTIONS}")
    ft = FundamentalTensorModel(form, _zero_connection(form.bundle.total))
    d = ft.point(u, chart)
    return np.asarray(curvature_point(d, jnp.asarray(U, dtype=float), jnp.asarray(V, dtype=float), convention))


def _zero_connection(M: ChartedManifold) -> AffineConnectionModel:
    return AffineConnectionModel.flat(M)


class FundamentalTensorModel:
    """Evaluators for T, A, nabla omega and friends for a pair (omega, nabla^P)."""

    def __init__(self, form: ConnectionFormModel, connection: AffineConnectionModel):
        self.form = form
        self.connection = connection
        self.bundle = form.bundle

    def __repr__(self):
        return f"FundamentalTensorModel({self.form.name}, {self.connection.name})"

    @cached_property
    def _data_fns(self):
        m = self.bundle.base_dim
        return tuple(point_data_local(self.form.form[c], self.bundle.fundamental[c],
                                      self.connection.local(c), m)
                     for c in range(len(self.bundle.total.charts)))

    def data_fn(self, chart: int = 0):
        return self._data_fns[chart]

    @cached_property
    def _jit_data(self):
        return tuple(jax.jit(f) for f in self._data_fns)

    def point(self, u, chart: int = 0) -> PointData:
        return self._jit_data[chart](jnp.asarray(u, dtype=float))

    def _eval(self, fn, u, U, V, chart):
        d = self.point(u, chart)
        return np.asarray(fn(d, jnp.asarray(U, dtype=float), jnp.asarray(V, dtype=float)))

    def T(self, u, U, V, chart: int = 0) -> np.ndarray:
        return self._eval(T_point, u, U, V, chart)

    def A(self, u, U, V, chart: int = 0) -> np.ndarray:
        return self._eval(A_point, u, U, V, chart)

    def nabla_omega(self, u, U, V, chart: int = 0) -> np.ndarray:
        return self._eval(nabla_omega_point, u, U, V, chart)

    def nabla_omega_symmetric(self, u, U, V, chart: int = 0) -> np.ndarray:
        return self._eval(symmetrized(nabla_omega_point), u, U, V, chart)

    def sff_correction(self, u, U, V, chart: int = 0) -> np.ndarray:
        return self._eval(sff_correction_point, u, U, V, chart)


def tensor_T(ft: FundamentalTensorModel, u, U, V, chart: int = 0) -> np.ndarray:
    return ft.T(u, U, V, chart)


def tensor_A(ft: FundamentalTensorModel, u, U, V, chart: int = 0) -> np.ndarray:
    return ft.A(u, U, V, chart)


def nabla_omega(ft: FundamentalTensorModel, u, U, V, chart: int = 0, symmetric: bool = False) -> np.ndarray:
    return ft.nabla_omega_symmetric(u, U, V, chart) if symmetric else ft.nabla_omega(u, U, V, chart)


# ---------------------------------------------------------------------------
# identity suites (vectorised over samples)
# ---------------------------------------------------------------------------

LEMMA_IDENTITIES = (
    "T(B*,C*) = T(C*,B*)",
    "T(B*,X^h) = omega(nabla_X^h B*)*",
    "A(X^h,Y^h) = -2 Omega(X^h,Y^h)* + A(Y^h,X^h)",
    "A(X^h,B*) = nabla_X^h B* - omega(nabla_X^h B*)* + [X^h,B*]",
    "nabla_B* C* = hat-nabla_B* C* + T(B*,C*)",
    "nabla_B* X^h = h nabla_B* X^h + T(B*,X^h)",
    "nabla_X^h B* = v nabla_X^h B* + A(X^h,B*)",
    "nabla_X^h Y^h = h nabla_X^h Y^h + A(X^h,Y^h)",
)


def _lemma_residuals(d: PointData, X, Y, B, C):
    n = d.P.shape[0]
    Q = jnp.eye(n) - d.P
    Xh, Yh, Bs, Cs = d.H @ X, d.H @ Y, d.sigma @ B, d.sigma @ C
    nXB = covd_fundamental(d, Xh, B)
    nBX = covd_lift(d, Bs, X)
    nXY = covd_lift(d, Xh, Y)
    nBC = covd_fundamental(d, Bs, C)
    vert = lambda W: d.sigma @ (d.omega @ W)
    res = [
        T_point(d, Bs, Cs) - T_point(d, Cs, Bs),
        T_point(d, Bs, Xh) - vert(nXB),
        A_point(d, Xh, Yh) - (-2.0 * d.sigma @ curvature_point(d, Xh, Yh, "half") + A_point(d, Yh, Xh)),
        A_point(d, Xh, Bs) - (nXB - vert(nXB) + bracket_lift_fundamental(d, X, B)),
        nBC - (d.P @ nBC + T_point(d, Bs, Cs)),
        nBX - (Q @ nBX + T_point(d, Bs, Xh)),
        nXB - (d.P @ nXB + A_point(d, Xh, Bs)),
        nXY - (Q @ nXY + A_point(d, Xh, Yh)),
    ]
    return jnp.stack([jnp.max(jnp.abs(r)) for r in res])


class SampleSet(NamedTuple):
    chart: int
    points: np.ndarray      # (N, n)
    base_vectors: np.ndarray  # (N, 2, m)
    algebra: np.ndarray     # (N, 2, k)
    tangents: np.ndarray    # (N, 2, n)
    covectors: np.ndarray   # (N, m)


def draw_samples(points: np.ndarray, m: int, k: int, rng: np.random.Generator, chart: int = 0) -> SampleSet:
    N, n = points.shape
    return SampleSet(
        chart=chart, points=np.asarray(points, dtype=float),
        base_vectors=rng.standard_normal((N, 2, m)),
        algebra=rng.standard_normal((N, 2, k)),
        tangents=rng.standard_normal((N, 2, n)),
        covectors=rng.standard_normal((N, m)),
    )


def lemma_identity_suite(ft: FundamentalTensorModel, samples: SampleSet) -> dict:
    """Max residual of each identity over the samples, plus ``"max"``."""
    data = ft.data_fn(samples.chart)

    def one(u, Xs, Bs):
        return _lemma_residuals(data(u), Xs[0], Xs[1], Bs[0], Bs[1])

    res = np.asarray(jax.jit(jax.vmap(one))(samples.points, samples.base_vectors, samples.algebra))
    out = {name: float(v) for name, v in zip(LEMMA_IDENTITIES, res.max(axis=0))}
    out["max"] = float(res.max())
    return out


def sff_identity_residual(ft: FundamentalTensorModel, base_connection: AffineConnectionModel,
                          samples: SampleSet) -> float:
    """Max of ``|alpha(beta_pi(U,V)) + alpha(pi_*((2A^S + T^S)(U,V)))|``."""
    data = ft.data_fn(samples.chart)
    m = ft.bundle.base_dim
    gamma_P = ft.connection.local(samples.chart)
    gamma_M = base_connection.local(ft.bundle.base_chart_of[samples.chart])

    def one(u, UV, alpha):
        d = data(u)
        U, V = UV[0], UV[1]
        # pi is linear in product charts, so its Hessian term vanishes
        beta = (-jnp.einsum("kij,i,j->k", gamma_P(u), U, V)[:m]
                + jnp.einsum("abc,b,c->a", gamma_M(u[:m]), U[:m], V[:m]))
        return alpha @ beta + alpha @ (d.pistar @ sff_correction_point(d, U, V))

    r = np.asarray(jax.jit(jax.vmap(one))(samples.points, samples.tangents, samples.covectors))
    return float(np.max(np.abs(r)))


def pointwise_max(ft: FundamentalTensorModel, samples: SampleSet, fn) -> float:
    """Max abs of ``fn(d, U, V, X, Y, B, C)`` over samples (for ad hoc table rows)."""
    data = ft.data_fn(samples.chart)

    def one(u, UV, Xs, Bs):
        return jnp.max(jnp.abs(fn(data(u), UV[0], UV[1], Xs[0], Xs[1], Bs[0], Bs[1])))

    r = jax.jit(jax.vmap(one))(samples.points, samples.tangents, samples.base_vectors, samples.algebra)
    return float(np.max(np.asarray(r)))


# ---------------------------------------------------------------------------
# projectability and invariance
# ---------------------------------------------------------------------------


class ProjectionResult(NamedTuple):
    projectable: bool
    max_spread: float
    connection: AffineConnectionModel


PROJECTABILITY_THRESHOLD = 1e-8


def projected_christoffel_local(ft: FundamentalTensorModel, chart: int):
    """Closure ``u -> pi_*(nabla_{e_a^h} e_b^h)`` as a base Christoffel array ``[c, a, b]``."""
    data = ft.data_fn(chart)
    m = ft.bundle.base_dim
    eye = jnp.eye(m)

    def gam(u):
        d = data(u)
        out = jax.vmap(lambda a: jax.vmap(lambda b: d.pistar @ covd_lift(d, d.H @ a, b))(eye))(eye)
        return jnp.moveaxis(out, -1, 0)  # [c, a, b]
    return gam


def check_projectable(ft: FundamentalTensorModel, base_points: np.ndarray, group_samples: Sequence[np.ndarray],
                      base_chart: int = 0, threshold: float = PROJECTABILITY_THRESHOLD) -> ProjectionResult:
    """Compare ``pi_*(nabla^P_{X^h} Y^h)`` over several points of each fiber.

    The candidate base connection is read off at the bundle's reference
    section; it is returned whether or not the spread passes ``threshold``.
    """
    bundle = ft.bundle
    pchart, sec = bundle.section[base_chart]
    gam = jax.jit(jax.vmap(projected_christoffel_local(ft, pchart)))
    u0 = np.asarray(jax.vmap(sec)(jnp.asarray(base_points, dtype=float)))
    values = [np.asarray(gam(u0))]
    for g in group_samples:
        fn = jax.jit(jax.vmap(bundle.action_map(pchart, pchart, np.asarray(g))))
        values.append(np.asarray(gam(fn(u0))))
    stack = np.stack(values)
    spread = float(np.max(stack.max(axis=0) - stack.min(axis=0)))

    fns = []
    for b in range(len(bundle.base.charts)):
        pc, s = bundle.section[b]
        g_local = projected_christoffel_local(ft, pc)
        fns.append((lambda g_local, s: (lambda x: g_local(s(x))))(g_local, s))
    conn = AffineConnectionModel(bundle.base, fns, name=f"pi_*({ft.connection.name})")
    return ProjectionResult(spread < threshold, spread, conn)


def check_G_invariance(ft: FundamentalTensorModel, samples: SampleSet, group_samples: Sequence[np.ndarray],
                       tol: float = 1e-8):
    """Residual of ``(R_g)_*(nabla_U V) = nabla_{(R_g)_*U} (R_g)_*V``; returns ``(ok, residual)``."""
    bundle = ft.bundle
    c = samples.chart
    G = bundle.group
    gamma = ft.connection.local(c)
    act = bundle.action(c, c)

    def one(u, UV, g, ginv):
        R = lambda w: act(w, g)
        U, V = UV[0], UV[1]
        J = jax.jacfwd(R)(u)
        lhs = J @ gamma_contract(gamma(u), U, V)
        v = R(u)
        # push-forward of the constant field V, as a field near v
        W = lambda w: jax.jacfwd(R)(act(w, ginv)) @ V
        JU = J @ U
        rhs = jax.jvp(W, (v,), (JU,))[1] + gamma_contract(gamma(v), JU, W(v))
        return jnp.max(jnp.abs(lhs - rhs))

    kern = jax.jit(jax.vmap(one, in_axes=(0, 0, None, None)))
    worst = 0.0
    for g in group_samples:
        g = np.asarray(g)
        r = np.asarray(kern(samples.points, samples.tangents, jnp.asarray(g), jnp.asarray(G.inverse(g))))
        worst = max(worst, float(r.max()))
    return worst < tol, worst


# ---------------------------------------------------------------------------
# Kaluza-Klein metrics
# ---------------------------------------------------------------------------


def kaluza_klein_metric(form: ConnectionFormModel, k0, rng: np.random.Generator | None = None) -> ChartedManifold:
    """Total space with ``k(U,V) = h(pi_*U, pi_*V) + k0(omega(U), omega(V))``.

    ``h`` is the base metric.  ``k0`` must be positive definite and
    Ad-invariant; otherwise ``ValueError``.
    """
    bundle = form.bundle
    G = bundle.group
    k0 = np.asarray(k0, dtype=float).reshape(G.dim, G.dim)
    if np.any(np.linalg.eigvalsh(0.5 * (k0 + k0.T)) <= 0) or np.max(np.abs(k0 - k0.T)) > 0:
        raise ValueError("k0 must be symmetric positive definite")
    if not G.is_ad_invariant(k0, rng or np.random.default_rng(0)):
        raise ValueError(f"k0 is not Ad-invariant for {G.name}")
    k0j = jnp.asarray(k0)
    m = bundle.base_dim
    charts = []
    for c, chart in enumerate(bundle.total.charts):
        h = bundle.base.charts[bundle.base_chart_of[c]].metric
        om = form.form[c]

        def metric(u, h=h, om=om):
            n = u.shape[0]
            pistar = jnp.eye(m, n)
            o = om(u)
            return pistar.T @ h(u[:m]) @ pistar + o.T @ k0j @ o

        charts.append(dataclasses.replace(chart, metric=metric, christoffel=None))
    return ChartedManifold(f"KK({bundle.name})", bundle.dim, charts, bundle.total._transitions)


def kk_A_formula(form: ConnectionFormModel, kk_total: ChartedManifold, k0, u, X, B, chart: int = 0) -> np.ndarray:
    """``A_{X^h} B* = -1/2 k0(B, Omega(., X^h))^sharp`` with the plain exterior convention.

    The covector ``Z -> -1/2 k0(B, Omega(Z, X^h))`` is raised with the KK metric.
    """
    k0 = np.asarray(k0, dtype=float)
    n = form.bundle.dim
    Xh = horizontal_lift(form, u, X, chart)
    cov = np.array([-0.5 * np.asarray(B) @ k0 @ curvature_form(form, u, e, Xh, chart, "plain")
                    for e in np.eye(n)])
    return np.linalg.solve(kk_total.metric(u, chart), cov)


# ---------------------------------------------------------------------------
# frame bundles
# ---------------------------------------------------------------------------


def frame_bundle(base: ChartedManifold, connection: AffineConnectionModel, group: LieGroupModel):
    """GL(2) frame bundle over a 2-dimensional base with the connection form of ``connection``.

    Total-space coordinates are ``(x1, x2, e11, e12, e21, e22)`` where the
    frame matrix ``e`` has the frame vectors as columns (row-major flattening).
    Returns ``(bundle, form)``.
    """
    if base.dim != 2:
        raise ValueError("frame bundles are built for 2-dimensional bases")
    from fiberlab.geometry import Chart

    charts = []
    for c in base.charts:
        charts.append(Chart(
            name=f"{c.name}xGL", dim=6, handover_radius=1.0,
            factors=((0, 2, c.handover_radius, c.domain_radius), (2, 6, np.inf, np.inf)),
        ))
    transitions = {}
    for (i, j), phi in base._transitions.items():
        def tr(u, phi=phi):
            x, e = u[:2], u[2:].reshape(2, 2)
            return jnp.concatenate([phi(x), (jax.jacfwd(phi)(x) @ e).ravel()])
        transitions[(i, j)] = tr
    total = ChartedManifold(f"GL-frames({base.name})", 6, charts, transitions)

    E = jnp.asarray(group.basis)  # (4, 2, 2)

    def sigma(u):
        e = u[2:].reshape(2, 2)
        cols = jnp.einsum("ij,bjk->bik", e, E).reshape(4, 4)  # vec(e B_b)
        return jnp.concatenate([jnp.zeros((2, 4)), cols.T], axis=0)

    def make_form(gamma):
        def omega(u):
            x, e = u[:2], u[2:].reshape(2, 2)
            einv = inv_small(e)
            G = gamma(x)  # G[i, k, j] = Gamma^i_kj
            xcols = jnp.stack([(einv @ G[:, k, :] @ e).ravel() for k in range(2)], axis=1)
            ecols = jnp.stack([(einv @ E[b]).ravel() for b in range(4)], axis=1)
            return jnp.concatenate([xcols, ecols], axis=1)
        return omega

    cache = {}

    def action(src, dst):
        if (src, dst) not in cache:
            tr = total.transition(src, dst)

            def fn(u, g):
                return tr(jnp.concatenate([u[:2], (u[2:].reshape(2, 2) @ jnp.real(g)).ravel()]))
            cache[src, dst] = fn
        return cache[src, dst]

    section = [(b, (lambda x: jnp.concatenate([x, jnp.eye(2).ravel()]))) for b in range(len(base.charts))]
    bundle = PrincipalBundleModel(total.name, total, base, group, list(range(len(base.charts))),
                                  [sigma] * len(charts), action, section)
    form = ConnectionFormModel(bundle, [make_form(connection.local(b)) for b in range(len(base.charts))])
    return bundle, form


def frame_bundle_connections(bundle: PrincipalBundleModel, form: ConnectionFormModel,
                             base_connection: AffineConnectionModel):
    """Canonical lift ``nabla^c`` and horizontal lift ``nabla^H`` of ``base_connection``.

    Both are defined on the frame ``(e_1^h, e_2^h, E_11*, E_12*, E_21*, E_22*)``
    by their four relations and extended by the Leibniz rule; the coordinate
    Christoffels follow from ``d_mu = sum_beta (F^-1)^beta_mu F_beta``.
    ``nabla^H`` has vertical torsion ``-v[X^h, Y^h]`` on curved bases, so it
    is flagged ``torsion_free=False`` unless the base curvature vanishes.
    """
    G = bundle.group
    Ec = np.asarray(G.basis)
    prod = np.einsum("bij,cjk->bcik", Ec, Ec)
    prod_coeffs = jnp.asarray(G.from_matrix(prod))  # (4, 4, 4): (BC) in basis

    def build(chart, canonical):
        b = bundle.base_chart_of[chart]
        gamma_M = base_connection.local(b)
        H_fn = _lift_matrix(form.form[chart], 2)
        sig_fn = bundle.fundamental[chart]

        def frame(u):
            return jnp.concatenate([H_fn(u), sig_fn(u)], axis=1)  # (6, 6)

        finv = lambda u: inv_small(frame(u))

        def D(u):
            x, e = u[:2], u[2:].reshape(2, 2)
            F = frame(u)
            H, sig = F[:, :2], F[:, 2:]
            Gm = gamma_M(x)
            out = jnp.zeros((6, 6, 6))  # [:, alpha, beta] = nabla_{F_alpha} F_beta
            hh = jnp.einsum("cab,ic->iab", Gm, H)
            if canonical:
                R = curvature_endomorphisms_local(gamma_M, x)  # R[i, l, a, b] = (R(e_a, e_b) e_l)^i
                S = jnp.einsum("ibja->abij", R)  # S[a, b] = matrix of Z -> R(Z, e_a) e_b
                einv = inv_small(e)
                conj = jnp.einsum("ij,abjk,kl->abil", einv, S, e).reshape(2, 2, 4)
                hh = hh + jnp.einsum("ik,abk->iab", sig, conj)
            out = out.at[:, :2, :2].set(hh)
            vv = jnp.einsum("ik,bck->ibc", sig, prod_coeffs)
            out = out.at[:, 2:, 2:].set(vv)
            return out

        def gamma(u):
            F = frame(u)
            Fi = finv(u)
            dFi = jax.jacfwd(finv)(u)  # [beta, nu, mu] = d_mu (F^-1)^beta_nu
            term1 = jnp.einsum("bnm,ib->imn", dFi, F)
            term2 = jnp.einsum("am,bn,iab->imn", Fi, Fi, D(u))
            return term1 + term2
        return gamma

    charts = range(len(bundle.total.charts))
    flat_base = _is_flat(base_connection)
    canonical = AffineConnectionModel(bundle.total, [build(c, True) for c in charts],
                                      name="canonical lift", torsion_free=True)
    horizontal = AffineConnectionModel(bundle.total, [build(c, False) for c in charts],
                                       name="horizontal lift", torsion_free=flat_base)
    return canonical, horizontal


def _is_flat(conn: AffineConnectionModel, samples: int = 8) -> bool:
    rng = np.random.default_rng(0)
    for c in range(len(conn.manifold.charts)):
        for x in rng.uniform(-1, 1, size=(samples, conn.manifold.dim)):
            R = curvature_endomorphisms_local(conn.local(c), jnp.asarray(x))
            if float(jnp.max(jnp.abs(R))) > 1e-12:
                return False
    return True


def levi_civita_of(M: ChartedManifold) -> AffineConnectionModel:
    """Levi-Civita connection via autodiff of each chart metric."""
    return AffineConnectionModel(M, [levi_civita_closure(c.metric) for c in M.charts], name=f"LC({M.name})")
