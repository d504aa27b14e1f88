"""Built-in bundle scenarios.

Each scenario bundles a principal bundle, a connection form, a total-space
connection ``nabla^P``, the base connection it should project to, and
samplers for points and group elements.  Build them with :func:`build_scenario`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from fiberlab.bundles import (
    ConnectionFormModel,
    FundamentalTensorModel,
    PrincipalBundleModel,
    draw_samples,
    frame_bundle,
    frame_bundle_connections,
    kaluza_klein_metric,
    levi_civita_of,
)
from fiberlab.geometry import AffineConnectionModel, Chart, ChartedManifold, euclidean, inv_small, sphere2
from fiberlab.lie import GL2, SU2, U1


@dataclass(eq=False)
class Scenario:
    id: str
    params: dict
    bundle: PrincipalBundleModel
    form: ConnectionFormModel
    connection: AffineConnectionModel
    base_connection: AffineConnectionModel
    connections: dict = field(default_factory=dict)
    kk_total: ChartedManifold | None = None
    k0: np.ndarray | None = None
    notes: str = ""
    point_sampler: object = None

    @cached_property
    def tensors(self) -> FundamentalTensorModel:
        return FundamentalTensorModel(self.form, self.connection)

    def tensors_for(self, name: str) -> FundamentalTensorModel:
        return FundamentalTensorModel(self.form, self.connections[name])

    def sample_points(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` total-space points in chart 0."""
        return self.point_sampler(rng, n)

    def samples(self, rng: np.random.Generator, n: int):
        return draw_samples(self.sample_points(rng, n), self.bundle.base_dim, self.bundle.group.dim, rng)

    def group_samples(self, rng: np.random.Generator, n: int, scale: float = 1.0):
        return [self.bundle.group.random_element(rng, scale) for _ in range(n)]


# ---------------------------------------------------------------------------
# abelian Kaluza-Klein bundle R^2 x U(1)
# ---------------------------------------------------------------------------


def abelian_kk(c: float = 2.0, k0: float = 1.0) -> Scenario:
    """``P = R^2 x U(1)`` with ``omega = d theta + c x1 dx2``.

    The curvature is constant, ``v[d1^h, d2^h] = -c d_theta``.
    """
    base = euclidean(2, "R2")
    total = ChartedManifold.product("R2xU(1)", base, euclidean(1, "theta"))
    G = U1()
    sigma = lambda u: jnp.array([[0.0], [0.0], [1.0]])
    form_fn = lambda u: jnp.array([[0.0, c * u[0], 1.0]])

    def _shift(u, g):
        return u + jnp.concatenate([jnp.zeros(2), jnp.angle(g.reshape(-1)[:1])])

    action = lambda src, dst: _shift

    section = [(0, lambda x: jnp.concatenate([x, jnp.zeros(1)]))]
    bundle = PrincipalBundleModel("R2xU(1)", total, base, G, [0], [sigma], action, section)
    form = ConnectionFormModel(bundle, [form_fn], name=f"d theta + {c:g} x1 dx2")
    k0m = np.array([[float(k0)]])
    kk = kaluza_klein_metric(form, k0m)
    lc = levi_civita_of(kk)

    def sampler(rng, n):
        return np.column_stack([rng.uniform(-1.5, 1.5, (n, 2)), rng.uniform(-np.pi, np.pi, n)])

    return Scenario("s1-abelian-kk", {"c": c, "k0": k0}, bundle, form, lc,
                    AffineConnectionModel.flat(base), {"levi-civita": lc}, kk, k0m,
                    notes="abelian Kaluza-Klein bundle with constant curvature; T vanishes",
                    point_sampler=sampler)


# ---------------------------------------------------------------------------
# trivial SU(2) bundle over S^2 with the hedgehog connection
# ---------------------------------------------------------------------------


def _qmul(p, q):
    p0, pv = p[0], p[1:]
    q0, qv = q[0], q[1:]
    return jnp.concatenate([jnp.array([p0 * q0 - pv @ qv]), p0 * qv + q0 * pv + jnp.cross(pv, qv)])


def _qconj(q):
    return q * jnp.array([1.0, -1.0, -1.0, -1.0])


def _stereo3(sign):
    def q_of(y):
        r2 = y @ y
        return jnp.concatenate([jnp.array([sign * (1.0 - r2)]), 2.0 * y]) / (1.0 + r2)
    return q_of


def _stereo3_inv(sign):
    return lambda q: q[1:] / (1.0 + sign * q[0])


def _rotation(q):
    """Matrix of ``v -> q v q^-1`` on imaginary quaternions (unit ``q``)."""
    eye = jnp.eye(3)
    return jnp.stack([_qmul(_qmul(q, jnp.concatenate([jnp.zeros(1), e])), _qconj(q))[1:] for e in eye], axis=1)


def su2_to_quaternion(a):
    """Unit quaternion ``(a0, a1, a2, a3)`` with ``a = a0 + sum_k a_k (-i sigma_k)`` (traceable)."""
    return jnp.stack([jnp.real(a[0, 0]), -jnp.imag(a[0, 1]), -jnp.real(a[0, 1]), -jnp.imag(a[0, 0])])


def sphere3(handover_radius: float = 2.0) -> ChartedManifold:
    """Unit 3-sphere (identified with SU(2)) in two stereographic charts.

    Chart ``n`` has the identity at the origin, chart ``s`` has ``-1`` there.
    """
    inv = lambda y: y / (y @ y)
    charts = [Chart("n", 3, handover_radius=handover_radius, domain_radius=1e6),
              Chart("s", 3, handover_radius=handover_radius, domain_radius=1e6)]
    return ChartedManifold("S3", 3, charts, {(0, 1): inv, (1, 0): inv})


def hopf_su2(kappa: float = 1.0, berger: float = 1.0) -> Scenario:
    """``S^2 x SU(2)`` with ``A = kappa (n x dn)``; ``omega = Ad_{g^-1} A + g^-1 dg``.

    Algebra basis ``e_a = -(i/2) sigma_a`` so that ``[e1, e2] = e3``.  The
    quaternion of ``g`` is ``q0 + sum_a q_a (-i sigma_a)``; an algebra vector
    with coefficients ``b`` is the imaginary quaternion ``b / 2``.
    """
    base = sphere2(1.0)
    total = ChartedManifold.product("S2xSU(2)", base, sphere3())
    G = SU2()
    base_of, fundamentals, forms = [], [], []
    signs = []
    for combo_index, chart in enumerate(total.charts):
        base_ix, fib_ix = divmod(combo_index, 2)
        sign = 1.0 if fib_ix == 0 else -1.0
        signs.append(sign)
        base_of.append(base_ix)
        embed = base.charts[base_ix].embedding
        q_of = _stereo3(sign)

        def maurer_cartan(y, q_of=q_of):
            q = q_of(y)
            dq = jax.jacfwd(q_of)(y)  # (4, 3)
            return jnp.stack([2.0 * _qmul(_qconj(q), dq[:, i])[1:] for i in range(3)], axis=1)

        def hedgehog(x, embed=embed):
            n = embed(x)
            n = n / jnp.linalg.norm(n)
            dn = jax.jacfwd(lambda z: embed(z) / jnp.linalg.norm(embed(z)))(x)  # (3, 2)
            return kappa * jnp.stack([jnp.cross(n, dn[:, i]) for i in range(2)], axis=1)

        def sigma(u, mc=maurer_cartan):
            return jnp.concatenate([jnp.zeros((2, 3)), inv_small(mc(u[2:]))], axis=0)

        def omega(u, mc=maurer_cartan, hh=hedgehog, q_of=q_of):
            q = q_of(u[2:])
            return jnp.concatenate([_rotation(q).T @ hh(u[:2]), mc(u[2:])], axis=1)

        fundamentals.append(sigma)
        forms.append(omega)

    cache = {}

    def action(src, dst):
        if (src, dst) not in cache:
            q_src, inv_dst = _stereo3(signs[src]), _stereo3_inv(signs[dst])
            x_map = base.transition(base_of[src], base_of[dst])

            def fn(u, g):
                return jnp.concatenate([x_map(u[:2]), inv_dst(_qmul(q_src(u[2:]), su2_to_quaternion(g)))])
            cache[src, dst] = fn
        return cache[src, dst]

    section = [(2 * b, lambda x: jnp.concatenate([x, jnp.zeros(3)])) for b in range(2)]
    bundle = PrincipalBundleModel("S2xSU(2)", total, base, G, base_of, fundamentals, action, section)
    form = ConnectionFormModel(bundle, forms, name=f"hedgehog(kappa={kappa:g})")
    k0m = berger * np.eye(3)
    kk = kaluza_klein_metric(form, k0m)
    lc = levi_civita_of(kk)

    def sampler(rng, n):
        return np.column_stack([rng.uniform(-1.0, 1.0, (n, 2)), rng.uniform(-0.8, 0.8, (n, 3))])

    return Scenario("s2-hopf", {"kappa": kappa, "berger": berger}, bundle, form, lc,
                    AffineConnectionModel.levi_civita(base), {"levi-civita": lc}, kk, k0m,
                    notes="nonabelian bracket table: nabla omega(B*, C*) = -1/2 [B, C] on a Kaluza-Klein metric",
                    point_sampler=sampler)


# ---------------------------------------------------------------------------
# GL(2) frame bundles
# ---------------------------------------------------------------------------


def _frame_sampler(rng, n):
    out = np.empty((n, 6))
    i = 0
    while i < n:
        e = np.eye(2) + 0.3 * rng.standard_normal((2, 2))
        if np.linalg.det(e) < 0.3:
            continue
        out[i, :2] = rng.uniform(-1.0, 1.0, 2)
        out[i, 2:] = e.ravel()
        i += 1
    return out


def frame_scenario(base_kind: str, default: str | None = None) -> Scenario:
    base = euclidean(2, "R2") if base_kind == "flat" else sphere2(1.0)
    base_conn = AffineConnectionModel.levi_civita(base)
    G = GL2()
    bundle, form = frame_bundle(base, base_conn, G)
    canonical, horizontal = frame_bundle_connections(bundle, form, base_conn)
    # the horizontal lift is torsion free only over a flat base
    default = default or ("horizontal" if base_kind == "flat" else "canonical")
    conns = {"canonical": canonical, "horizontal": horizontal}
    sid = f"s3-frame-{'flat' if base_kind == 'flat' else 'sphere'}"
    return Scenario(sid, {"connection": default}, bundle, form, conns[default], base_conn, conns,
                    notes="GL(2) frame bundle with the canonical-lift and horizontal-lift connections",
                    point_sampler=_frame_sampler)


_BUILDERS = {
    "s1-abelian-kk": (abelian_kk, {"c": 2.0, "k0": 1.0}),
    "s2-hopf": (hopf_su2, {"kappa": 1.0, "berger": 1.0}),
    "s3-frame-flat": (lambda connection=None: frame_scenario("flat", connection), {"connection": "horizontal"}),
    "s3-frame-sphere": (lambda connection=None: frame_scenario("sphere", connection), {"connection": "canonical"}),
}

CATALOG = {
    "s1-abelian-kk": "R^2 x U(1), omega = d theta + c x1 dx2, Kaluza-Klein metric; martingale and harmonicity checks",
    "s2-hopf": "S^2 x SU(2) with the hedgehog connection; nonabelian bracket table, Berger-type fiber metric",
    "s3-frame-flat": "GL(2) frame bundle of the flat plane; canonical and horizontal lifts coincide",
    "s3-frame-sphere": "GL(2) frame bundle of the round sphere; canonical-lift and horizontal-lift relations",
}


def build_scenario(scenario_id: str, **params) -> Scenario:
    if scenario_id not in _BUILDERS:
        raise KeyError(f"unknown scenario {scenario_id!r}; known: {sorted(_BUILDERS)}")
    fn, defaults = _BUILDERS[scenario_id]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameters for {scenario_id}: {sorted(unknown)}")
    merged = {**defaults, **params}
    return fn(**merged)


def list_scenarios() -> list[dict]:
    return [{"id": k, "description": v, "defaults": dict(_BUILDERS[k][1])} for k, v in CATALOG.items()]
