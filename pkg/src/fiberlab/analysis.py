"""Statistical and pointwise verdicts for martingales and harmonic maps on bundles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
from scipy.integrate import solve_ivp

from fiberlab.bundles import (
    A_point,
    FundamentalTensorModel,
    SampleSet,
    T_point,
    bilinear_array,
    check_projectable,
    nabla_omega_point,
    pointwise_max,
    sff_correction_point,
    symmetrized,
)
from fiberlab.errors import DomainError, SampleSizeError
from fiberlab.geometry import AffineConnectionModel, SmoothMapModel, euclidean, gamma_contract
from fiberlab.stochastic import (
    LocalTensor,
    PathEnsemble,
    RealProcessSample,
    TimeGrid,
    coordinate_differentials,
    ito_integral,
    project,
    quadratic_integral,
    strat_integral,
)

MIN_PATHS = 100
N_BINS = 20
SIGMA_MULTIPLIER = 4.0
C_DISC = 1.0


# ---------------------------------------------------------------------------
# drift test
# ---------------------------------------------------------------------------


@dataclass
class DriftReport:
    name: str
    n_paths: int
    T: float
    dt: float
    bin_edges: list
    bin_means: list
    bin_ses: list
    bin_pass: list
    global_mean: float
    global_se: float
    sigma_multiplier: float
    c_disc: float
    consistent: bool

    @property
    def verdict(self) -> str:
        return "martingale-consistent" if self.consistent else "rejected"

    @property
    def max_bin_score(self) -> float:
        """Largest ``|mean| / (k SE + C_disc dt)`` over bins (1 is the threshold)."""
        return float(max(abs(m) / (self.sigma_multiplier * s + self.c_disc * self.dt)
                         for m, s in zip(self.bin_means, self.bin_ses)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


def drift_test(Z: RealProcessSample, n_bins: int = N_BINS, sigma: float = SIGMA_MULTIPLIER,
               c_disc: float = C_DISC, min_paths: int = MIN_PATHS, name: str = "") -> DriftReport:
    """Binned zero-drift test of a real process ensemble.

    Consistent iff ``|global mean| <= sigma SE + c_disc dt`` and every bin mean
    of increments satisfies the same bound with its own SE.
    """
    vals = np.asarray(Z.values, dtype=float)
    if vals.ndim != 2:
        raise ValueError("drift_test takes a scalar process; test components separately")
    N, K1 = vals.shape
    if N < min_paths:
        raise SampleSizeError(f"drift test needs at least {min_paths} paths, got {N}; increment N")
    K = K1 - 1
    dt = Z.grid.dt
    edges = np.unique(np.round(np.linspace(0, K, n_bins + 1)).astype(int))
    incs = vals[:, edges[1:]] - vals[:, edges[:-1]]
    means = incs.mean(axis=0)
    ses = incs.std(axis=0, ddof=1) / np.sqrt(N)
    bin_ok = np.abs(means) <= sigma * ses + c_disc * dt
    tot = vals[:, -1] - vals[:, 0]
    gm, gse = float(tot.mean()), float(tot.std(ddof=1) / np.sqrt(N))
    ok = bool(abs(gm) <= sigma * gse + c_disc * dt and bin_ok.all())
    return DriftReport(name or Z.name, N, Z.grid.T, dt, (edges * dt).tolist(), means.tolist(), ses.tolist(),
                       bin_ok.tolist(), gm, gse, sigma, c_disc, ok)


def drift_test_components(Z: RealProcessSample, **kw) -> list[DriftReport]:
    return [drift_test(c, **kw) for c in Z.components()]


def estimate_c_disc(make_process, grid: TimeGrid) -> tuple[float, float]:
    """Discretisation constant from a ``dt`` / ``dt/2`` pair of runs.

    ``make_process(grid)`` returns a scalar process; returns ``(C, SE)`` for
    the estimate ``|mean_dt - mean_dt/2| / (dt/2)``.  Coupled noise makes the
    SE much smaller than independent runs would.
    """
    a, b = make_process(grid), make_process(grid.refined(2))
    ta, tb = a.values[:, -1], b.values[:, -1]
    if ta.shape == tb.shape:
        diff = ta - tb
        return float(abs(diff.mean()) / (grid.dt / 2)), float(diff.std(ddof=1) / np.sqrt(diff.size) / (grid.dt / 2))
    se = np.sqrt(ta.var(ddof=1) / ta.size + tb.var(ddof=1) / tb.size)
    return float(abs(ta.mean() - tb.mean()) / (grid.dt / 2)), float(se / (grid.dt / 2))


# ---------------------------------------------------------------------------
# fields used by the martingale characterisation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _tensors(scenario, connection) -> FundamentalTensorModel:
    if connection is scenario.connection:
        return scenario.tensors
    return FundamentalTensorModel(scenario.form, connection)


@lru_cache(maxsize=None)
def _coordinate_forms(M) -> tuple:
    return tuple(coordinate_differentials(M))


@lru_cache(maxsize=None)
def _sym_nabla_omega_field(ft: FundamentalTensorModel):
    fns = [(lambda data: (lambda u: bilinear_array(symmetrized(nabla_omega_point), data(u))))(ft.data_fn(c))
           for c in range(len(ft.bundle.total.charts))]
    return LocalTensor(ft.bundle.total, fns, "(nabla omega)^S")


@lru_cache(maxsize=None)
def _pulled_correction_field(ft: FundamentalTensorModel, alpha: LocalTensor, point_fn, name: str):
    """``(U, V) -> alpha(pi_* point_fn(U, V))`` as a bilinear field on the total space."""
    bundle = ft.bundle
    m = bundle.base_dim
    fns = []
    for c in range(len(bundle.total.charts)):
        data = ft.data_fn(c)
        a = alpha.local(bundle.base_chart_of[c])

        def f(u, data=data, a=a):
            d = data(u)
            arr = bilinear_array(point_fn, d)  # [i, U, V]
            return jnp.einsum("c,ci,iab->ab", a(u[:m]), d.pistar, arr)
        fns.append(f)
    return LocalTensor(bundle.total, fns, name)


def two_A_plus_T(d, U, V):
    return sff_correction_point(d, U, V)


def A_only(d, U, V):
    return symmetrized(A_point)(d, U, V)


@dataclass
class TheoremProcesses:
    vertical: RealProcessSample          # (te1), algebra-valued
    horizontal: list                     # (te2), one per alpha
    alphas: list


def theorem1_processes(ens: PathEnsemble, scenario, alphas=None, connection: AffineConnectionModel | None = None,
                       base_connection: AffineConnectionModel | None = None,
                       verify_projectable: bool = False) -> TheoremProcesses:
    """The two processes of the martingale characterisation.

    ``Z1 = int omega dY - 1/2 int (nabla^P omega)^S(dY, dY)`` and, for each
    base 1-form alpha, ``Z2 = int alpha d^{nabla^M} pi(Y) + 1/2 int alpha pi_* (2A^S + T^S)(dY, dY)``.
    """
    conn = connection or scenario.connection
    base_conn = base_connection or scenario.base_connection
    ft = _tensors(scenario, conn)
    if verify_projectable:
        rng = np.random.default_rng(0)
        pts = scenario.sample_points(rng, 8)[:, :scenario.bundle.base_dim]
        res = check_projectable(ft, pts, scenario.group_samples(rng, 3))
        if not res.projectable:
            raise DomainError(f"connection is not projectable (fiber spread {res.max_spread:.2e})")
    alphas = alphas or _coordinate_forms(scenario.bundle.base)
    z1 = strat_integral(scenario.form, ens, "int omega dY") - quadratic_integral(
        _sym_nabla_omega_field(ft), ens).scaled(0.5)
    z1.name = "te1"
    base = project(ens, scenario.bundle)
    z2 = []
    for a in alphas:
        ito = ito_integral(a, base_conn, base)
        q = quadratic_integral(_pulled_correction_field(ft, a, two_A_plus_T, "2A+T"), ens)
        z = ito + q.scaled(0.5)
        z.name = f"te2[{a.name}]"
        z2.append(z)
    return TheoremProcesses(z1, z2, list(alphas))


def corollary_processes(ens: PathEnsemble, scenario, alphas=None) -> TheoremProcesses:
    """The Kaluza-Klein simplification as literally stated: ``int omega dY`` and
    ``int alpha d^nabla pi(Y) - 1/2 int alpha pi_* A(dY, dY)``."""
    ft = scenario.tensors
    alphas = alphas or _coordinate_forms(scenario.bundle.base)
    z1 = strat_integral(scenario.form, ens, "int omega dY")
    base = project(ens, scenario.bundle)
    z2 = []
    for a in alphas:
        ito = ito_integral(a, scenario.base_connection, base)
        q = quadratic_integral(_pulled_correction_field(ft, a, A_only, "A"), ens)
        z = ito - q.scaled(0.5)
        z.name = f"kk2[{a.name}]"
        z2.append(z)
    return TheoremProcesses(z1, z2, list(alphas))


def direct_martingale_test(ens: PathEnsemble, connection: AffineConnectionModel, forms=None, **kw) -> dict:
    """Itô integrals of total-space 1-forms (default ``du^i``) drift-tested one by one."""
    forms = forms or _coordinate_forms(ens.manifold)
    reports = [drift_test(ito_integral(f, connection, ens, name=f"ito[{f.name}]"), **kw) for f in forms]
    return {"consistent": all(r.consistent for r in reports), "reports": reports}


@dataclass
class MartingaleReport:
    theorem_consistent: bool
    te1: list
    te2: list
    direct: dict | None = None
    corollary: dict | None = None

    @property
    def consistent(self) -> bool:
        return self.theorem_consistent

    def to_dict(self) -> dict:
        out = {
            "consistent": self.theorem_consistent,
            "te1": [r.to_dict() for r in self.te1],
            "te2": [r.to_dict() for r in self.te2],
        }
        if self.direct is not None:
            out["direct"] = {"consistent": self.direct["consistent"],
                             "reports": [r.to_dict() for r in self.direct["reports"]]}
        if self.corollary is not None:
            out["kaluza_klein_literal"] = {
                "consistent": self.corollary["consistent"],
                "note": "reported separately; not part of the composite verdict",
                "reports": [r.to_dict() for r in self.corollary["reports"]],
            }
        return out


def martingale_verdict(ens: PathEnsemble, scenario, alphas=None, direct: bool = True, kk_literal: bool | None = None,
                       connection=None, base_connection=None, **kw) -> MartingaleReport:
    """Composite verdict: every component of (te1) and every (te2) must pass.

    ``direct`` adds the total-space Itô test; ``kk_literal`` (default: on for
    Kaluza-Klein scenarios) adds the literal simplified conditions, reported
    on their own because their A-term disagrees with (te2) by a factor -2.
    """
    tp = theorem1_processes(ens, scenario, alphas, connection, base_connection)
    te1 = drift_test_components(tp.vertical, **kw)
    te2 = [drift_test(z, **kw) for z in tp.horizontal]
    ok = all(r.consistent for r in te1 + te2)
    rep = MartingaleReport(ok, te1, te2)
    if direct:
        rep.direct = direct_martingale_test(ens, connection or scenario.connection, **kw)
    if kk_literal is None:
        kk_literal = scenario.k0 is not None
    if kk_literal:
        cp = corollary_processes(ens, scenario, alphas)
        reports = drift_test_components(cp.vertical, **kw) + [drift_test(z, **kw) for z in cp.horizontal]
        rep.corollary = {"consistent": all(r.consistent for r in reports), "reports": reports}
    return rep


def group_martingale_test(V, G, **kw) -> list[DriftReport]:
    """Drift test of ``sum_k log(V_k^-1 V_{k+1})`` in the algebra basis (exponential coordinates)."""
    import scipy.linalg

    vals = V.values
    N, K1 = vals.shape[:2]
    inc = np.einsum("nkij,nkjl->nkil", np.linalg.inv(vals[:, :-1]), vals[:, 1:])
    flat = inc.reshape((-1,) + inc.shape[2:])
    if G.matrix_size == 1:
        logs = np.log(flat)
    else:
        logs = np.stack([scipy.linalg.logm(x) for x in flat])
    coeffs = G.from_matrix(logs).reshape(N, K1 - 1, G.dim)
    z = np.zeros((N, K1, G.dim))
    np.cumsum(coeffs, axis=1, out=z[:, 1:])
    return drift_test_components(RealProcessSample(V.grid, z, "log V"), **kw)


# ---------------------------------------------------------------------------
# harmonic maps
# ---------------------------------------------------------------------------


@dataclass
class HarmonicReport:
    r1_max: float
    r2_max: float
    grid: list
    r1: np.ndarray = field(repr=False)
    r2: np.ndarray = field(repr=False)
    holes: list = field(default_factory=list)

    def harmonic(self, tol: float = 1e-5) -> bool:
        return self.r1_max < tol and self.r2_max < tol

    def to_dict(self) -> dict:
        return {"r1_max": self.r1_max, "r2_max": self.r2_max, "n_points": len(self.grid), "holes": self.holes}


@lru_cache(maxsize=None)
def _harmonic_kernel(ft: FundamentalTensorModel, chart: int, base_gamma):
    data = ft.data_fn(chart)
    omega = ft.form.form[chart]
    m = ft.bundle.base_dim

    def residuals(u, J, H, ginv, gam_src):
        # J[a, i] = d_i F^a, H[a, i, j] = d_i d_j F^a on the source chart
        d = data(u)
        dom = jnp.einsum("kal,li->kai", d.domega, J)       # d_i omega_ka
        dpull = jnp.einsum("kai,aj->kij", dom, J) + jnp.einsum("ka,aij->kij", d.omega, H)
        pull = d.omega @ J                                  # (k, p)
        nabla_pull = dpull - jnp.einsum("kl,lij->kij", pull, gam_src)
        tr_nabla_pull = jnp.einsum("ij,kij->k", ginv, nabla_pull)
        nw = jax.vmap(lambda a: jax.vmap(lambda b: nabla_omega_point(d, a, b))(J.T))(J.T)  # [i, j, k]
        tr_pull_nw = jnp.einsum("ij,ijk->k", ginv, nw)
        r1 = tr_nabla_pull - tr_pull_nw
        Jb, Hb = J[:m], H[:m]
        beta = (Hb - jnp.einsum("al,lij->aij", Jb, gam_src)
                + jnp.einsum("abc,bi,cj->aij", base_gamma(u[:m]), Jb, Jb))
        corr = jax.vmap(lambda a: jax.vmap(lambda b: d.pistar @ sff_correction_point(d, a, b))(J.T))(J.T)
        r2 = jnp.einsum("ij,aij->a", ginv, beta) + jnp.einsum("ij,ija->a", ginv, corr)
        return r1, r2
    return jax.jit(residuals)


def harmonic_point_residuals(ft, base_connection, u, J, H, ginv, gam_src, chart: int = 0):
    """``(r1, r2)`` at one source point from the 2-jet ``(F, dF, d^2F)``.

    ``r1 = tr(nabla F^* omega) - tr F^*(nabla^P omega)`` and
    ``r2 = tau_{pi F} + tr pi_* (2A^S + T^S)(F_*, F_*)``.  The trace of
    ``nabla F^* omega`` is minus :func:`fiberlab.geometry.codifferential`; this
    is the sign for which the condition matches the Stratonovich-Itô
    conversion of Brownian integrals.
    """
    base_gamma = base_connection.local(ft.bundle.base_chart_of[chart])
    k = _harmonic_kernel(ft, chart, base_gamma)
    r1, r2 = k(*(jnp.asarray(a, dtype=float) for a in (u, J, H, ginv, gam_src)))
    return np.asarray(r1), np.asarray(r2)


def harmonic_conditions(F: SmoothMapModel, scenario, grid_points, source_chart: int = 0,
                        connection=None, base_connection=None) -> HarmonicReport:
    """Evaluate both harmonicity residuals over ``grid_points`` of the source chart."""
    ft = _tensors(scenario, connection or scenario.connection)
    base_conn = base_connection or scenario.base_connection
    src = F.source
    lc_src = AffineConnectionModel.levi_civita(src)
    tchart = F.target_chart(source_chart)
    r1s, r2s, holes, used = [], [], [], []
    for x in np.atleast_2d(np.asarray(grid_points, dtype=float)):
        try:
            g = src.metric(x, source_chart)
            u = F.value(x, source_chart)
            J = F.differential(x, source_chart)
            H = np.asarray(F.d2_fn(source_chart)(jnp.asarray(x)))
            scenario.bundle.total.check_point(u, tchart)
        except DomainError as exc:
            holes.append({"point": x.tolist(), "reason": str(exc)})
            continue
        gs = lc_src.gamma(x, source_chart)
        r1, r2 = harmonic_point_residuals(ft, base_conn, u, J, H, np.linalg.inv(g), gs, tchart)
        r1s.append(r1)
        r2s.append(r2)
        used.append(x.tolist())
    r1a, r2a = np.array(r1s), np.array(r2s)
    return HarmonicReport(float(np.max(np.abs(r1a))) if r1s else np.nan,
                          float(np.max(np.abs(r2a))) if r2s else np.nan, used, r1a, r2a, holes)


def geodesic_map(scenario, u0, v0, t_max: float = 7.0, chart: int = 0, connection=None,
                 rtol: float = 1e-12, atol: float = 1e-12) -> SmoothMapModel:
    """Geodesic of ``nabla^P`` through ``u0`` with velocity ``v0`` on ``[-t_max, t_max]``.

    Solved with DOP853; the first and second derivatives come from the
    velocity of the dense solution.
    """
    conn = connection or scenario.connection
    gam = jax.jit(conn.local(chart))
    n = scenario.bundle.dim
    u0, v0 = np.asarray(u0, dtype=float), np.asarray(v0, dtype=float)

    def rhs(t, y):
        u, v = y[:n], y[n:]
        return np.concatenate([v, -np.asarray(gamma_contract(gam(u), v, v))])

    fwd = solve_ivp(rhs, (0, t_max), np.concatenate([u0, v0]), method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True)
    bwd = solve_ivp(rhs, (0, -t_max), np.concatenate([u0, v0]), method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True)
    if not (fwd.success and bwd.success):
        raise DomainError("geodesic integration failed")

    def state(t):
        t = np.asarray(t, dtype=float)
        if np.any(np.abs(t) > t_max):
            raise DomainError(f"parameter outside [-{t_max}, {t_max}]")
        flat = t.reshape(-1)
        out = np.where(flat[None, :] >= 0, fwd.sol(np.maximum(flat, 0)), bwd.sol(np.minimum(flat, 0)))
        return out.T.reshape(t.shape + (2 * n,))

    def fn(x):
        return state(np.asarray(x)[..., 0])[..., :n]

    def d(x):
        return state(np.asarray(x)[..., 0])[..., n:][..., None]

    def d2(x):
        # differentiate the interpolated velocity, not the equation, so the
        # harmonic residuals are a real check of the solution
        t = float(np.asarray(x)[..., 0])
        h = 1e-4
        lo, hi = max(t - h, -t_max), min(t + h, t_max)
        acc = (state(hi)[n:] - state(lo)[n:]) / (hi - lo)
        return acc[:, None, None]

    F = SmoothMapModel(euclidean(1, "interval"), scenario.bundle.total, {0: (chart, fn)}, {0: d}, {0: d2},
                       name="geodesic")
    F.state = state
    return F


def map_of_brownian(F: SmoothMapModel, grid: TimeGrid, seed: int, N: int, chart: int = 0, label: str = ""):
    """``Y = F(b)`` for a standard 1-d Brownian motion ``b`` from 0 (Bismut check)."""
    from fiberlab import rng as _rng

    dW = _rng.brownian_increments(seed, N, grid.K, 1, grid.dt)
    b = np.zeros((N, grid.K + 1))
    np.cumsum(dW[..., 0], axis=1, out=b[:, 1:])
    if hasattr(F, "state"):
        X = F.state(b)[..., :F.target.dim]
    else:
        X = np.asarray(jax.jit(jax.vmap(F.fn(0)))(jnp.asarray(b.reshape(-1, 1)))).reshape(N, grid.K + 1, -1)
    charts = np.full(b.shape, F.target_chart(chart))
    return PathEnsemble(F.target, grid, charts, X, dW, seed, label or f"{F.name}(b)")


# ---------------------------------------------------------------------------
# static tables
# ---------------------------------------------------------------------------


def corollary1_static_checks(scenario, samples: SampleSet, connection=None) -> dict:
    """Rows of the Kaluza-Klein nabla-omega table plus ``T = 0`` and ``A_{X^h} X^h = 0``."""
    ft = _tensors(scenario, connection or scenario.connection)
    G = scenario.bundle.group
    c = jnp.asarray(G.structure_constants)

    def row_BC(d, U, V, X, Y, B, C):
        return nabla_omega_point(d, d.sigma @ B, d.sigma @ C) + 0.5 * jnp.einsum("kab,a,b->k", c, B, C)

    def row_BX(d, U, V, X, Y, B, C):
        return nabla_omega_point(d, d.sigma @ B, d.H @ X)

    def row_XB(d, U, V, X, Y, B, C):
        return nabla_omega_point(d, d.H @ X, d.sigma @ B)

    def row_XY(d, U, V, X, Y, B, C):
        Xh, Yh = d.H @ X, d.H @ Y
        return nabla_omega_point(d, Xh, Yh) + d.omega @ A_point(d, Xh, Yh)

    def sym(d, U, V, X, Y, B, C):
        return symmetrized(nabla_omega_point)(d, U, V)

    def T_zero(d, U, V, X, Y, B, C):
        return T_point(d, U, V)

    def AXX(d, U, V, X, Y, B, C):
        return A_point(d, d.H @ X, d.H @ X)

    rows = {
        "nabla omega(B*,C*) + 1/2 [B,C]": row_BC,
        "nabla omega(B*,X^h)": row_BX,
        "nabla omega(X^h,B*)": row_XB,
        "nabla omega(X^h,Y^h) + omega(A(X^h,Y^h))": row_XY,
        "symmetric part of nabla omega": sym,
        "T": T_zero,
        "A(X^h,X^h)": AXX,
    }
    out = {name: pointwise_max(ft, samples, fn) for name, fn in rows.items()}
    out["max"] = max(out.values())
    return out


def frame_bundle_checks(scenario, samples: SampleSet) -> dict:
    """``T = 0``, ``pi_* A = 0`` for each connection; ``(nabla omega)^S + omega . omega`` for the horizontal lift."""
    E = jnp.asarray(scenario.bundle.group.basis)
    G = scenario.bundle.group
    to_coeffs = jnp.asarray(np.linalg.pinv(np.asarray(G.basis).reshape(G.dim, -1).T))
    out = {}
    for name, conn in scenario.connections.items():
        ft = _tensors(scenario, conn)
        out[f"{name}: T"] = pointwise_max(ft, samples, lambda d, U, V, *a: T_point(d, U, V))
        out[f"{name}: pi_* A"] = pointwise_max(ft, samples, lambda d, U, V, *a: d.pistar @ A_point(d, U, V))

        def sym_minus(d, U, V, *a):
            wu = jnp.einsum("a,aij->ij", d.omega @ U, E)
            wv = jnp.einsum("a,aij->ij", d.omega @ V, E)
            odot = to_coeffs @ (0.5 * (wu @ wv + wv @ wu)).reshape(-1)
            return symmetrized(nabla_omega_point)(d, U, V) + odot
        out[f"{name}: (nabla omega)^S + omega.omega"] = pointwise_max(ft, samples, sym_minus)
    return out


