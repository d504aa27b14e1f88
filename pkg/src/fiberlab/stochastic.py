"""Discrete semimartingales on charted manifolds and bundles.

Ensembles are stored as arrays: ``charts[i, k]`` and ``X[i, k]`` give the
chart and coordinates of path ``i`` at step ``k``, and ``dW[i, k]`` the
driving increment over step ``k``.  The SDE scheme is Stratonovich-Heun
(predictor-corrector); ``brownian_chart`` uses the Euler scheme of the Itô
form.  Integrals are evaluated step by step in the chart of the left
endpoint, with the right endpoint transported into that chart when a path
hands over.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from fiberlab import rng
from fiberlab.errors import DomainError, RefinementRequired
from fiberlab.geometry import (
    AffineConnectionModel,
    ChartedManifold,
    LocalFn,
    covd_local,
    frame_local,
    gamma_contract,
    inv_small,
)

# per-step coordinate jump above this fraction of the handover radius asks for a smaller step
GUARD_FRACTION = 0.25
EVAL_CHUNK = 1 << 16


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, T]``; ``T`` is stored as ``K * dt``."""

    T: float = 1.0
    dt: float = 1e-3

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("T and dt must be positive")
        K = int(round(self.T / self.dt))
        if K < 1 or abs(K * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError(f"T = {self.T} is not an integer multiple of dt = {self.dt}")
        object.__setattr__(self, "T", K * self.dt)

    @property
    def K(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.dt

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.dt / factor)


@dataclass(eq=False)
class PathSample:
    manifold: ChartedManifold
    grid: TimeGrid
    charts: np.ndarray
    X: np.ndarray
    dW: np.ndarray | None = None


@dataclass(eq=False)
class PathEnsemble:
    """``N`` discrete paths on a common grid."""

    manifold: ChartedManifold
    grid: TimeGrid
    charts: np.ndarray          # (N, K+1) int
    X: np.ndarray               # (N, K+1, n)
    dW: np.ndarray | None = None    # (N, K, d)
    master_seed: int | None = None
    label: str = ""

    def __post_init__(self):
        self.charts = np.asarray(self.charts, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.shape[:2] != self.charts.shape or self.X.shape[1] != self.grid.K + 1:
            raise ValueError("charts/X shapes do not match the grid")
        if not np.all(np.isfinite(self.X)):
            raise DomainError("non-finite coordinates in ensemble")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    @property
    def path_seeds(self) -> list[tuple[int, tuple[int]]]:
        """``(master seed, spawn key)`` for each path."""
        return [(self.master_seed, (i,)) for i in range(self.N)]

    def path(self, i: int) -> PathSample:
        return PathSample(self.manifold, self.grid, self.charts[i], self.X[i],
                          None if self.dW is None else self.dW[i])

    def subset(self, idx) -> "PathEnsemble":
        return PathEnsemble(self.manifold, self.grid, self.charts[idx], self.X[idx],
                            None if self.dW is None else self.dW[idx], self.master_seed, self.label)


@dataclass(eq=False)
class RealProcessSample:
    """Values ``Z[i, k, ...]`` aligned with an ensemble; integral processes start at 0."""

    grid: TimeGrid
    values: np.ndarray
    name: str = ""

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def component_shape(self) -> tuple:
        return self.values.shape[2:]

    def component(self, idx) -> "RealProcessSample":
        return RealProcessSample(self.grid, self.values[(slice(None), slice(None)) + np.index_exp[idx]],
                                 f"{self.name}[{idx}]")

    def components(self) -> list["RealProcessSample"]:
        if not self.component_shape:
            return [self]
        return [self.component(i) for i in np.ndindex(*self.component_shape)]

    def __add__(self, other: "RealProcessSample") -> "RealProcessSample":
        return RealProcessSample(self.grid, self.values + other.values, f"{self.name}+{other.name}")

    def __sub__(self, other: "RealProcessSample") -> "RealProcessSample":
        return RealProcessSample(self.grid, self.values - other.values, f"{self.name}-{other.name}")

    def scaled(self, s: float, name: str = "") -> "RealProcessSample":
        return RealProcessSample(self.grid, s * self.values, name or f"{s:g}*{self.name}")


def _cumulative(grid, steps, name):
    z = np.zeros((steps.shape[0], steps.shape[1] + 1) + steps.shape[2:])
    np.cumsum(steps, axis=1, out=z[:, 1:])
    return RealProcessSample(grid, z, name)


# ---------------------------------------------------------------------------
# chunked per-chart evaluation
# ---------------------------------------------------------------------------


def _padded_size(m: int) -> int:
    if m >= EVAL_CHUNK:
        return EVAL_CHUNK
    return 1 << max(4, int(np.ceil(np.log2(max(m, 1)))))


def map_by_chart(kernel_for_chart: Callable[[int], Callable], charts: np.ndarray, *arrays) -> np.ndarray:
    """Apply a jitted vectorised kernel to rows grouped by chart.

    ``arrays`` share the leading shape of ``charts``.  Chunks are padded to a
    small set of sizes so each kernel compiles only a few times.
    """
    lead = charts.shape
    cflat = charts.reshape(-1)
    flat = [a.reshape((cflat.size,) + a.shape[len(lead):]) for a in arrays]
    out = None
    for c in np.unique(cflat):
        idx = np.nonzero(cflat == c)[0]
        kern = kernel_for_chart(int(c))
        for s in range(0, idx.size, EVAL_CHUNK):
            sel = idx[s:s + EVAL_CHUNK]
            size = _padded_size(sel.size)
            padded = np.concatenate([sel, np.full(size - sel.size, sel[0])])
            res = np.asarray(kern(*[a[padded] for a in flat]))[:sel.size]
            if out is None:
                out = np.zeros((cflat.size,) + res.shape[1:])
            out[sel] = res
    return out.reshape(lead + out.shape[1:])


def step_pairs(ens: PathEnsemble):
    """``(charts, x_left, x_right)`` per step with ``x_right`` in the left endpoint's chart."""
    c0, c1 = ens.charts[:, :-1], ens.charts[:, 1:]
    x0, x1 = ens.X[:, :-1], ens.X[:, 1:].copy()
    moved = c0 != c1
    if moved.any():
        for i, j in set(zip(c0[moved].tolist(), c1[moved].tolist())):
            mask = moved & (c0 == i) & (c1 == j)
            x1[mask] = ens.manifold.to_chart(x1[mask], j, i)
    return c0, x0, x1


@lru_cache(maxsize=None)
def _strat_kernel(alpha):
    return jax.jit(jax.vmap(lambda x0, x1: jnp.einsum("...i,i->...", alpha(0.5 * (x0 + x1)), x1 - x0)))


@lru_cache(maxsize=None)
def _ito_kernel(alpha, gamma):
    def f(x0, x1):
        dx = x1 - x0
        return jnp.einsum("...i,i->...", alpha(x0), dx + 0.5 * gamma_contract(gamma(x0), dx, dx))
    return jax.jit(jax.vmap(f))


@lru_cache(maxsize=None)
def _quad_kernel(b):
    def f(x0, x1):
        dx = x1 - x0
        return jnp.einsum("...ij,i,j->...", b(x0), dx, dx)
    return jax.jit(jax.vmap(f))


def strat_integral(alpha, ens: PathEnsemble, name: str = "") -> RealProcessSample:
    """Midpoint sums ``sum_k alpha((x_k + x_{k+1})/2)(x_{k+1} - x_k)``.

    ``alpha`` is anything with ``local(chart)`` returning a closure
    ``x -> (..., n)`` (covector fields, connection forms).
    """
    c, x0, x1 = step_pairs(ens)
    steps = map_by_chart(lambda ch: _strat_kernel(alpha.local(ch)), c, x0, x1)
    return _cumulative(ens.grid, steps, name or "strat")


def ito_integral(alpha, connection: AffineConnectionModel, ens: PathEnsemble, name: str = "") -> RealProcessSample:
    """``sum_k alpha_i(x_k)[dx^i + 1/2 gamma^i_jk(x_k) dx^j dx^k]``."""
    c, x0, x1 = step_pairs(ens)
    steps = map_by_chart(lambda ch: _ito_kernel(alpha.local(ch), connection.local(ch)), c, x0, x1)
    return _cumulative(ens.grid, steps, name or "ito")


def quadratic_integral(b, ens: PathEnsemble, name: str = "") -> RealProcessSample:
    """``sum_k b_ij(x_k) dx^i dx^j``; ``b.local(chart)`` returns ``x -> (..., n, n)``."""
    c, x0, x1 = step_pairs(ens)
    steps = map_by_chart(lambda ch: _quad_kernel(b.local(ch)), c, x0, x1)
    return _cumulative(ens.grid, steps, name or "quadratic")


class LocalTensor:
    """Minimal per-chart tensor wrapper (anything ``local(chart)`` accepts)."""

    def __init__(self, manifold: ChartedManifold, fns: Sequence[LocalFn], name: str = ""):
        self.manifold = manifold
        self.fns = tuple(fns)
        self.name = name

    def local(self, chart: int = 0) -> LocalFn:
        return self.fns[chart]


def coordinate_differentials(M: ChartedManifold) -> list[LocalTensor]:
    """``dx^i`` in every chart (the default alpha-basis)."""
    eye = np.eye(M.dim)
    out = []
    for i in range(M.dim):
        e = jnp.asarray(eye[i])
        out.append(LocalTensor(M, [lambda x, e=e: e] * len(M.charts), f"dx{i + 1}"))
    return out


# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------


def _guard_radius(chart) -> float:
    radii = [r for _, _, r, _ in chart.factors] if chart.factors else [chart.handover_radius]
    finite = [r for r in radii if np.isfinite(r)]
    return GUARD_FRACTION * min(finite) if finite else np.inf


@lru_cache(maxsize=None)
def _heun_kernel(drift, diffusion):
    def step(u, dw, dt):
        a0, b0 = drift(u), diffusion(u)
        ub = u + a0 * dt + b0 @ dw
        a1, b1 = drift(ub), diffusion(ub)
        return u + 0.5 * (a0 + a1) * dt + 0.5 * (b0 + b1) @ dw
    return jax.jit(jax.vmap(step, in_axes=(0, 0, None)))


@lru_cache(maxsize=None)
def _euler_kernel(drift, diffusion):
    def step(u, dw, dt):
        return u + drift(u) * dt + diffusion(u) @ dw
    return jax.jit(jax.vmap(step, in_axes=(0, 0, None)))


def integrate(manifold: ChartedManifold, drift: Sequence[LocalFn], diffusion: Sequence[LocalFn],
              x0, grid: TimeGrid, dW: np.ndarray, chart0=0, scheme: str = "heun",
              master_seed: int | None = None, label: str = "") -> PathEnsemble:
    """Integrate ``dX = drift dt + diffusion dW`` (Stratonovich for Heun, Itô for Euler).

    ``drift[c]`` and ``diffusion[c]`` are chart closures returning ``(n,)`` and
    ``(n, d)``.  Raises :class:`RefinementRequired` if a step jumps further
    than the chart guard or leaves the finite numbers.
    """
    N, K, d = dW.shape
    if K != grid.K:
        raise ValueError("noise does not match the grid")
    n = manifold.dim
    X = np.empty((N, K + 1, n))
    C = np.empty((N, K + 1), dtype=np.int64)
    X[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (N, n))
    C[:, 0] = np.broadcast_to(np.asarray(chart0), (N,))
    C[:, 0], X[:, 0] = manifold.handover(C[:, 0], X[:, 0])
    make = _heun_kernel if scheme == "heun" else _euler_kernel
    guards = np.array([_guard_radius(c) for c in manifold.charts])
    kernels = [make(drift[c], diffusion[c]) for c in range(len(manifold.charts))]
    for k in range(K):
        x, ids = X[:, k], C[:, k]
        dw = dW[:, k]
        new = np.empty_like(x)
        present = np.unique(ids)
        for c in present:
            res = np.asarray(kernels[c](x, dw, grid.dt))
            if present.size == 1:
                new = res
            else:
                mask = ids == c
                new[mask] = res[mask]
        jump = np.max(np.abs(new - x), axis=1)
        if not np.all(np.isfinite(new)) or np.any(jump > guards[ids]):
            raise RefinementRequired(
                f"step {k}: coordinate jump {np.nanmax(jump):.3g} exceeds the chart guard; refine dt",
                suggested_dt=grid.dt / 4)
        C[:, k + 1], X[:, k + 1] = manifold.handover(ids, new)
    return PathEnsemble(manifold, grid, C, X, dW, master_seed, label)


def noise(master_seed: int, N: int, grid: TimeGrid, dim: int) -> np.ndarray:
    return rng.brownian_increments(master_seed, N, grid.K, dim, grid.dt)


def brownian_chart(M: ChartedManifold, x0, grid: TimeGrid, seed: int, N: int, chart0: int = 0,
                   dW: np.ndarray | None = None) -> PathEnsemble:
    """Euler scheme for Brownian motion of the chart metrics.

    ``dX^i = -1/2 g^jk gamma^i_jk dt + sigma^i_a dW^a`` with ``sigma`` the
    symmetric square root of ``g^-1``; the Christoffels are Levi-Civita.
    """
    lc = AffineConnectionModel.levi_civita(M)
    drift, diff = [], []
    for c, chart in enumerate(M.charts):
        metric, gamma = chart.metric, lc.local(c)
        drift.append(_bm_drift(metric, gamma))
        diff.append(_bm_diffusion(metric))
    dW = noise(seed, N, grid, M.dim) if dW is None else dW
    M.check_point(x0, chart0)
    return integrate(M, drift, diff, x0, grid, dW, chart0, scheme="euler", master_seed=seed,
                     label=f"brownian({M.name})")


@lru_cache(maxsize=None)
def _bm_drift(metric, gamma):
    return lambda x: -0.5 * jnp.einsum("jk,ijk->i", inv_small(metric(x)), gamma(x))


@lru_cache(maxsize=None)
def _bm_diffusion(metric):
    return lambda x: frame_local(metric, x)


# ---------------------------------------------------------------------------
# bundle drivers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Driver:
    """A vector field on the total space used as a noise channel or drift.

    kind:
      ``"horizontal"``        lift of the constant base field ``components``
      ``"horizontal-frame"``  lift of the ``components[0]``-th orthonormal base frame vector
      ``"vertical"``          fundamental field of the algebra element ``components``
      ``"field"``             ``fn(chart)`` returns a closure ``u -> (n,)``
    """

    kind: str
    components: tuple = ()
    scale: float = 1.0
    fn: Callable | None = None

    def local(self, scenario, chart: int) -> LocalFn:
        return _driver_local(self, scenario, chart)


@lru_cache(maxsize=None)
def _driver_cached(driver: Driver, scenario, chart: int) -> LocalFn:
    bundle, form = scenario.bundle, scenario.form
    s = driver.scale
    if driver.kind == "horizontal":
        lift = form.lift_field(np.asarray(driver.components, dtype=float), chart)
        return lambda u: s * lift(u)
    if driver.kind == "horizontal-frame":
        a = int(driver.components[0])
        metric = bundle.base.charts[bundle.base_chart_of[chart]].metric
        lift = form.lift_field(lambda x: frame_local(metric, x)[:, a], chart)
        return lambda u: s * lift(u)
    if driver.kind == "vertical":
        sig = bundle.fundamental[chart]
        B = jnp.asarray(driver.components, dtype=float)
        return lambda u: s * (sig(u) @ B)
    if driver.kind == "field":
        f = driver.fn(chart)
        return lambda u: s * f(u)
    raise ValueError(f"unknown driver kind {driver.kind!r}")


def _driver_local(driver, scenario, chart):
    return _driver_cached(driver, scenario, chart)


def _channel_local(channel, scenario, chart) -> LocalFn:
    parts = tuple(channel) if isinstance(channel, (tuple, list)) else (channel,)
    return _channel_cached(parts, scenario, chart)


@lru_cache(maxsize=None)
def _channel_cached(parts, scenario, chart) -> LocalFn:
    fns = [p.local(scenario, chart) for p in parts]
    if len(fns) == 1:
        return fns[0]
    return lambda u: sum(f(u) for f in fns)


@lru_cache(maxsize=None)
def ito_correction_local(fields: tuple, gamma: LocalFn) -> LocalFn:
    """``-1/2 sum_a nabla_{E_a} E_a``: the Stratonovich drift of ``d^nabla Y = E_a dW^a``."""
    def corr(u):
        return -0.5 * sum(covd_local(gamma, E, u, E(u)) for E in fields)
    return corr


def simulate_bundle_semimartingale(scenario, drivers: Sequence, grid: TimeGrid, seed: int, N: int,
                                   drift: Sequence = (), ito_correction: bool = False, u0=None,
                                   chart0: int = 0, dW: np.ndarray | None = None,
                                   connection: AffineConnectionModel | None = None,
                                   label: str = "") -> PathEnsemble:
    """Stratonovich-Heun ensemble of ``dY = V_0 dt + sum_a E_a(Y) dW^a`` on the total space.

    ``drivers`` lists noise channels (a :class:`Driver` or a tuple of them,
    summed); ``drift`` lists drift fields.  With ``ito_correction`` the drift
    also gets ``-1/2 sum_a nabla^P_{E_a} E_a`` so that the channels drive the
    Itô equation ``d^{nabla^P} Y = E_a dW^a`` instead.
    """
    bundle = scenario.bundle
    M = bundle.total
    conn = connection or scenario.connection
    d = len(drivers)
    drifts, diffs = [], []
    for c in range(len(M.charts)):
        fields = [_channel_local(ch, scenario, c) for ch in drivers]
        dfields = [_channel_local(ch, scenario, c) for ch in drift]
        if ito_correction and fields:
            dfields.append(ito_correction_local(tuple(fields), conn.local(c)))
        n = M.dim
        drifts.append(_sum_fields(tuple(dfields), n))
        diffs.append(_stack_fields(tuple(fields), n))
    if u0 is None:
        chart0, sec = bundle.section[0]
        u0 = np.asarray(sec(jnp.zeros(bundle.base_dim)))
    M.check_point(u0, chart0)
    dW = noise(seed, N, grid, d) if dW is None else dW
    if dW.shape[2] != d:
        raise ValueError(f"noise has {dW.shape[2]} channels, drivers need {d}")
    return integrate(M, drifts, diffs, u0, grid, dW, chart0, master_seed=seed, label=label or scenario.id)


@lru_cache(maxsize=None)
def _sum_fields(fields, n):
    if not fields:
        zero = jnp.zeros(n)
        return lambda u: zero
    return lambda u: sum(f(u) for f in fields)


@lru_cache(maxsize=None)
def _stack_fields(fields, n):
    if not fields:
        return lambda u: jnp.zeros((n, 0))
    return lambda u: jnp.stack([f(u) for f in fields], axis=1)


def project(ens: PathEnsemble, bundle) -> PathEnsemble:
    """``pi`` applied pathwise (product charts: the first ``m`` coordinates)."""
    base_of = np.asarray(bundle.base_chart_of)
    return PathEnsemble(bundle.base, ens.grid, base_of[ens.charts], ens.X[..., :bundle.base_dim],
                        ens.dW, ens.master_seed, f"pi({ens.label})")


def brownian_development(scenario, x0, grid: TimeGrid, seed: int, N: int, frame0=None,
                         chart0: int = 0, dW: np.ndarray | None = None):
    """Horizontal development on the frame bundle: ``dY = sum_a H_Y(Y e_a) o dW^a``.

    Returns ``(ensemble on P, projected ensemble on M)``.  The initial frame
    must be orthonormal for the base metric (default: the symmetric frame).
    """
    bundle = scenario.bundle
    if bundle.group.name != "GL(2)":
        raise ValueError("brownian_development needs a GL(2) frame-bundle scenario")
    base = bundle.base
    x0 = np.asarray(x0, dtype=float)
    base.check_point(x0, chart0)
    g = base.metric(x0, chart0)
    if frame0 is None:
        frame0 = np.asarray(frame_local(base.charts[chart0].metric, jnp.asarray(x0)))
    frame0 = np.asarray(frame0, dtype=float)
    if abs(np.linalg.det(frame0)) < 1e-12 or np.max(np.abs(frame0.T @ g @ frame0 - np.eye(2))) > 1e-8:
        raise DomainError("initial frame is degenerate or not orthonormal")
    pchart = [c for c in range(len(bundle.total.charts)) if bundle.base_chart_of[c] == chart0][0]
    u0 = np.concatenate([x0, frame0.ravel()])
    fieldspecs = [Driver("field", (a,), fn=_frame_lift_factory(scenario.form, a)) for a in range(2)]
    ens = simulate_bundle_semimartingale(scenario, fieldspecs, grid, seed, N, u0=u0, chart0=pchart, dW=dW,
                                         label=f"development({base.name})")
    return ens, project(ens, bundle)


def _frame_lift_factory(form, a):
    cache = {}

    def factory(chart):
        if chart not in cache:
            H = form.lift_matrix_fn(chart)
            cache[chart] = lambda u: H(u) @ u[2:].reshape(2, 2)[:, a]
        return cache[chart]
    return factory


# ---------------------------------------------------------------------------
# stochastic exponential and splitting
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GroupPath:
    """``V[i, k]``: group-valued paths; ``Z`` is the driving algebra process."""

    grid: TimeGrid
    values: np.ndarray
    Z: RealProcessSample


def batch_exp(G, coeffs: np.ndarray) -> np.ndarray:
    import scipy.linalg

    mats = G.to_matrix(coeffs)
    if G.matrix_size == 1:
        return np.exp(mats)
    flat = mats.reshape((-1,) + mats.shape[-2:])
    out = np.empty_like(flat, dtype=complex if G.is_complex else float)
    for s in range(0, flat.shape[0], EVAL_CHUNK):
        out[s:s + EVAL_CHUNK] = scipy.linalg.expm(flat[s:s + EVAL_CHUNK])
    return out.reshape(mats.shape)


def stochastic_exponential(form, ens: PathEnsemble) -> GroupPath:
    """``V_0 = e``, ``V_{k+1} = V_k exp(dZ_k)`` with ``Z`` the Stratonovich integral of omega."""
    G = form.bundle.group
    Z = strat_integral(form, ens, name="int omega dY")
    steps = batch_exp(G, np.diff(Z.values, axis=1))
    N, K = steps.shape[:2]
    V = np.empty((N, K + 1) + steps.shape[2:], dtype=steps.dtype)
    V[:, 0] = G.identity
    for k in range(K):
        V[:, k + 1] = V[:, k] @ steps[:, k]
    return GroupPath(ens.grid, V, Z)


@dataclass(eq=False)
class SplitResult:
    horizontal: PathEnsemble
    V: GroupPath
    reconstruction_error: float
    horizontality: RealProcessSample

    @property
    def defect(self) -> float:
        """Mean over paths of ``sup_k |int omega dY~|``."""
        vals = self.horizontality.values
        norms = np.sqrt(np.sum(vals.reshape(vals.shape[:2] + (-1,)) ** 2, axis=-1))
        return float(np.mean(np.max(norms, axis=1)))


def arnaudon_paycha_split(form, ens: PathEnsemble) -> SplitResult:
    """``Y = Y~ V`` with ``V = stochastic_exponential(omega, Y)`` and ``Y~_k = Y_k V_k^-1``."""
    bundle = form.bundle
    V = stochastic_exponential(form, ens)
    N, K1 = ens.charts.shape
    flatV = V.values.reshape((N * K1,) + V.values.shape[2:])
    Vinv = np.linalg.inv(flatV)
    c = ens.charts.reshape(-1)
    x = ens.X.reshape(N * K1, -1)
    tc, tx = bundle.act_batch(c, x, Vinv)
    _, rx = bundle.act_batch(tc, tx, flatV, dst=c)
    err = float(np.max(np.abs(rx - x)))
    ytil = PathEnsemble(bundle.total, ens.grid, tc.reshape(N, K1), tx.reshape(N, K1, -1), ens.dW,
                        ens.master_seed, f"horizontal part of {ens.label}")
    hz = strat_integral(form, ytil, name="int omega dY~")
    return SplitResult(ytil, V, err, hz)
