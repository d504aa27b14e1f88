"""Charted Riemannian and affine geometry.

Points are chart-local coordinate arrays together with the integer index of
the chart they are expressed in.  All chart-local closures (metrics,
Christoffel symbols, transition maps, field components) are written with
``jax.numpy`` so that derivatives of any order are exact up to round-off;
an independent central-difference route is available where the contract
calls for one.

Index conventions
-----------------
``gamma[i, j, k]`` is the Christoffel coefficient with upper index ``i`` and
lower indices ``j, k`` so that ``(nabla_U V)^i = U^j d_j V^i + gamma[i,j,k] U^j V^k``.
Curvature is ``R(u, v)w = nabla_u nabla_v w - nabla_v nabla_u w - nabla_[u,v] w``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from fiberlab.errors import ConditioningError, DomainError

FD_STEP = 1e-5
MIN_METRIC_EIGENVALUE = 1e-10
MAX_CONDITION = 1e12

LocalFn = Callable[[jnp.ndarray], jnp.ndarray]


@lru_cache(maxsize=None)
def jitted(fn):
    return jax.jit(fn)


@lru_cache(maxsize=None)
def batched(fn):
    """``jit(vmap(fn))`` cached by function identity."""
    return jax.jit(jax.vmap(fn))


def as_field(F) -> LocalFn:
    """Promote a constant component array to a constant field."""
    if callable(F):
        return F
    c = jnp.asarray(F, dtype=float)
    return lambda x: c


def solve_small(A, B):
    """``A^-1 B`` by unrolled Gauss-Jordan with partial pivoting.

    Batched LAPACK calls on tiny matrices dominate vmapped kernels on CPU;
    this stays as plain elementwise work.  ``A`` is ``(n, n)``, ``B`` is ``(n, m)``.
    """
    n = A.shape[-1]
    M = jnp.concatenate([A, B], axis=-1)
    for k in range(n):
        sub = M[k:]
        oh = jax.nn.one_hot(jnp.argmax(jnp.abs(sub[:, k])), n - k, dtype=M.dtype)
        prow = oh @ sub
        sub = sub + oh[:, None] * (sub[0] - prow)[None, :]
        sub = sub.at[0].set(prow / prow[k])
        M = jnp.concatenate([M[:k], sub], axis=0)
        f = M[:, k].at[k].set(0.0)
        M = M - f[:, None] * M[k][None, :]
    return M[:, n:]


def inv_small(A):
    n = A.shape[-1]
    if n == 1:
        return 1.0 / A
    if n == 2:
        det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        return jnp.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det
    if n == 3:
        adj = jnp.stack([jnp.cross(A[:, 1], A[:, 2]), jnp.cross(A[:, 2], A[:, 0]), jnp.cross(A[:, 0], A[:, 1])])
        return adj / (A[:, 0] @ adj[0])
    return solve_small(A, jnp.eye(n, dtype=A.dtype))


def spd_inv_sqrt(G):
    """Symmetric square root of ``G^-1`` for SPD ``G``; closed form in 2D."""
    if G.shape[-1] == 2:
        A = inv_small(G)
        s = jnp.sqrt(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])
        t = jnp.sqrt(A[0, 0] + A[1, 1] + 2.0 * s)
        return (A + s * jnp.eye(2)) / t
    w, V = jnp.linalg.eigh(G)
    return (V / jnp.sqrt(w)) @ V.T


# ---------------------------------------------------------------------------
# charts and manifolds
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Chart:
    """One coordinate chart.

    ``handover_radius`` is the coordinate norm beyond which a path should move
    to a better chart; ``domain_radius`` bounds where the chart is usable at
    all.  ``factors`` splits the coordinates of a product chart into blocks,
    each with its own handover radius.
    """

    name: str
    dim: int
    metric: LocalFn | None = None
    christoffel: LocalFn | None = None
    embedding: LocalFn | None = None
    handover_radius: float = np.inf
    domain_radius: float = np.inf
    factors: tuple[tuple[int, int, float, float], ...] = ()

    def score(self, x: np.ndarray) -> np.ndarray:
        """Ratio of the coordinate norm to the handover radius (rows of ``x``)."""
        x = np.atleast_2d(x)
        if self.factors:
            parts = [np.linalg.norm(x[:, a:b], axis=1) / r for a, b, r, _ in self.factors]
            return np.max(parts, axis=0)
        return np.linalg.norm(x, axis=1) / self.handover_radius

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
            return False
        if self.factors:
            return all(np.linalg.norm(x[a:b]) < dom for a, b, _, dom in self.factors)
        return bool(np.linalg.norm(x) < self.domain_radius)


class ChartedManifold:
    """A manifold given by an atlas of overlapping charts.

    Parameters
    ----------
    name : str
    dim : int
    charts : sequence of Chart
    transitions : mapping ``(i, j) -> fn`` taking chart-``i`` coordinates to
        chart-``j`` coordinates on the overlap.
    """

    def __init__(self, name: str, dim: int, charts: Sequence[Chart],
                 transitions: Mapping[tuple[int, int], LocalFn] | None = None):
        self.name = name
        self.dim = dim
        self.charts = tuple(charts)
        self._transitions = dict(transitions or {})
        for c in self.charts:
            if c.dim != dim:
                raise ValueError(f"chart {c.name} has dim {c.dim}, manifold has {dim}")

    def __repr__(self):
        return f"ChartedManifold({self.name!r}, dim={self.dim}, charts={[c.name for c in self.charts]})"

    def index(self, chart) -> int:
        if isinstance(chart, (int, np.integer)):
            return int(chart)
        for i, c in enumerate(self.charts):
            if c.name == chart:
                return i
        raise KeyError(chart)

    @property
    def has_metric(self) -> bool:
        return all(c.metric is not None for c in self.charts)

    def transition(self, i: int, j: int) -> LocalFn:
        if i == j:
            return _identity
        try:
            return self._transitions[(i, j)]
        except KeyError:
            raise DomainError(f"{self.name}: no transition from chart {i} to chart {j}") from None

    def to_chart(self, x, i: int, j: int) -> np.ndarray:
        x = jnp.asarray(x, dtype=float)
        fn = self.transition(i, j)
        return np.asarray(jitted(fn)(x) if x.ndim == 1 else batched(fn)(x))

    def transition_jacobian(self, x, i: int, j: int) -> np.ndarray:
        return np.asarray(jax.jacfwd(self.transition(i, j))(jnp.asarray(x, dtype=float)))

    def check_point(self, x, chart: int = 0) -> jnp.ndarray:
        if not self.charts[chart].contains(x):
            raise DomainError(f"{self.name}: point {np.asarray(x)} outside chart {self.charts[chart].name}")
        return jnp.asarray(x, dtype=float)

    def metric(self, x, chart: int = 0) -> np.ndarray:
        """Metric matrix at ``x``; raises if outside the chart or degenerate."""
        c = self.charts[chart]
        if c.metric is None:
            raise ValueError(f"{self.name} carries no metric")
        x = self.check_point(x, chart)
        g = np.asarray(jitted(c.metric)(x))
        check_metric_matrix(g)
        return g

    def handover(self, ids: np.ndarray, X: np.ndarray):
        """Move rows whose chart score exceeds 1 into the best-scoring chart.

        Vectorised over rows; transitions are evaluated on the full array (a
        fixed shape keeps the jitted kernels from retracing) and selected by mask.
        Returns new ``(ids, X)`` arrays.
        """
        ids = np.asarray(ids).copy()
        X = np.array(X, dtype=float, copy=True)
        if len(self.charts) == 1:
            return ids, X
        new_ids, new_X = ids.copy(), X.copy()
        for i in range(len(self.charts)):
            mask = ids == i
            if not mask.any():
                continue
            score = self.charts[i].score(X)
            mask &= score > 1.0
            if not mask.any():
                continue
            best_score = np.where(mask, score, np.inf)
            for j in range(len(self.charts)):
                if j == i or (i, j) not in self._transitions:
                    continue
                with np.errstate(all="ignore"):
                    y = self.to_chart(X, i, j)
                    s = self.charts[j].score(y)
                better = mask & np.isfinite(s) & (s < best_score)
                best_score = np.where(better, s, best_score)
                new_ids = np.where(better, j, new_ids)
                new_X = np.where(better[:, None], y, new_X)
        return new_ids, new_X

    def check_transitions(self, xs, i: int, j: int) -> float:
        """Max round-trip error ``phi_ji(phi_ij(x)) - x`` over sample rows."""
        y = self.to_chart(xs, i, j)
        back = self.to_chart(y, j, i)
        return float(np.max(np.abs(back - np.asarray(xs))))

    @staticmethod
    def product(name: str, *factors: "ChartedManifold") -> "ChartedManifold":
        """Product atlas; metrics are block diagonal when every factor has one."""
        dims = [f.dim for f in factors]
        offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        combos = list(np.ndindex(*[len(f.charts) for f in factors]))
        charts = []
        for combo in combos:
            cs = [f.charts[k] for f, k in zip(factors, combo)]
            metric = None
            if all(c.metric is not None for c in cs):
                metric = _block_metric([c.metric for c in cs], offsets)
            blocks = tuple((int(offsets[n]), int(offsets[n + 1]), c.handover_radius, c.domain_radius)
                           for n, c in enumerate(cs))
            charts.append(Chart(
                name="x".join(c.name for c in cs),
                dim=int(offsets[-1]),
                metric=metric,
                handover_radius=1.0,
                factors=blocks,
            ))
        transitions = {}
        for a, ca in enumerate(combos):
            for b, cb in enumerate(combos):
                if a == b:
                    continue
                try:
                    fns = [f.transition(i, j) for f, i, j in zip(factors, ca, cb)]
                except DomainError:
                    continue
                transitions[(a, b)] = _block_map(fns, offsets)
        return ChartedManifold(name, int(offsets[-1]), charts, transitions)


def _identity(x):
    return x


def _block_metric(metrics, offsets):
    def metric(x):
        n = int(offsets[-1])
        g = jnp.zeros((n, n))
        for m, a, b in zip(metrics, offsets[:-1], offsets[1:]):
            g = g.at[a:b, a:b].set(m(x[a:b]))
        return g
    return metric


def _block_map(fns, offsets):
    def fn(x):
        return jnp.concatenate([f(x[a:b]) for f, a, b in zip(fns, offsets[:-1], offsets[1:])])
    return fn


def check_metric_matrix(g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise ConditioningError("metric has non-finite entries")
    if np.max(np.abs(g - g.T)) > 1e-12 * max(1.0, np.max(np.abs(g))):
        raise ConditioningError("metric is not symmetric")
    w = np.linalg.eigvalsh(g)
    if w[0] <= MIN_METRIC_EIGENVALUE:
        raise ConditioningError(f"metric not positive definite (min eigenvalue {w[0]:.3e})")
    if w[-1] / w[0] > MAX_CONDITION:
        raise ConditioningError(f"metric condition number {w[-1] / w[0]:.3e} too large")


# ---------------------------------------------------------------------------
# built-in manifolds
# ---------------------------------------------------------------------------


def euclidean(dim: int, name: str | None = None, handover_radius: float = np.inf) -> ChartedManifold:
    eye = jnp.eye(dim)
    zero = jnp.zeros((dim, dim, dim))
    chart = Chart(
        name="global", dim=dim,
        metric=lambda x: eye,
        christoffel=lambda x: zero,
        embedding=_identity,
        handover_radius=handover_radius,
    )
    return ChartedManifold(name or f"R{dim}", dim, [chart])


def _stereo_embedding(sign: float, radius: float):
    def embed(x):
        r2 = x @ x
        return radius * jnp.concatenate([2.0 * x, jnp.array([sign * (1.0 - r2)])]) / (1.0 + r2)
    return embed


def _conformal_metric(radius: float):
    def metric(x):
        lam = 2.0 * radius / (1.0 + x @ x)
        return lam ** 2 * jnp.eye(2)
    return metric


def _conformal_christoffel(x):
    # g = exp(2 phi) delta with phi = log(2R) - log(1 + |x|^2)
    dphi = -2.0 * x / (1.0 + x @ x)
    eye = jnp.eye(2)
    return (jnp.einsum("ij,k->ijk", eye, dphi) + jnp.einsum("ik,j->ijk", eye, dphi)
            - jnp.einsum("jk,i->ijk", eye, dphi))


def _inversion(x):
    return x / (x @ x)


def sphere2(radius: float = 1.0, handover_radius: float = 2.0) -> ChartedManifold:
    """Round 2-sphere with two stereographic charts.

    Chart ``n`` sends the origin to the north pole, chart ``s`` to the south
    pole; the transition between them is the inversion ``x -> x / |x|^2``.
    """
    charts = [
        Chart("n", 2, _conformal_metric(radius), _conformal_christoffel,
              _stereo_embedding(1.0, radius), handover_radius, domain_radius=1e6),
        Chart("s", 2, _conformal_metric(radius), _conformal_christoffel,
              _stereo_embedding(-1.0, radius), handover_radius, domain_radius=1e6),
    ]
    return ChartedManifold(f"S2(r={radius:g})", 2, charts, {(0, 1): _inversion, (1, 0): _inversion})


# ---------------------------------------------------------------------------
# connections
# ---------------------------------------------------------------------------


def levi_civita_closure(metric: LocalFn) -> LocalFn:
    """Christoffel closure of the Levi-Civita connection of ``metric``."""
    dmetric = jax.jacfwd(metric)

    def gamma(x):
        g = metric(x)
        dg = dmetric(x)  # dg[l, k, j] = d_j g_lk
        lowered = 0.5 * (jnp.transpose(dg, (0, 2, 1)) + dg - jnp.transpose(dg, (2, 0, 1)))
        return jnp.sum(inv_small(g)[:, :, None, None] * lowered[None], axis=1)

    return gamma


def _fd_christoffel(metric: LocalFn, x: np.ndarray, step: float) -> np.ndarray:
    n = x.size
    h = step * max(1.0, float(np.max(np.abs(x))))
    g = np.asarray(metric(jnp.asarray(x)))
    dg = np.empty((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        dg[:, :, k] = (np.asarray(metric(jnp.asarray(x + e))) - np.asarray(metric(jnp.asarray(x - e)))) / (2 * h)
    lowered = 0.5 * (np.transpose(dg, (0, 2, 1)) + dg - np.transpose(dg, (2, 0, 1)))
    return np.einsum("il,ljk->ijk", np.linalg.inv(g), lowered)


def christoffel_from_metric(M: ChartedManifold, x, chart: int = 0, method: str = "autodiff") -> np.ndarray:
    """Levi-Civita Christoffel symbols ``gamma[i, j, k]`` of ``M`` at ``x``.

    ``method`` is ``"analytic"`` (the chart's closed form), ``"autodiff"``
    (exact derivatives of the metric closure) or ``"fd"`` (central
    differences with relative step ``FD_STEP``).
    """
    g = M.metric(x, chart)  # validates the domain and conditioning
    del g
    c = M.charts[chart]
    x = np.asarray(x, dtype=float)
    if method == "analytic":
        if c.christoffel is None:
            raise ValueError(f"chart {c.name} has no analytic Christoffel closure")
        return np.asarray(jitted(c.christoffel)(jnp.asarray(x)))
    if method == "autodiff":
        return np.asarray(jitted(_lc_cached(c.metric))(jnp.asarray(x)))
    if method == "fd":
        return _fd_christoffel(c.metric, x, FD_STEP)
    raise ValueError(f"unknown method {method!r}")


@lru_cache(maxsize=None)
def _lc_cached(metric):
    return levi_civita_closure(metric)


class AffineConnectionModel:
    """Christoffel-coefficient field on every chart of a manifold."""

    def __init__(self, manifold: ChartedManifold, christoffel: Sequence[LocalFn], name: str = "",
                 torsion_free: bool = True):
        if len(christoffel) != len(manifold.charts):
            raise ValueError("one Christoffel closure per chart is required")
        self.manifold = manifold
        self.christoffel = tuple(christoffel)
        self.name = name or f"connection on {manifold.name}"
        self.torsion_free = torsion_free

    def __repr__(self):
        return f"AffineConnectionModel({self.name!r})"

    def local(self, chart: int = 0) -> LocalFn:
        return self.christoffel[chart]

    def gamma(self, x, chart: int = 0) -> np.ndarray:
        x = self.manifold.check_point(x, chart)
        return np.asarray(jitted(self.christoffel[chart])(x))

    def torsion(self, x, chart: int = 0) -> np.ndarray:
        G = self.gamma(x, chart)
        return G - np.transpose(G, (0, 2, 1))

    @classmethod
    def levi_civita(cls, M: ChartedManifold, prefer_analytic: bool = True) -> "AffineConnectionModel":
        fns = []
        for c in M.charts:
            if c.metric is None:
                raise ValueError(f"{M.name} has no metric on chart {c.name}")
            fns.append(c.christoffel if (prefer_analytic and c.christoffel is not None)
                       else _lc_cached(c.metric))
        return cls(M, fns, name=f"Levi-Civita({M.name})")

    @classmethod
    def flat(cls, M: ChartedManifold) -> "AffineConnectionModel":
        zero = jnp.zeros((M.dim, M.dim, M.dim))
        return cls(M, [lambda x: zero] * len(M.charts), name=f"flat({M.name})")

    def perturbed(self, delta: Sequence[LocalFn], name: str | None = None) -> "AffineConnectionModel":
        """Return ``gamma + delta`` chart by chart (``delta`` must be symmetric to stay torsion free)."""
        fns = [(lambda g, d: (lambda x: g(x) + d(x)))(g, d) for g, d in zip(self.christoffel, delta)]
        return AffineConnectionModel(self.manifold, fns, name or f"{self.name}+perturbation",
                                     torsion_free=self.torsion_free)


def gamma_contract(G, u, v):
    """``G^i_jk u^j v^k`` written elementwise (fuses better than einsum under vmap)."""
    return jnp.sum(G * u[None, :, None] * v[None, None, :], axis=(1, 2))


def covd_local(gamma: LocalFn, Vf: LocalFn, x, u):
    """``(nabla_u V)(x)`` for a field closure ``Vf``; traceable."""
    _, dV = jax.jvp(Vf, (x,), (u,))
    return dV + gamma_contract(gamma(x), u, Vf(x))


def covariant_derivative(C: AffineConnectionModel, x, U, V, chart: int = 0) -> np.ndarray:
    """``(nabla_U V)(x)``; ``U`` and ``V`` are component arrays (constant
    coordinate fields) or closures ``x -> components`` in chart ``chart``."""
    x = C.manifold.check_point(x, chart)
    u = as_field(U)(x)
    return np.asarray(covd_local(C.local(chart), as_field(V), x, u))


def lie_bracket(U, V, x) -> np.ndarray:
    Uf, Vf = as_field(U), as_field(V)
    x = jnp.asarray(x, dtype=float)
    return np.asarray(jax.jvp(Vf, (x,), (Uf(x),))[1] - jax.jvp(Uf, (x,), (Vf(x),))[1])


def curvature_local(gamma: LocalFn, x, u, v, w):
    f_vw = lambda y: gamma_contract(gamma(y), v, w)
    f_uw = lambda y: gamma_contract(gamma(y), u, w)
    return covd_local(gamma, f_vw, x, u) - covd_local(gamma, f_uw, x, v)


def curvature_tensor(C: AffineConnectionModel, x, u, v, w, chart: int = 0) -> np.ndarray:
    """``R(u, v)w`` using coordinate-constant extensions (so ``[u, v] = 0``)."""
    x = C.manifold.check_point(x, chart)
    args = [jnp.asarray(a, dtype=float) for a in (u, v, w)]
    return np.asarray(curvature_local(C.local(chart), x, *args))


def curvature_endomorphisms_local(gamma: LocalFn, x):
    """Array ``R[i, l, a, b]`` with ``R(e_a, e_b) e_l = R[:, l, a, b]``."""
    dG = jax.jacfwd(gamma)(x)  # dG[i, j, k, a] = d_a gamma^i_jk
    G = gamma(x)
    # R(e_a, e_b) e_l = d_a G^i_bl - d_b G^i_al + G^i_am G^m_bl - G^i_bm G^m_al
    term = jnp.einsum("ibla->ilab", dG) + jnp.einsum("iam,mbl->ilab", G, G)
    return term - jnp.swapaxes(term, 2, 3)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


class CovectorField:
    """1-form given by per-chart component closures ``x -> alpha_i(x)``.

    Components may carry leading axes (``(k, d)``), e.g. for algebra-valued forms.
    """

    def __init__(self, manifold: ChartedManifold, components: Sequence[LocalFn], name: str = ""):
        if len(components) != len(manifold.charts):
            raise ValueError("one component closure per chart is required")
        self.manifold = manifold
        self.components = tuple(components)
        self.name = name

    def __call__(self, x, chart: int = 0) -> np.ndarray:
        return np.asarray(jitted(self.components[chart])(jnp.asarray(x, dtype=float)))

    def local(self, chart: int = 0) -> LocalFn:
        return self.components[chart]

    @classmethod
    def constant(cls, M: ChartedManifold, coeffs, name: str = "") -> "CovectorField":
        """Same components in every chart (only tensorial for single-chart manifolds)."""
        c = jnp.asarray(coeffs, dtype=float)
        return cls(M, [lambda x: c] * len(M.charts), name)

    @classmethod
    def differential(cls, M: ChartedManifold, f: Sequence[LocalFn], name: str = "") -> "CovectorField":
        return cls(M, [jax.grad(fc) for fc in f], name or "df")

    @classmethod
    def from_ambient(cls, M: ChartedManifold, a: LocalFn, name: str = "") -> "CovectorField":
        """Pull back an ambient 1-form ``a(y) . dy`` through each chart's embedding."""
        def make(embed):
            return lambda x: a(embed(x)) @ jax.jacfwd(embed)(x)
        return cls(M, [make(c.embedding) for c in M.charts], name)

    def transform_residual(self, x, i: int, j: int) -> float:
        """Tensoriality across an overlap: ``alpha^(i) = J^T alpha^(j)``."""
        x = jnp.asarray(x, dtype=float)
        J = self.manifold.transition_jacobian(x, i, j)
        y = self.manifold.to_chart(x, i, j)
        return float(np.max(np.abs(self(x, i) - self(y, j) @ J)))


class BilinearField:
    """Bilinear form on tangent vectors, ``b(u, v) = b_ij u^i v^j`` per chart."""

    def __init__(self, manifold: ChartedManifold, components: Sequence[LocalFn], name: str = ""):
        if len(components) != len(manifold.charts):
            raise ValueError("one component closure per chart is required")
        self.manifold = manifold
        self.components = tuple(components)
        self.name = name

    def __call__(self, x, chart: int = 0) -> np.ndarray:
        return np.asarray(jitted(self.components[chart])(jnp.asarray(x, dtype=float)))

    def local(self, chart: int = 0) -> LocalFn:
        return self.components[chart]

    @classmethod
    def metric(cls, M: ChartedManifold) -> "BilinearField":
        return cls(M, [c.metric for c in M.charts], "g")

    @classmethod
    def from_ambient(cls, M: ChartedManifold, b: LocalFn, name: str = "") -> "BilinearField":
        def make(embed):
            def comp(x):
                J = jax.jacfwd(embed)(x)
                return J.T @ b(embed(x)) @ J
            return comp
        return cls(M, [make(c.embedding) for c in M.charts], name)

    def transform_residual(self, x, i: int, j: int) -> float:
        x = jnp.asarray(x, dtype=float)
        J = self.manifold.transition_jacobian(x, i, j)
        y = self.manifold.to_chart(x, i, j)
        return float(np.max(np.abs(self(x, i) - J.T @ self(y, j) @ J)))


def covector_hessian(alpha: CovectorField, C: AffineConnectionModel) -> BilinearField:
    """``nabla alpha`` as the bilinear field ``(u, v) -> (nabla_u alpha)(v)``."""
    def make(a, gamma):
        def comp(x):
            da = jax.jacfwd(a)(x)  # da[j, i] = d_i alpha_j
            return da.T - jnp.einsum("k,kij->ij", a(x), gamma(x))
        return comp
    return BilinearField(alpha.manifold, [make(a, g) for a, g in zip(alpha.components, C.christoffel)],
                         f"nabla({alpha.name})")


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------


class SmoothMapModel:
    """Smooth map between charted manifolds.

    ``local`` maps a source chart index to ``(target chart index, fn)``.
    Optional ``differential``/``second`` closures override autodiff, e.g. for
    maps only known through an ODE solution.
    """

    def __init__(self, source: ChartedManifold, target: ChartedManifold,
                 local: Mapping[int, tuple[int, LocalFn]],
                 differential: Mapping[int, LocalFn] | None = None,
                 second: Mapping[int, LocalFn] | None = None, name: str = ""):
        self.source = source
        self.target = target
        self.local = dict(local)
        self._d = dict(differential or {})
        self._d2 = dict(second or {})
        self.name = name

    def __repr__(self):
        return f"SmoothMapModel({self.name!r}: {self.source.name} -> {self.target.name})"

    def target_chart(self, chart: int = 0) -> int:
        return self.local[chart][0]

    def fn(self, chart: int = 0) -> LocalFn:
        return self.local[chart][1]

    def d_fn(self, chart: int = 0) -> LocalFn:
        return self._d.get(chart) or jax.jacfwd(self.fn(chart))

    def d2_fn(self, chart: int = 0) -> LocalFn:
        if chart in self._d2:
            return self._d2[chart]
        return jax.jacfwd(self.d_fn(chart))

    def value(self, x, chart: int = 0) -> np.ndarray:
        return np.asarray(self.fn(chart)(jnp.asarray(x, dtype=float)))

    def differential(self, x, chart: int = 0) -> np.ndarray:
        return np.asarray(self.d_fn(chart)(jnp.asarray(x, dtype=float)))

    def differential_fd(self, x, chart: int = 0, step: float = FD_STEP) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = step * max(1.0, float(np.max(np.abs(x))))
        f = self.fn(chart)
        cols = []
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            cols.append((np.asarray(f(jnp.asarray(x + e))) - np.asarray(f(jnp.asarray(x - e)))) / (2 * h))
        return np.stack(cols, axis=-1)

    def push(self, x, u, chart: int = 0) -> np.ndarray:
        return self.differential(x, chart) @ np.asarray(u, dtype=float)

    def compose(self, other: "SmoothMapModel", name: str = "") -> "SmoothMapModel":
        """``other o self`` (no derivative overrides are carried over)."""
        local = {}
        for c, (t, f) in self.local.items():
            t2, g = other.local[t]
            local[c] = (t2, (lambda f, g: (lambda x: g(f(x))))(f, g))
        out = SmoothMapModel(self.source, other.target, local, name=name or f"{other.name}o{self.name}")
        if self._d:
            # chain rule keeps ODE-backed maps differentiable
            for c, (t, f) in self.local.items():
                g = other.local[t][1]
                df, d2f = self.d_fn(c), self.d2_fn(c)
                dg, d2g = jax.jacfwd(g), jax.jacfwd(jax.jacfwd(g))

                def d(x, f=f, df=df, dg=dg):
                    return dg(f(x)) @ df(x)

                def d2(x, f=f, df=df, d2f=d2f, dg=dg, d2g=d2g):
                    y, J = f(x), df(x)
                    return (jnp.einsum("abc,bi,cj->aij", d2g(y), J, J)
                            + jnp.einsum("ab,bij->aij", dg(y), d2f(x)))
                out._d[c] = d
                out._d2[c] = d2
        return out


def sff_local(F_fn, dF_fn, d2F_fn, gamma_src, gamma_tgt, x, u, v):
    J = dF_fn(x)
    return (jnp.einsum("aij,i,j->a", d2F_fn(x), u, v)
            - J @ jnp.einsum("kij,i,j->k", gamma_src(x), u, v)
            + jnp.einsum("abc,b,c->a", gamma_tgt(F_fn(x)), J @ u, J @ v))


def second_fundamental_form(F: SmoothMapModel, src: AffineConnectionModel, tgt: AffineConnectionModel,
                            x, u, v, chart: int = 0) -> np.ndarray:
    """``beta_F(u, v) = nabla^tgt_{F*u}(F*V) - F*(nabla^src_u V)`` in target-chart components."""
    x = F.source.check_point(x, chart)
    t = F.target_chart(chart)
    return np.asarray(sff_local(F.fn(chart), F.d_fn(chart), F.d2_fn(chart), src.local(chart),
                                tgt.local(t), x, jnp.asarray(u, dtype=float), jnp.asarray(v, dtype=float)))


def frame_local(metric: LocalFn, x):
    """Columns form a g-orthonormal basis: the symmetric square root of ``g^-1``.

    The symmetric root is unique, so eigenvector sign and ordering choices in
    the eigendecomposition do not affect the result.
    """
    return spd_inv_sqrt(metric(x))


def orthonormal_frame(M: ChartedManifold, x, chart: int = 0) -> np.ndarray:
    M.metric(x, chart)
    return np.asarray(frame_local(M.charts[chart].metric, jnp.asarray(x, dtype=float)))


def tension_local(F_fn, dF_fn, d2F_fn, metric_src, gamma_src, gamma_tgt, x):
    E = frame_local(metric_src, x)
    return jnp.sum(jax.vmap(lambda e: sff_local(F_fn, dF_fn, d2F_fn, gamma_src, gamma_tgt, x, e, e),
                            in_axes=1)(E), axis=0)


def tension_field(F: SmoothMapModel, tgt: AffineConnectionModel, x, chart: int = 0) -> np.ndarray:
    """Trace of ``beta_F`` over a source-orthonormal frame (Levi-Civita on the source)."""
    F.source.metric(x, chart)
    src = AffineConnectionModel.levi_civita(F.source)
    t = F.target_chart(chart)
    return np.asarray(tension_local(F.fn(chart), F.d_fn(chart), F.d2_fn(chart),
                                    F.source.charts[chart].metric, src.local(chart), tgt.local(t),
                                    jnp.asarray(x, dtype=float)))


def codifferential_local(alpha_fn, metric, gamma, x):
    """``d*alpha = -g^ij (d_i alpha_j - gamma^k_ij alpha_k)``; leading axes of alpha pass through."""
    ginv = inv_small(metric(x))
    da = jax.jacfwd(alpha_fn)(x)  # [..., j, i] = d_i alpha_j
    nabla = jnp.swapaxes(da, -1, -2) - jnp.einsum("...k,kij->...ij", alpha_fn(x), gamma(x))
    return -jnp.einsum("ij,...ij->...", ginv, nabla)


def codifferential(alpha: CovectorField, x, chart: int = 0) -> np.ndarray:
    M = alpha.manifold
    M.metric(x, chart)
    lc = AffineConnectionModel.levi_civita(M)
    return np.asarray(codifferential_local(alpha.local(chart), M.charts[chart].metric, lc.local(chart),
                                           jnp.asarray(x, dtype=float)))


def sharp(M: ChartedManifold, x, covector, chart: int = 0) -> np.ndarray:
    """Index raising: the vector ``v`` with ``g(v, w) = covector(w)`` for all ``w``."""
    g = M.metric(x, chart)
    return np.linalg.solve(g, np.asarray(covector, dtype=float).T).T
