"""Matrix Lie groups with fixed algebra bases.

Every group is an explicit matrix group.  Algebra elements are coefficient
vectors in the documented basis, so structure constants are reproducible:

* ``U(1)``: 1x1 complex matrices, basis ``[[i]]``.
* ``SO(2)``: basis ``[[0, -1], [1, 0]]``.
* ``SO(3)``: ``L_x, L_y, L_z`` (infinitesimal rotations), ``[e1, e2] = e3`` cyclically.
* ``SU(2)``: ``e_a = -(i/2) sigma_a`` with Pauli matrices, ``[e1, e2] = e3`` cyclically.
* ``GL(2)``: elementary matrices ``E11, E12, E21, E22``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from fiberlab.errors import BranchError

_BRANCH_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class LieGroupModel:
    name: str
    basis: np.ndarray
    compact: bool = True

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def matrix_size(self) -> int:
        return self.basis.shape[1]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.basis)

    @property
    def identity(self) -> np.ndarray:
        return np.eye(self.matrix_size, dtype=self.basis.dtype)

    @cached_property
    def _projector(self) -> np.ndarray:
        flat = self.basis.reshape(self.dim, -1)
        stacked = np.concatenate([flat.real, flat.imag], axis=1).T
        return np.linalg.pinv(stacked)

    def to_matrix(self, coeffs) -> np.ndarray:
        return np.tensordot(np.asarray(coeffs, dtype=float), self.basis, axes=([-1], [0]))

    def from_matrix(self, M, check: bool = True) -> np.ndarray:
        """Coefficients of an algebra matrix in the basis (leading axes allowed)."""
        M = np.asarray(M)
        n2 = self.matrix_size ** 2
        flat = M.reshape(M.shape[:-2] + (n2,))
        stacked = np.concatenate([flat.real, flat.imag], axis=-1)
        coeffs = stacked @ self._projector.T
        if check:
            resid = np.max(np.abs(self.to_matrix(coeffs) - M)) if M.size else 0.0
            if resid > 1e-8 * max(1.0, float(np.max(np.abs(M)))):
                raise ValueError(f"matrix is not in the Lie algebra of {self.name} (residual {resid:.2e})")
        return coeffs

    @cached_property
    def structure_constants(self) -> np.ndarray:
        """``c[k, a, b]`` with ``[e_a, e_b] = sum_k c[k, a, b] e_k``."""
        E = self.basis
        comm = np.einsum("aij,bjk->abik", E, E) - np.einsum("bij,ajk->abik", E, E)
        return np.moveaxis(self.from_matrix(comm), -1, 0)

    def bracket(self, B, C) -> np.ndarray:
        return np.einsum("kab,...a,...b->...k", self.structure_constants,
                         np.asarray(B, dtype=float), np.asarray(C, dtype=float))

    def product(self, g, h) -> np.ndarray:
        return np.asarray(g) @ np.asarray(h)

    def inverse(self, g) -> np.ndarray:
        g = np.asarray(g)
        if abs(np.linalg.det(g)) < 1e-14:
            raise ValueError("singular group element")
        return np.linalg.inv(g)

    def exp(self, B) -> np.ndarray:
        return scipy.linalg.expm(self.to_matrix(B))

    def log(self, g) -> np.ndarray:
        g = np.asarray(g)
        lam = np.linalg.eigvals(g)
        if np.any(np.abs(lam) < 1e-14) or np.any(np.abs(np.angle(lam)) > np.pi - _BRANCH_EPS):
            raise BranchError(f"{self.name}: element has an eigenvalue on the closed negative real axis")
        L = scipy.linalg.logm(g)
        if not self.is_complex:
            L = np.real_if_close(L, tol=1e6).real
        return self.from_matrix(L)

    def adjoint_matrix(self, g) -> np.ndarray:
        """Matrix of ``Ad_g`` in the basis: column ``a`` holds ``Ad_g(e_a)``."""
        g = np.asarray(g)
        ginv = self.inverse(g)
        conj = np.einsum("ij,ajk,kl->ail", g, self.basis, ginv)
        return self.from_matrix(conj).T

    def adjoint(self, g, B) -> np.ndarray:
        return self.adjoint_matrix(g) @ np.asarray(B, dtype=float)

    def random_algebra(self, rng: np.random.Generator, scale: float = 1.0, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return scale * rng.standard_normal(shape)

    def random_element(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        return self.exp(self.random_algebra(rng, scale))

    def is_ad_invariant(self, k0, rng: np.random.Generator, samples: int = 20, tol: float = 1e-9) -> bool:
        k0 = np.asarray(k0, dtype=float)
        for _ in range(samples):
            Ad = self.adjoint_matrix(self.random_element(rng))
            if np.max(np.abs(Ad.T @ k0 @ Ad - k0)) > tol * max(1.0, np.max(np.abs(k0))):
                return False
        return True


def adjoint(G: LieGroupModel, g, B) -> np.ndarray:
    return G.adjoint(g, B)


def bracket(G: LieGroupModel, B, C) -> np.ndarray:
    return G.bracket(B, C)


def group_exp(G: LieGroupModel, B) -> np.ndarray:
    return G.exp(B)


def group_log(G: LieGroupModel, g) -> np.ndarray:
    return G.log(g)


def U1() -> LieGroupModel:
    return LieGroupModel("U(1)", np.array([[[1j]]]))


def SO2() -> LieGroupModel:
    return LieGroupModel("SO(2)", np.array([[[0.0, -1.0], [1.0, 0.0]]]))


def SO3() -> LieGroupModel:
    L = np.zeros((3, 3, 3))
    for a, (i, j) in enumerate([(2, 1), (0, 2), (1, 0)]):
        L[a, i, j] = 1.0
        L[a, j, i] = -1.0
    return LieGroupModel("SO(3)", L)


PAULI = np.array([
    [[0, 1], [1, 0]],
    [[0, -1j], [1j, 0]],
    [[1, 0], [0, -1]],
], dtype=complex)


def SU2() -> LieGroupModel:
    return LieGroupModel("SU(2)", -0.5j * PAULI)


def GL2() -> LieGroupModel:
    E = np.zeros((4, 2, 2))
    for a, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        E[a, i, j] = 1.0
    return LieGroupModel("GL(2)", E, compact=False)


GROUPS = {"U(1)": U1, "SO(2)": SO2, "SO(3)": SO3, "SU(2)": SU2, "GL(2)": GL2}
