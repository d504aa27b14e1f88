"""Per-path counter-based noise streams.

Path ``i`` of an ensemble with master seed ``s`` draws from
``Philox(SeedSequence(s, spawn_key=(i,)))``; Gaussians come from the inverse
normal CDF of its uniforms, so the values do not depend on how many paths
are drawn or in which order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri


def path_generator(master_seed: int, path_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(path_id,))))


def path_uniforms(master_seed: int, path_id: int, shape) -> np.ndarray:
    """Uniforms in the open interval (0, 1)."""
    u = path_generator(master_seed, path_id).random(shape)
    return u + 2.0 ** -54


def path_normals(master_seed: int, path_id: int, shape) -> np.ndarray:
    return ndtri(path_uniforms(master_seed, path_id, shape))


def brownian_increments(master_seed: int, n_paths: int, n_steps: int, dim: int, dt: float,
                        first_path: int = 0) -> np.ndarray:
    """Array ``(n_paths, n_steps, dim)`` of ``N(0, dt)`` increments."""
    out = np.empty((n_paths, n_steps, dim))
    scale = np.sqrt(dt)
    for i in range(n_paths):
        out[i] = scale * path_normals(master_seed, first_path + i, (n_steps, dim))
    return out


def coarsen(dW: np.ndarray, factor: int = 2) -> np.ndarray:
    """Sum consecutive blocks of increments (same Brownian path on a coarser grid)."""
    N, K, d = dW.shape
    if K % factor:
        raise ValueError(f"{K} steps are not divisible by {factor}")
    return dW.reshape(N, K // factor, factor, d).sum(axis=2)
