"""Uniform categorical reference process.

Each dimension follows the same homogeneous chain: keep the category with
probability ``1 - alpha``, otherwise jump uniformly to one of the other
``S - 1`` categories.  Dimensions evolve independently.  The single-step
matrix is ``Q = beta I + (1 - beta) U`` with ``U`` the all-``1/S`` matrix and
``beta = 1 - alpha S / (S - 1)``; since ``U`` is idempotent and commutes with
``I``, ``Q^k = beta^k I + (1 - beta^k) U``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import InfeasibleBridgeError, StateSpace, TimeGrid, ValidationError, categorical_sample


@dataclass(frozen=True)
class UniformKernel:
    space: StateSpace
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def S(self) -> int:
        return self.space.S

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha * self.S / (self.S - 1)

    def step_matrix(self) -> np.ndarray:
        S = self.S
        Q = np.full((S, S), self.alpha / (S - 1))
        np.fill_diagonal(Q, 1.0 - self.alpha)
        return Q

    def step_probs(self, x_prev: int) -> np.ndarray:
        if not 0 <= x_prev < self.S:
            raise ValidationError(f"category {x_prev} outside [0, {self.S - 1}]")
        return self.step_matrix()[x_prev].copy()

    def k_step_matrix(self, k: int) -> np.ndarray:
        if k < 0:
            raise ValidationError("k must be non-negative")
        S = self.S
        if k == 0:
            return np.eye(S)
        bk = self.beta**k
        return np.full((S, S), (1.0 - bk) / S) + bk * np.eye(S)


def _check_index(grid: TimeGrid, n: int, lo: int):
    if not lo <= n <= grid.N + 1:
        raise ValidationError(f"time index {n} outside [{lo}, {grid.N + 1}]")


def _normalize(unnorm: np.ndarray) -> np.ndarray:
    z = unnorm.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise InfeasibleBridgeError("reference process cannot reach the endpoint (zero bridge mass)")
    return unnorm / z


def bridge_probs(kernel: UniformKernel, grid: TimeGrid, n: int, x0, x1) -> np.ndarray:
    """Per-dimension law of ``x_{t_n}`` given both endpoints, shape ``(..., D, S)``."""
    _check_index(grid, n, 0)
    x0 = kernel.space.validate(x0)
    x1 = kernel.space.validate(x1)
    left = kernel.k_step_matrix(n)[x0]  # (..., D, S): Q^n[x0, j]
    right = kernel.k_step_matrix(grid.N + 1 - n).T[x1]  # Q^{N+1-n}[j, x1]
    return _normalize(left * right)


def posterior_probs(kernel: UniformKernel, grid: TimeGrid, n: int, x_prev, x1) -> np.ndarray:
    """Per-dimension law of ``x_{t_n}`` given ``x_{t_{n-1}}`` and ``x_1``."""
    _check_index(grid, n, 1)
    x_prev = kernel.space.validate(x_prev)
    x1 = kernel.space.validate(x1)
    step = kernel.step_matrix()[x_prev]
    right = kernel.k_step_matrix(grid.N + 1 - n).T[x1]
    return _normalize(step * right)


def sample_bridge(kernel: UniformKernel, grid: TimeGrid, n: int, x0, x1, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x_{t_n}`` from the bridge; one uniform per dimension (and per leading index)."""
    p = bridge_probs(kernel, grid, n, x0, x1)
    return np.asarray(categorical_sample(p, rng, validate=False), dtype=np.int64)


class BridgeTables:
    """Precomputed bridge and posterior tables for vectorized lookups.

    ``bridge[n, a, b, j] = q(x_{t_n} = j | x_0 = a, x_1 = b)`` for ``n`` in
    ``0..N+1`` and ``posterior[n, a, b, j] = q(x_{t_n} = j | x_{t_{n-1}} = a,
    x_1 = b)`` for ``n`` in ``1..N+1`` (row ``n = 0`` is NaN).  Infeasible
    entries are NaN; the gather methods raise on them.
    """

    def __init__(self, kernel: UniformKernel, grid: TimeGrid):
        self.kernel = kernel
        self.grid = grid

    @cached_property
    def bridge(self) -> np.ndarray:
        N1 = self.grid.N + 1
        powers = [self.kernel.k_step_matrix(k) for k in range(N1 + 1)]
        out = np.empty((N1 + 1,) + (self.kernel.S,) * 3)
        for n in range(N1 + 1):
            unnorm = powers[n][:, None, :] * powers[N1 - n].T[None, :, :]
            out[n] = _safe_normalize(unnorm)
        return out

    @cached_property
    def posterior(self) -> np.ndarray:
        N1 = self.grid.N + 1
        Q = self.kernel.step_matrix()
        out = np.full((N1 + 1,) + (self.kernel.S,) * 3, np.nan)
        for n in range(1, N1 + 1):
            unnorm = Q[:, None, :] * self.kernel.k_step_matrix(N1 - n).T[None, :, :]
            out[n] = _safe_normalize(unnorm)
        return out

    def bridge_rows(self, n, x0, x1) -> np.ndarray:
        """Gather ``(B, D, S)`` bridge rows for per-item indices ``n`` of shape ``(B,)``."""
        rows = self.bridge[np.asarray(n)[:, None], x0, x1]
        if np.isnan(rows).any():
            raise InfeasibleBridgeError("reference process cannot connect x0 and x1")
        return rows

    def posterior_rows(self, n, x_prev, x1) -> np.ndarray:
        rows = self.posterior[np.asarray(n)[:, None], x_prev, x1]
        if np.isnan(rows).any():
            raise InfeasibleBridgeError("reference process cannot reach x1 from x_prev")
        return rows

    def posterior_given_prev(self, n, x_prev) -> np.ndarray:
        """``(B, D, S_endpoint, S_next)`` posteriors for every candidate endpoint."""
        return self.posterior[np.asarray(n)[:, None], x_prev]

    def sample_bridge(self, n, x0, x1, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(categorical_sample(self.bridge_rows(n, x0, x1), rng, validate=False), dtype=np.int64)


def _safe_normalize(unnorm: np.ndarray) -> np.ndarray:
    z = unnorm.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(z > 0, unnorm / np.where(z > 0, z, 1.0), np.nan)
