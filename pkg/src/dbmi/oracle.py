"""Exact tabular computations for small state spaces.

Everything here works on the full product space ``X = S^D`` with states
indexed by :meth:`StateSpace.encode`.  Time indices follow the grid
``t_0 = 0 < t_1 < ... < t_{N+1} = 1``; a *transition at step n* maps
``x_{t_{n-1}}`` to ``x_{t_n}`` for ``n`` in ``1..N+1``.

The conditioned reciprocal process is Markov with transitions

    r(x_{t_n} = z | x_{t_{n-1}} = y, x0) = Q[y, z] h_n(x0, z) / h_{n-1}(x0, y),
    h_n(x0, y) = sum_{x1} pi(x1 | x0) Q^{N+1-n}[y, x1] / Q^{N+1}[x0, x1],

which is the mixture of reference posteriors under the endpoint law
``pi(x1 | x0, x_{t_{n-1}})``.  :func:`exact_transition` evaluates that mixture
directly by Bayes' rule; :func:`transition_tensor` uses the h-function form.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .core import (
    Coupling,
    InfeasibleBridgeError,
    StateSpace,
    TimeGrid,
    ValidationError,
    kl_rows,
)
from .refproc import UniformKernel

MAX_STATES = 4096
MAX_PATHS = 2**24


class OracleSizeError(ValidationError):
    """Requested tabulation exceeds the oracle's size caps."""


@dataclass
class JointPMF:
    """Joint table ``table[encode(x0), encode(x1)] = pi(x0, x1)``."""

    space: StateSpace
    table: np.ndarray

    def __post_init__(self):
        X = self.space.n_states
        if X > MAX_STATES:
            raise OracleSizeError(f"S^D = {X} exceeds the tabulation cap {MAX_STATES}")
        t = np.asarray(self.table, dtype=np.float64)
        if t.shape != (X, X):
            raise ValidationError(f"joint table must be {X}x{X}, got {t.shape}")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValidationError("joint table must be finite and non-negative")
        total = t.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"joint table sums to {total}, expected 1")
        self.table = t / total

    @property
    def marginal0(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def marginal1(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def product(self) -> "JointPMF":
        return JointPMF(self.space, np.outer(self.marginal0, self.marginal1))

    @classmethod
    def from_factors(cls, factors) -> "JointPMF":
        """Product of per-dimension ``S x S`` joints, dimension 0 most significant."""
        factors = [np.asarray(f, dtype=np.float64) for f in factors]
        S = factors[0].shape[0]
        return cls(StateSpace(S, len(factors)), reduce(np.kron, factors))

    @classmethod
    def random(cls, space: StateSpace, rng: np.random.Generator, concentration: float = 1.0) -> "JointPMF":
        X = space.n_states
        return cls(space, rng.dirichlet(np.full(X * X, concentration)).reshape(X, X))

    def sample(self, count: int, rng: np.random.Generator):
        """``count`` i.i.d. pairs as ``(x0, x1)`` arrays of shape ``(count, D)``."""
        X = self.space.n_states
        flat = rng.choice(X * X, size=count, p=self.table.ravel())
        return self.space.decode(flat // X), self.space.decode(flat % X)


@dataclass(frozen=True)
class ReciprocalSpec:
    joint: JointPMF
    kernel: UniformKernel
    grid: TimeGrid
    coupling: Coupling = Coupling.JOINT

    def __post_init__(self):
        if self.kernel.space != self.joint.space:
            raise ValidationError("kernel and joint live on different state spaces")

    def with_coupling(self, coupling: Coupling) -> "ReciprocalSpec":
        return ReciprocalSpec(self.joint, self.kernel, self.grid, Coupling(coupling))

    @property
    def space(self) -> StateSpace:
        return self.joint.space

    def endpoint_table(self) -> np.ndarray:
        if self.coupling == Coupling.JOINT:
            return self.joint.table
        return np.outer(self.joint.marginal0, self.joint.marginal1)


def full_step_matrix(kernel: UniformKernel, k: int = 1) -> np.ndarray:
    """``k``-step reference matrix on the product space (Kronecker power)."""
    Q1 = kernel.k_step_matrix(k)
    return reduce(np.kron, [Q1] * kernel.space.D)


def _endpoint_weights(spec: ReciprocalSpec) -> np.ndarray:
    """``g[x0, x1] = c(x1 | x0) / Q^{N+1}[x0, x1]`` (zero on rows with no x0 mass)."""
    C = spec.endpoint_table()
    m0 = C.sum(axis=1, keepdims=True)
    QN = full_step_matrix(spec.kernel, spec.grid.N + 1)
    if np.any((C > 0) & (QN <= 0)):
        raise InfeasibleBridgeError("coupling puts mass on endpoints the reference process cannot connect")
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(C > 0, C / np.where(m0 > 0, m0, 1.0) / np.where(QN > 0, QN, 1.0), 0.0)
    return g


def h_functions(spec: ReciprocalSpec) -> np.ndarray:
    """``H[n, x0, y]`` for ``n = 0..N+1``; ``H[n, x0, y] = 0`` iff ``y`` cannot lead to any endpoint."""
    g = _endpoint_weights(spec)
    N1 = spec.grid.N + 1
    H = np.empty((N1 + 1,) + g.shape)
    for n in range(N1 + 1):
        H[n] = g @ full_step_matrix(spec.kernel, N1 - n).T
    return H


def transition_tensor(spec: ReciprocalSpec, n: int, H: np.ndarray | None = None) -> np.ndarray:
    """``T[x0, y, z] = r(x_{t_n} = z | x_{t_{n-1}} = y, x0)``; rows with zero mass are NaN."""
    if not 1 <= n <= spec.grid.N + 1:
        raise ValidationError(f"transition step {n} outside [1, {spec.grid.N + 1}]")
    if H is None:
        H = h_functions(spec)
    Q = full_step_matrix(spec.kernel)
    num = Q[None, :, :] * H[n][:, None, :]
    den = H[n - 1][:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def exact_transition(spec: ReciprocalSpec, n: int, x_prev, x0) -> np.ndarray:
    """Exact law of ``x_{t_n}`` over all ``S^D`` states given ``x_{t_{n-1}}`` and ``x0``.

    Mixes reference posteriors toward every endpoint ``x1`` with weights
    ``pi(x1 | x0) * q(x_{t_{n-1}} | x0, x1)``, i.e. the endpoint law updated by
    the observed trajectory point.
    """
    space = spec.space
    N1 = spec.grid.N + 1
    if not 1 <= n <= N1:
        raise ValidationError(f"transition step {n} outside [1, {N1}]")
    a = int(space.encode(x0))
    y = int(space.encode(x_prev))
    C = spec.endpoint_table()
    if C[a].sum() <= 0:
        raise ValidationError("x0 has zero probability under the coupling")
    cond = C[a] / C[a].sum()

    Qn1 = full_step_matrix(spec.kernel, n - 1)
    Qrest = full_step_matrix(spec.kernel, N1 - n + 1)
    QN = full_step_matrix(spec.kernel, N1)
    Q = full_step_matrix(spec.kernel)
    Qleft = full_step_matrix(spec.kernel, N1 - n)

    weights = np.zeros(space.n_states)
    posteriors = np.zeros((space.n_states, space.n_states))
    for x1 in np.flatnonzero(cond > 0):
        if QN[a, x1] <= 0:
            raise InfeasibleBridgeError("coupling puts mass on unreachable endpoints")
        bridge_prev = Qn1[a, y] * Qrest[y, x1] / QN[a, x1]
        weights[x1] = cond[x1] * bridge_prev
        if Qrest[y, x1] > 0:
            posteriors[x1] = Q[y] * Qleft[:, x1] / Qrest[y, x1]
    total = weights.sum()
    if total <= 0:
        raise ValidationError("x_prev is unreachable from x0 under this process (zero mass)")
    return (weights / total) @ posteriors


def exact_mi_direct(joint: JointPMF) -> float:
    """``sum pi(x0, x1) ln[pi(x0, x1) / (pi(x0) pi(x1))]`` in nats."""
    P = joint.table
    prod = np.outer(joint.marginal0, joint.marginal1)
    mask = P > 0
    return float(np.sum(P[mask] * (np.log(P[mask]) - np.log(prod[mask]))))


def marginal_x0_xn(spec: ReciprocalSpec, n: int, H: np.ndarray | None = None) -> np.ndarray:
    """``r(x0, x_{t_n})`` under ``spec``'s coupling, shape ``(X, X)``."""
    if H is None:
        H = h_functions(spec)
    m0 = spec.endpoint_table().sum(axis=1)
    return m0[:, None] * full_step_matrix(spec.kernel, n) * H[n]


def decomposition_terms(spec: ReciprocalSpec) -> np.ndarray:
    """Expected joint-vs-independent transition KL for each step ``n = 1..N+1``.

    Entry ``n - 1`` is ``E_{r^joint(x0, x_{t_{n-1}})} KL(r^joint(.|x_{t_{n-1}}, x0) || r^ind(.|x_{t_{n-1}}, x0))``.
    """
    joint = spec.with_coupling(Coupling.JOINT)
    ind = spec.with_coupling(Coupling.INDEPENDENT)
    Hj, Hi = h_functions(joint), h_functions(ind)
    terms = np.empty(spec.grid.N + 1)
    for n in range(1, spec.grid.N + 2):
        weight = marginal_x0_xn(joint, n - 1, Hj)
        mask = weight > 0
        Tj = transition_tensor(joint, n, Hj)[mask]
        Ti = transition_tensor(ind, n, Hi)[mask]
        terms[n - 1] = float(np.sum(weight[mask] * kl_rows(Tj, Ti)))
    return terms


def exact_mi_decomposed(spec: ReciprocalSpec) -> float:
    """Mutual information as the summed transition KLs of the two conditioned chains."""
    return float(decomposition_terms(spec).sum())


def _check_paths(spec: ReciprocalSpec) -> int:
    X = spec.space.n_states
    n_paths = X ** (spec.grid.N + 2)
    if n_paths > MAX_PATHS:
        raise OracleSizeError(f"{n_paths} paths exceed the enumeration cap {MAX_PATHS}")
    return n_paths


def path_enumerable(spec: ReciprocalSpec) -> bool:
    return spec.space.n_states ** (spec.grid.N + 2) <= MAX_PATHS


def path_tensor(spec: ReciprocalSpec) -> np.ndarray:
    """Path-space PMF ``r(x0, x_{t_1}, ..., x_{t_{N+1}})`` as an ``X^(N+2)`` array.

    Built from the definition: endpoint coupling times the reference bridge,
    i.e. the product of one-step reference probabilities divided by
    ``Q^{N+1}[x0, x1]``.
    """
    _check_paths(spec)
    X = spec.space.n_states
    N1 = spec.grid.N + 1
    Q = full_step_matrix(spec.kernel)
    QN = full_step_matrix(spec.kernel, N1)
    C = spec.endpoint_table()
    if np.any((C > 0) & (QN <= 0)):
        raise InfeasibleBridgeError("coupling puts mass on unreachable endpoints")
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(C > 0, C / np.where(QN > 0, QN, 1.0), 0.0)

    r = np.ones(X)
    for _ in range(N1):
        r = r[..., None] * Q.reshape((1,) * (r.ndim - 1) + (X, X))
    return r * W.reshape((X,) + (1,) * (N1 - 1) + (X,))


def path_space_kl(spec: ReciprocalSpec) -> float:
    """Brute-force KL(r^joint || r^ind) by enumerating every trajectory."""
    rj = path_tensor(spec.with_coupling(Coupling.JOINT)).ravel()
    ri = path_tensor(spec.with_coupling(Coupling.INDEPENDENT)).ravel()
    return float(kl_rows(rj, ri))


def markov_property_check(spec: ReciprocalSpec) -> float:
    """Max |r(x_{t_k} | full history, x0) - r(x_{t_k} | x_{t_{k-1}}, x0)| over all histories with mass."""
    r = path_tensor(spec)
    X = spec.space.n_states
    N1 = spec.grid.N + 1
    # marg[k] has axes (x0, x_{t_1}, ..., x_{t_k})
    marg = [None] * (N1 + 1)
    marg[N1] = r
    for k in range(N1 - 1, -1, -1):
        marg[k] = marg[k + 1].sum(axis=-1)

    worst = 0.0
    for k in range(2, N1 + 1):
        hist = marg[k - 1][..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            cond_full = np.where(hist > 0, marg[k] / np.where(hist > 0, hist, 1.0), 0.0)
        axes = tuple(range(1, k - 1))
        pair = marg[k].sum(axis=axes) if axes else marg[k]  # (x0, x_{t_{k-1}}, x_{t_k})
        pz = pair.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond_markov = np.where(pz > 0, pair / np.where(pz > 0, pz, 1.0), 0.0)
        cond_markov = cond_markov.reshape((X,) + (1,) * (k - 2) + (X, X))
        dev = np.abs(cond_full - cond_markov)
        dev = np.where(np.broadcast_to(hist > 0, dev.shape), dev, 0.0)
        worst = max(worst, float(dev.max()))
    return worst


def enumerate_paths(spec: ReciprocalSpec):
    """Yield ``(path_indices, probability)`` for every trajectory with positive mass (tiny specs only)."""
    r = path_tensor(spec)
    for idx in itertools.product(range(spec.space.n_states), repeat=spec.grid.N + 2):
        p = r[idx]
        if p > 0:
            yield idx, float(p)
