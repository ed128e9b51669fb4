"""State spaces, couplings, categorical utilities and seeded random streams.

Categories are 0-based: a state vector of a ``StateSpace(S, D)`` is an integer
array of length ``D`` with entries in ``{0, ..., S-1}``.  A categorical
distribution is an array whose last axis has length ``S``; a factorized
distribution over the product space is a ``(D, S)`` array, one row per
dimension.

Random streams
--------------
Every stochastic operation takes an explicit ``numpy.random.Generator``.
Streams are derived from a 64-bit master seed with :func:`make_rng`, which
keys a ``SeedSequence`` by ``(seed, *keys)``.  Two call sites that use
different keys get statistically independent streams, and a given
``(seed, keys)`` pair always yields the same stream regardless of what other
streams were created before it.  This is the splitting rule used for
per-epoch and per-item substreams.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field

import numpy as np

#: Absolute tolerance used when validating externally supplied distributions.
VALIDATION_TOL = 1e-9

#: Tolerance that every distribution produced inside the package must meet.
STOCHASTIC_TOL = 1e-12

MAX_SEED = 2**64 - 1


class ValidationError(ValueError):
    """Invalid configuration, state vector or distribution."""


class InfiniteKLError(ArithmeticError):
    """KL(p || q) is infinite: ``p`` puts mass where ``q`` has none."""


class InfeasibleBridgeError(ValueError):
    """The reference process cannot connect the requested endpoints."""


class NumericError(FloatingPointError):
    """Non-finite values appeared during a numerical computation."""


class Coupling(enum.IntEnum):
    """Endpoint coupling of a reciprocal process; the value is the model flag ``v``."""

    INDEPENDENT = 0
    JOINT = 1


@dataclass(frozen=True)
class StateSpace:
    S: int
    D: int

    def __post_init__(self):
        if int(self.S) != self.S or self.S < 2:
            raise ValidationError(f"S must be an integer >= 2, got {self.S!r}")
        if int(self.D) != self.D or self.D < 1:
            raise ValidationError(f"D must be an integer >= 1, got {self.D!r}")

    @property
    def n_states(self) -> int:
        return self.S**self.D

    def validate(self, x) -> np.ndarray:
        """Return ``x`` as an int64 array of shape ``(..., D)`` or raise."""
        x = np.asarray(x)
        if x.ndim == 0 or x.shape[-1] != self.D:
            raise ValidationError(f"state vectors must have {self.D} entries, got shape {x.shape}")
        if not np.issubdtype(x.dtype, np.integer):
            if not np.all(np.mod(x, 1) == 0):
                raise ValidationError("state entries must be integers")
        x = x.astype(np.int64)
        if x.size and (x.min() < 0 or x.max() >= self.S):
            raise ValidationError(f"state entries must lie in [0, {self.S - 1}]")
        return x

    def encode(self, x) -> np.ndarray:
        """Mixed-radix index of state vectors; dimension 0 is most significant."""
        x = self.validate(x)
        weights = self.S ** np.arange(self.D - 1, -1, -1, dtype=np.int64)
        return x @ weights

    def decode(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= self.n_states):
            raise ValidationError("state index out of range")
        weights = self.S ** np.arange(self.D - 1, -1, -1, dtype=np.int64)
        return (index[..., None] // weights) % self.S

    def all_states(self) -> np.ndarray:
        return self.decode(np.arange(self.n_states))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform index grid ``0 = t_0 < ... < t_{N+1} = 1`` with ``N`` inner points."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValidationError(f"N must be an integer >= 1, got {self.N!r}")

    @property
    def n_points(self) -> int:
        return self.N + 2

    @property
    def n_steps(self) -> int:
        return self.N + 1

    def times(self) -> np.ndarray:
        return np.arange(self.N + 2) / (self.N + 1)


@dataclass
class PairBatch:
    x0: np.ndarray
    x1: np.ndarray
    coupling: Coupling = Coupling.JOINT
    space: StateSpace | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.int64))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.int64))
        if self.x0.shape != self.x1.shape or len(self.x0) < 1:
            raise ValidationError(
                f"x0 and x1 must hold the same number (>= 1) of vectors, got {self.x0.shape} and {self.x1.shape}"
            )
        if self.space is not None:
            self.space.validate(self.x0)
            self.space.validate(self.x1)

    def __len__(self):
        return len(self.x0)


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    key = int(key)
    if key < 0:
        raise ValidationError("stream keys must be non-negative")
    return key


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the substream ``(seed, *keys)``; string keys are hashed with CRC32."""
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def check_distribution(p, tol: float = VALIDATION_TOL) -> np.ndarray:
    """Validate that every row along the last axis is a probability vector."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 1:
        raise ValidationError("distribution must have at least one category")
    if not np.all(np.isfinite(p)):
        raise ValidationError("distribution has non-finite entries")
    if np.any(p < 0):
        raise ValidationError("distribution has negative entries")
    err = np.max(np.abs(p.sum(axis=-1) - 1.0))
    if err > tol:
        raise ValidationError(f"distribution rows do not sum to 1 (max error {err:.3g})")
    return p


def categorical_sample(probs, rng: np.random.Generator, validate: bool = True):
    """Draw one category per row of ``probs`` by inverse-CDF sampling.

    Consumes exactly one ``rng.random()`` double per row, in C order over the
    leading axes.  A scalar is returned for a single length-``S`` vector.
    """
    p = check_distribution(probs) if validate else np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(p.shape[:-1])
    idx = (cdf <= u[..., None]).sum(axis=-1)
    idx = np.minimum(idx, p.shape[-1] - 1)
    return int(idx) if np.ndim(idx) == 0 else idx


def kl_rows(p, q) -> np.ndarray:
    """Row-wise KL(p || q) in nats over the last axis, with 0 ln(0/q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(support & (q <= 0)):
        raise InfiniteKLError("p has mass where q is zero")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(np.where(support, q, 1.0))), 0.0)
    return terms.sum(axis=-1)


def kl_categorical(p, q) -> float:
    """KL divergence in nats between (possibly factorized) categorical distributions.

    For a ``(D, S)`` factorized pair the per-dimension divergences are summed,
    which equals the KL between the corresponding product distributions.
    """
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {q.shape}")
    # Clip tiny negative rounding so kl >= 0 holds exactly.
    return max(float(kl_rows(p, q).sum()), 0.0)


def random_derangement(K: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``range(K)`` without fixed points.

    Rejection sampling over uniform permutations; the acceptance rate tends to
    1/e, so the expected number of attempts is below 3 for every K >= 2.
    """
    if K < 2:
        raise ValidationError("a derangement needs at least 2 elements")
    ar = np.arange(K)
    while True:
        perm = rng.permutation(K)
        if not np.any(perm == ar):
            return perm


def permute_coupling(batch: PairBatch, rng: np.random.Generator) -> PairBatch:
    """Pair every x0 with a different batch member's x1 (approximate product coupling)."""
    perm = random_derangement(len(batch), rng)
    return PairBatch(batch.x0.copy(), batch.x1[perm], Coupling.INDEPENDENT, batch.space)


def one_hot(x, S: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    out = np.zeros(x.shape + (S,))
    np.put_along_axis(out, x[..., None], 1.0, axis=-1)
    return out
