"""Monte-Carlo mutual information estimation and the plug-in baseline.

The bridge estimator averages the KL between the joint (v=1) and independent
(v=0) transitions at points ``(x0, x_{t_n})`` drawn from the joint reciprocal
process.  The conditioned chain has ``N + 1`` transitions (steps ``1..N+1``);
the time index of the conditioning point is drawn uniformly from ``0..N`` and
the sample mean is multiplied by ``N + 1`` so that it estimates the *sum* of
the per-step expected KLs, which equals the mutual information.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Coupling, StateSpace, ValidationError, kl_rows, make_rng
from .model import TransitionModel, floor_probs
from .oracle import ReciprocalSpec, h_functions, transition_tensor
from .refproc import BridgeTables

log = logging.getLogger(__name__)


@dataclass
class MIEstimate:
    value: float
    std_error: float
    K: int
    M: int
    N: int | None
    seed: int | None
    estimator: str
    std_error_defined: bool = True
    n_flagged: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class OracleSource:
    """Exact transitions of a tabulated reciprocal spec.

    KL tables ``kl[n, x0, y]`` are built lazily per step; entries whose
    conditioning point has no mass under the joint process are NaN and
    entries with a support violation are ``inf``.
    """

    tag = "dbmi-oracle"

    def __init__(self, spec: ReciprocalSpec):
        self.spec = spec
        self.space: StateSpace = spec.space
        self.kernel = spec.kernel
        self.grid = spec.grid
        self.tables = BridgeTables(spec.kernel, spec.grid)
        self._joint = spec.with_coupling(Coupling.JOINT)
        self._ind = spec.with_coupling(Coupling.INDEPENDENT)
        self._Hj = h_functions(self._joint)
        self._Hi = h_functions(self._ind)
        self._kl = {}

    def kl_table(self, n: int) -> np.ndarray:
        if n not in self._kl:
            Tj = transition_tensor(self._joint, n, self._Hj)
            Ti = transition_tensor(self._ind, n, self._Hi)
            valid = ~np.isnan(Tj).any(axis=-1)
            out = np.full(valid.shape, np.nan)
            pj, pi = Tj[valid], Ti[valid]
            bad = ((pj > 0) & ~(pi > 0)).any(axis=-1)
            vals = np.full(len(pj), np.inf)
            vals[~bad] = kl_rows(pj[~bad], pi[~bad])
            out[valid] = vals
            self._kl[n] = out
        return self._kl[n]

    def kl_terms(self, x_prev, x0, n) -> np.ndarray:
        """KL(joint || independent) of the step-``n`` transitions, one value per item."""
        a = self.space.encode(x0)
        y = self.space.encode(x_prev)
        n = np.asarray(n)
        out = np.empty(len(a))
        for step in np.unique(n):
            sel = n == step
            out[sel] = self.kl_table(int(step))[a[sel], y[sel]]
        if np.isnan(out).any():
            raise ValidationError("conditioning point has zero mass under the joint process")
        return out


class ModelSource:
    """Learned transitions ``r_theta(. | x_prev, x0, v)`` with the probability floor applied."""

    tag = "dbmi"

    def __init__(self, model: TransitionModel, params: dict, chunk: int = 4096):
        self.model = model
        self.params = params
        self.space = model.config.space
        self.grid = model.config.grid
        self.tables = model.tables
        self.chunk = chunk

    def kl_terms(self, x_prev, x0, n) -> np.ndarray:
        S = self.space.S
        n = np.asarray(n)
        out = np.empty(len(n))
        for lo in range(0, len(n), self.chunk):
            sl = slice(lo, lo + self.chunk)
            p1 = floor_probs(self.model.transition_probs(self.params, x_prev[sl], x0[sl], n[sl], 1), S)
            p0 = floor_probs(self.model.transition_probs(self.params, x_prev[sl], x0[sl], n[sl], 0), S)
            out[sl] = kl_rows(p1, p0).sum(axis=-1)
        return out


def estimate_dbmi(source, x0, x1, K: int, M: int, rng: np.random.Generator, seed=None, scale_steps: bool = True) -> MIEstimate:
    """Bridge-matching MI estimate from ``K`` dataset pairs and ``M`` bridge draws each.

    ``scale_steps=False`` returns the plain per-step average (the estimate
    divided by ``N + 1``); it exists for regression checks only.
    Non-finite KL terms are flagged and excluded; if every term is flagged
    the estimate is undefined and an error is raised.
    """
    x0 = source.space.validate(x0)
    x1 = source.space.validate(x1)
    if K < 1 or M < 1:
        raise ValidationError("K and M must be >= 1")
    if len(x0) < K:
        raise ValidationError(f"dataset has {len(x0)} pairs, fewer than K={K}")
    N = source.grid.N
    idx = rng.choice(len(x0), size=K, replace=False)
    a, b = x0[idx], x1[idx]
    n = rng.integers(0, N + 1, size=K)
    a_rep, b_rep, n_rep = np.repeat(a, M, axis=0), np.repeat(b, M, axis=0), np.repeat(n, M)
    x_t = source.tables.sample_bridge(n_rep, a_rep, b_rep, rng)
    terms = source.kl_terms(x_t, a_rep, n_rep + 1).reshape(K, M)

    finite = np.isfinite(terms)
    n_flagged = int((~finite).sum())
    if n_flagged == terms.size:
        raise ValidationError("every KL term violated the support condition")
    if n_flagged:
        log.warning("%d of %d KL terms flagged as support violations and excluded", n_flagged, terms.size)
    per_pair = np.array([row[ok].mean() if ok.any() else np.nan for row, ok in zip(terms, finite)])
    per_pair = per_pair[np.isfinite(per_pair)]
    factor = (N + 1) if scale_steps else 1
    value = factor * float(per_pair.mean())
    defined = len(per_pair) >= 2
    se = factor * float(per_pair.std(ddof=1) / np.sqrt(len(per_pair))) if defined else float("nan")
    return MIEstimate(value, se, K, M, N, seed, source.tag, defined, n_flagged)


def _rows_to_ids(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(np.asarray(x, dtype=np.int64))
    _, ids = np.unique(x, axis=0, return_inverse=True)
    return ids.ravel()


def plugin_mi(x0, x1) -> float:
    """MI of the empirical joint of the observed pairs, in nats."""
    a, b = _rows_to_ids(x0), _rows_to_ids(x1)
    n = len(a)
    pairs, counts = np.unique(np.stack([a, b], axis=1), axis=0, return_counts=True)
    ca = np.bincount(a)
    cb = np.bincount(b)
    p = counts / n
    return float(np.sum(p * (np.log(counts) + np.log(n) - np.log(ca[pairs[:, 0]]) - np.log(cb[pairs[:, 1]]))))


def estimate_plugin(x0, x1, rng: np.random.Generator | None = None, n_bootstrap: int = 20, seed=None) -> MIEstimate:
    """Plug-in estimate; the standard error is a bootstrap over pairs (``rng`` required for it)."""
    x0 = np.atleast_2d(np.asarray(x0))
    x1 = np.atleast_2d(np.asarray(x1))
    if len(x0) == 0 or len(x0) != len(x1):
        raise ValidationError("plug-in estimate needs a non-empty set of pairs")
    value = plugin_mi(x0, x1)
    se, defined = float("nan"), False
    if rng is not None and n_bootstrap >= 2:
        boots = []
        for _ in range(n_bootstrap):
            idx = rng.integers(0, len(x0), size=len(x0))
            boots.append(plugin_mi(x0[idx], x1[idx]))
        se, defined = float(np.std(boots, ddof=1)), True
    return MIEstimate(value, se, len(x0), 1, None, seed, "plugin", defined)


def mc_convergence_scan(source, x0, x1, K_list, M_list, seed: int):
    """Grid of estimates over ``K`` and ``M``; each cell uses substream ``(seed, "scan", K, M)``."""
    table = []
    for K in K_list:
        for M in M_list:
            table.append(estimate_dbmi(source, x0, x1, K, M, make_rng(seed, "scan", K, M), seed))
    return table
