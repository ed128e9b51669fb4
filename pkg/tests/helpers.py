"""Shared test utilities: toy models, finite differences, small datasets."""

import numpy as np

from dbmi.core import make_rng
from dbmi.model import LossBatch, ModelConfig, TransitionModel


def toy_model(S=3, D=2, N=3, alpha=0.2, embed_dim=8, hidden=(16, 16), time_freqs=2):
    cfg = ModelConfig(S=S, D=D, N=N, alpha=alpha, embed_dim=embed_dim, hidden_dims=hidden, time_freqs=time_freqs)
    return TransitionModel(cfg)


def random_params(model, seed=0, scale=0.5):
    """Initialized parameters with a non-zero head, so every layer gets gradient."""
    rng = make_rng(seed, "params")
    p = model.init_params(rng)
    p["head_w"] = rng.normal(0.0, scale, p["head_w"].shape)
    p["head_b"] = rng.normal(0.0, scale, p["head_b"].shape)
    p["time_b"] = rng.normal(0.0, 0.1, p["time_b"].shape)
    for i in range(len(model.config.hidden_dims)):
        p[f"dense{i}_b"] = rng.normal(0.0, 0.1, p[f"dense{i}_b"].shape)
    return p


def random_batch(model, B=24, seed=0):
    """Loss tuples with x_prev drawn from the bridge, covering every time index."""
    c = model.config
    rng = make_rng(seed, "batch")
    x0 = rng.integers(0, c.S, size=(B, c.D))
    x1 = rng.integers(0, c.S, size=(B, c.D))
    n = np.arange(B) % (c.N + 1)
    x_prev = model.tables.sample_bridge(n, x0, x1, rng)
    v = np.arange(B) % 2
    return LossBatch(x_prev, x0, x1, n, v)


def finite_difference_check(model, params, batch, ce_weight=0.0, rel_h=1e-4):
    """Worst relative error between the analytic gradient and central differences.

    Step per coordinate is ``rel_h * max(1, |theta|)``.  Coordinates where
    both derivatives are below 1e-9 in magnitude are compared absolutely.
    Returns ``(worst_rel_err, per_group_worst)``.
    """
    grads = model.grad(params, batch, ce_weight)
    per_group = {}
    for name, p in params.items():
        worst = 0.0
        for idx in np.ndindex(p.shape):
            h = rel_h * max(1.0, abs(p[idx]))
            orig = p[idx]
            p[idx] = orig + h
            up = model.loss(params, batch, ce_weight)
            p[idx] = orig - h
            down = model.loss(params, batch, ce_weight)
            p[idx] = orig
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            denom = max(abs(fd), abs(an))
            err = abs(fd - an) / denom if denom > 1e-9 else abs(fd - an)
            worst = max(worst, err)
        per_group[name] = worst
    return max(per_group.values()), per_group
