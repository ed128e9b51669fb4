"""Trainable transition model with the posterior-mixture parametrization.

The network predicts a factorized endpoint distribution
``p~(x1 | x_prev, x0, n, v)`` of shape ``(D, S)``; the transition is then the
mixture of reference posteriors

    r(x_{t_n}^d | x_prev, x0, v) = sum_k p~_d(k) q(x_{t_n}^d | x_prev^d, x1^d = k),

which is a valid distribution for any parameter values.

Backbone: one-hot inputs of ``x_prev`` and ``x0`` go through per-role
embedding tables (one row per (dimension, category), so position is encoded)
and are summed with a projected sinusoidal embedding of ``n / (N + 1)`` and a
learned embedding of the coupling flag; a leaky-ReLU MLP maps the sum to
``D * S`` logits.  Gradients are computed by hand (reverse mode) in numpy.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import NumericError, StateSpace, TimeGrid, ValidationError, categorical_sample, one_hot
from .refproc import BridgeTables, UniformKernel

#: Probability floor applied to transitions before any log is taken.
PROB_FLOOR = 1e-12

CHECKPOINT_FORMAT = "dbmi-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    S: int
    D: int
    N: int
    alpha: float
    embed_dim: int = 32
    hidden_dims: tuple = (128, 128)
    negative_slope: float = 0.01
    time_freqs: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        StateSpace(self.S, self.D)
        TimeGrid(self.N)
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("the model needs 0 < alpha < 1 so every posterior is defined")
        if self.embed_dim < 1 or self.time_freqs < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValidationError("all layer sizes must be >= 1")

    @property
    def space(self) -> StateSpace:
        return StateSpace(self.S, self.D)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.N)

    @property
    def kernel(self) -> UniformKernel:
        return UniformKernel(self.space, self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LossBatch:
    """Training tuples; ``n`` is the time index of ``x_prev`` (target step ``n + 1``)."""

    x_prev: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    n: np.ndarray
    v: np.ndarray

    def __len__(self):
        return len(self.n)

    @staticmethod
    def concat(batches) -> "LossBatch":
        return LossBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("x_prev", "x0", "x1", "n", "v")))


def leaky_relu(z, slope):
    return np.where(z > 0, z, slope * z)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def floor_probs(p, S):
    return (p + PROB_FLOOR) / (1.0 + S * PROB_FLOOR)


class TransitionModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.tables = BridgeTables(config.kernel, config.grid)
        F = config.time_freqs
        self._freqs = np.pi * 2.0 ** np.arange(F)

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> dict:
        c = self.config
        DS, E = c.D * c.S, c.embed_dim
        emb_scale = 1.0 / np.sqrt(2 * c.D + 2)
        p = {
            "embed_prev": rng.normal(0.0, emb_scale, (DS, E)),
            "embed_x0": rng.normal(0.0, emb_scale, (DS, E)),
            "time_w": rng.normal(0.0, emb_scale / np.sqrt(c.time_freqs), (2 * c.time_freqs, E)),
            "time_b": np.zeros(E),
            "flag_embed": rng.normal(0.0, emb_scale, (2, E)),
        }
        fan_in = E
        for i, h in enumerate(c.hidden_dims):
            p[f"dense{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, h))
            p[f"dense{i}_b"] = np.zeros(h)
            fan_in = h
        # zero head: uniform endpoint predictions keep early KLs finite
        p["head_w"] = np.zeros((fan_in, DS))
        p["head_b"] = np.zeros(DS)
        return p

    def param_names(self) -> list:
        names = ["embed_prev", "embed_x0", "time_w", "time_b", "flag_embed"]
        for i in range(len(self.config.hidden_dims)):
            names += [f"dense{i}_w", f"dense{i}_b"]
        return names + ["head_w", "head_b"]

    # -- forward ------------------------------------------------------------

    def _inputs(self, x_prev, x0, n, v):
        c = self.config
        x_prev = np.asarray(x_prev, dtype=np.int64)
        single = x_prev.ndim == 1
        x_prev = c.space.validate(np.atleast_2d(x_prev))
        x0 = c.space.validate(np.atleast_2d(np.asarray(x0, dtype=np.int64)))
        B = len(x_prev)
        n = np.broadcast_to(np.asarray(n, dtype=np.int64), (B,))
        v = np.broadcast_to(np.asarray(v, dtype=np.int64), (B,))
        if n.min() < 1 or n.max() > c.N + 1:
            raise ValidationError(f"transition step must lie in [1, {c.N + 1}]")
        if not np.all((v == 0) | (v == 1)):
            raise ValidationError("coupling flag v must be 0 or 1")
        return x_prev, x0, n, v, single

    def time_features(self, n) -> np.ndarray:
        tau = np.asarray(n, dtype=np.float64)[:, None] / (self.config.N + 1)
        ang = tau * self._freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _forward(self, params, x_prev, x0, n, v):
        c = self.config
        B = len(x_prev)
        oh_prev = one_hot(x_prev, c.S).reshape(B, -1)
        oh_x0 = one_hot(x0, c.S).reshape(B, -1)
        tfeat = self.time_features(n)
        h = (
            oh_prev @ params["embed_prev"]
            + oh_x0 @ params["embed_x0"]
            + tfeat @ params["time_w"]
            + params["time_b"]
            + params["flag_embed"][v]
        )
        acts = [h]
        pre = []
        for i in range(len(c.hidden_dims)):
            z = h @ params[f"dense{i}_w"] + params[f"dense{i}_b"]
            h = leaky_relu(z, c.negative_slope)
            pre.append(z)
            acts.append(h)
        logits = (h @ params["head_w"] + params["head_b"]).reshape(B, c.D, c.S)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits; parameter max-abs: " + _param_diagnostics(params))
        logp = log_softmax(logits)
        cache = dict(oh_prev=oh_prev, oh_x0=oh_x0, tfeat=tfeat, v=v, acts=acts, pre=pre, logp=logp)
        return np.exp(logp), cache

    def predict_endpoint(self, params, x_prev, x0, n, v) -> np.ndarray:
        """Factorized endpoint distribution, ``(D, S)`` or ``(B, D, S)``."""
        x_prev, x0, n, v, single = self._inputs(x_prev, x0, n, v)
        probs, _ = self._forward(params, x_prev, x0, n, v)
        return probs[0] if single else probs

    def mix_posteriors(self, endpoint, x_prev, n) -> np.ndarray:
        post = self.tables.posterior_given_prev(n, x_prev)  # (B, D, S_x1, S_next)
        return np.einsum("bdk,bdkj->bdj", endpoint, post)

    def transition_probs(self, params, x_prev, x0, n, v) -> np.ndarray:
        """Mixture of reference posteriors weighted by :meth:`predict_endpoint` (no floor)."""
        x_prev, x0, n, v, single = self._inputs(x_prev, x0, n, v)
        probs, _ = self._forward(params, x_prev, x0, n, v)
        out = self.mix_posteriors(probs, x_prev, n)
        return out[0] if single else out

    # -- objective ----------------------------------------------------------

    def _check_batch(self, batch: LossBatch):
        if len(batch) == 0:
            raise ValidationError("empty minibatch")
        n = np.asarray(batch.n)
        if n.min() < 0 or n.max() > self.config.N:
            raise ValidationError(f"loss tuples need x_prev time index in [0, {self.config.N}]")

    def _loss_forward(self, params, batch: LossBatch, ce_weight: float):
        c = self.config
        self._check_batch(batch)
        m = np.asarray(batch.n, dtype=np.int64) + 1  # target step
        x_prev, x0, m, v, _ = self._inputs(batch.x_prev, batch.x0, m, batch.v)
        x1 = c.space.validate(batch.x1)
        probs, cache = self._forward(params, x_prev, x0, m, v)
        post = self.tables.posterior_given_prev(m, x_prev)
        r = floor_probs(np.einsum("bdk,bdkj->bdj", probs, post), c.S)
        # q is one-hot at x1 on the final step, so the KL reduces to -log r(x1) there
        q = np.take_along_axis(post, x1[:, :, None, None], axis=2)[:, :, 0, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            qlogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
        terms = (qlogq - q * np.log(r)).sum(axis=(1, 2))
        if ce_weight:
            ce = -np.take_along_axis(cache["logp"], x1[:, :, None], axis=2).sum(axis=(1, 2))
            terms = terms + ce_weight * ce
        cache.update(probs=probs, post=post, r=r, q=q, x1=x1)
        return terms, cache

    def loss_terms(self, params, batch: LossBatch, ce_weight: float = 0.0) -> np.ndarray:
        return self._loss_forward(params, batch, ce_weight)[0]

    def loss(self, params, batch: LossBatch, ce_weight: float = 0.0) -> float:
        return float(self.loss_terms(params, batch, ce_weight).mean())

    def loss_and_grad(self, params, batch: LossBatch, ce_weight: float = 0.0):
        """Mean loss over tuples, per-tuple terms and the exact gradient."""
        c = self.config
        terms, cache = self._loss_forward(params, batch, ce_weight)
        loss = float(terms.mean())
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        B = len(terms)
        probs, post, r, q = cache["probs"], cache["post"], cache["r"], cache["q"]

        d_r = -q / r / (B * (1.0 + c.S * PROB_FLOOR))
        d_probs = np.einsum("bdj,bdkj->bdk", d_r, post)
        d_logits = probs * (d_probs - (probs * d_probs).sum(axis=-1, keepdims=True))
        if ce_weight:
            d_logits += (ce_weight / B) * (probs - one_hot(cache["x1"], c.S))
        d_out = d_logits.reshape(B, -1)

        g = {}
        acts, pre = cache["acts"], cache["pre"]
        g["head_w"] = acts[-1].T @ d_out
        g["head_b"] = d_out.sum(axis=0)
        dh = d_out @ params["head_w"].T
        for i in reversed(range(len(c.hidden_dims))):
            dz = dh * np.where(pre[i] > 0, 1.0, c.negative_slope)
            g[f"dense{i}_w"] = acts[i].T @ dz
            g[f"dense{i}_b"] = dz.sum(axis=0)
            dh = dz @ params[f"dense{i}_w"].T
        g["embed_prev"] = cache["oh_prev"].T @ dh
        g["embed_x0"] = cache["oh_x0"].T @ dh
        g["time_w"] = cache["tfeat"].T @ dh
        g["time_b"] = dh.sum(axis=0)
        g["flag_embed"] = one_hot(cache["v"], 2).T @ dh
        for k, val in g.items():
            if not np.all(np.isfinite(val)):
                raise NumericError(f"non-finite gradient in {k}")
        return loss, terms, {k: g[k] for k in self.param_names()}

    def grad(self, params, batch: LossBatch, ce_weight: float = 0.0) -> dict:
        return self.loss_and_grad(params, batch, ce_weight)[2]

    # -- sampling -----------------------------------------------------------

    def rollout(self, params, x0, v, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sampling of the learned chain from ``x0`` to ``t_{N+1}``."""
        x0 = self.config.space.validate(np.atleast_2d(x0))
        x = x0.copy()
        for n in range(1, self.config.N + 2):
            probs = self.transition_probs(params, x, x0, n, v)
            x = np.asarray(categorical_sample(probs, rng, validate=False), dtype=np.int64)
        return x


def _param_diagnostics(params) -> str:
    parts = []
    for k, val in params.items():
        finite = np.isfinite(val)
        parts.append(f"{k}={np.abs(val[finite]).max() if finite.any() else float('nan'):.3g}"
                     + ("" if finite.all() else "(non-finite!)"))
    return ", ".join(parts)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(lr, beta1, beta2, eps, 0, zeros, {k: z.copy() for k, z in zeros.items()})


def adam_step(params: dict, state: AdamState, grads: dict):
    """One bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    if set(grads) != set(params):
        raise ValidationError("gradient keys do not match parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValidationError(f"shape mismatch for {k}: {g.shape} vs {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    opt_state: AdamState | None = None
    meta: dict = field(default_factory=dict)
    ema: dict | None = None

    def eval_params(self) -> dict:
        """Weights to use for estimation: the running average when one was kept."""
        return self.ema if self.ema is not None else self.params


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write an ``.npz`` container: JSON header plus raw float64 arrays."""
    header = {"format": CHECKPOINT_FORMAT, "config": ckpt.config.to_dict(), "meta": ckpt.meta}
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.opt_state is not None:
        s = ckpt.opt_state
        header["adam"] = {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
        arrays.update({f"adam_m/{k}": v for k, v in s.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in s.v.items()})
    if ckpt.ema is not None:
        arrays.update({f"ema/{k}": v for k, v in ckpt.ema.items()})
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {header.get('format')!r}")
        params, m, v, ema = {}, {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[6:]] = data[key].copy()
            elif key.startswith("ema/"):
                ema[key[4:]] = data[key].copy()
            elif key.startswith("adam_m/"):
                m[key[7:]] = data[key].copy()
            elif key.startswith("adam_v/"):
                v[key[7:]] = data[key].copy()
    config = ModelConfig.from_dict(header["config"])
    names = TransitionModel(config).param_names()
    params = {k: params[k] for k in names}
    opt = None
    if "adam" in header:
        a = header["adam"]
        opt = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                        {k: m[k] for k in names}, {k: v[k] for k in names})
    ema = {k: ema[k] for k in names} if ema else None
    return Checkpoint(config, params, opt, header.get("meta", {}), ema)
