"""Ground-truth benchmarks: factorized low-dimensional joints and rectangle images.

Dataset file layout (all integers little-endian)::

    bytes 0..7    magic  b"DBMIDS\\x00\\x01"  (format version 1)
    bytes 8..11   uint32 header length H
    bytes 12..    H bytes UTF-8 JSON header: {"count", "D", "S", "dtype", "meta"}
    then          x0 as count*D entries of ``dtype`` (C order)
    then          x1 likewise

``dtype`` is ``"u1"`` when S <= 256, else ``"u2"``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import StateSpace, ValidationError, check_distribution, categorical_sample

DATASET_MAGIC = b"DBMIDS\x00\x01"


# -- low-dimensional benchmark -------------------------------------------------


def gen_conditional_matrix(S: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Random banded stochastic matrix: Gaussian kernel times uniform noise, row-normalized."""
    if S < 2 or not sigma > 0:
        raise ValidationError("need S >= 2 and sigma > 0")
    i = np.arange(S)
    kern = np.exp(-((i[:, None] - i[None, :]) ** 2) / (2.0 * sigma**2))
    P0 = kern * rng.uniform(0.0, 1.0, (S, S)) + 1e-12
    return P0 / P0.sum(axis=1, keepdims=True)


def mi_from_joint_table(P: np.ndarray) -> float:
    P = np.asarray(P, dtype=np.float64)
    prod = np.outer(P.sum(axis=1), P.sum(axis=0))
    mask = P > 0
    return float(np.sum(P[mask] * (np.log(P[mask]) - np.log(prod[mask]))))


@dataclass
class LowDimTask:
    space: StateSpace
    matrices: np.ndarray  # (D, S, S): matrices[d, a, b] = Pi_d(x1 = b | x0 = a)
    sigma: float = 0.5
    mi_per_dim: list = field(init=False)
    mi_total: float = field(init=False)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if self.matrices.shape != (self.space.D, self.space.S, self.space.S):
            raise ValidationError("conditional matrices must have shape (D, S, S)")
        check_distribution(self.matrices, tol=1e-12)
        self.mi_per_dim = [mi_from_joint_table(f) for f in self.factor_joints()]
        self.mi_total = float(sum(self.mi_per_dim))

    def factor_joints(self) -> np.ndarray:
        """Per-dimension joints ``pi_d(a, b) = Pi_d(b | a) / S``."""
        return self.matrices / self.space.S

    def joint_pmf(self):
        from .oracle import JointPMF

        return JointPMF.from_factors(self.factor_joints())

    def meta(self) -> dict:
        return {
            "task": "lowdim",
            "S": self.space.S,
            "D": self.space.D,
            "sigma": self.sigma,
            "mi_true": self.mi_total,
            "mi_per_dim": self.mi_per_dim,
            "matrices": self.matrices.tolist(),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "LowDimTask":
        return cls(StateSpace(meta["S"], meta["D"]), np.array(meta["matrices"]), meta.get("sigma", 0.5))


def gen_lowdim_task(D: int, S: int, sigma: float, rng: np.random.Generator) -> LowDimTask:
    space = StateSpace(S, D)
    mats = np.stack([gen_conditional_matrix(S, sigma, rng) for _ in range(D)])
    return LowDimTask(space, mats, sigma)


@dataclass
class Dataset:
    x0: np.ndarray
    x1: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.int64)
        self.x1 = np.asarray(self.x1, dtype=np.int64)
        if self.x0.ndim != 2 or self.x0.shape != self.x1.shape:
            raise ValidationError("x0 and x1 must be equal-shape (count, D) arrays")

    def __len__(self):
        return len(self.x0)

    @property
    def space(self) -> StateSpace:
        return StateSpace(int(self.meta["S"]), int(self.meta["D"]))

    def save(self, path) -> None:
        S = int(self.meta.get("S", int(max(self.x0.max(), self.x1.max())) + 1))
        dtype = "u1" if S <= 256 else "u2"
        header = json.dumps(
            {"count": len(self), "D": int(self.x0.shape[1]), "S": S, "dtype": dtype, "meta": self.meta},
            sort_keys=True,
        ).encode()
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(self.x0.astype("<" + dtype).tobytes())
            f.write(self.x1.astype("<" + dtype).tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[:8] != DATASET_MAGIC:
            raise ValidationError(f"{path}: not a dataset file (bad magic)")
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + hlen].decode())
        count, D, dtype = header["count"], header["D"], "<" + header["dtype"]
        body = np.frombuffer(raw, dtype=dtype, offset=12 + hlen)
        if body.size != 2 * count * D:
            raise ValidationError(f"{path}: truncated or corrupt payload")
        x0 = body[: count * D].reshape(count, D).astype(np.int64)
        x1 = body[count * D :].reshape(count, D).astype(np.int64)
        return cls(x0, x1, header["meta"])


def sample_lowdim(task: LowDimTask, count: int, rng: np.random.Generator) -> Dataset:
    if count < 1:
        raise ValidationError("count must be >= 1")
    S, D = task.space.S, task.space.D
    x0 = rng.integers(0, S, size=(count, D))
    rows = task.matrices[np.arange(D)[None, :], x0]  # (count, D, S)
    x1 = np.asarray(categorical_sample(rows, rng, validate=False), dtype=np.int64)
    return Dataset(x0, x1, task.meta())


# -- image benchmark -----------------------------------------------------------


def channel_matrix(A: int, eps: float) -> np.ndarray:
    """Symmetric channel on ``A`` symbols: keep w.p. ``1 - eps``, else uniform over the others."""
    M = np.full((A, A), eps / (A - 1))
    np.fill_diagonal(M, 1.0 - eps)
    return M


def channel_mi(V: int, eps: float) -> float:
    """MI of the symmetric channel with uniform input over ``V + 1`` symbols, in nats."""
    A = V + 1
    if A < 2:
        raise ValidationError("alphabet needs at least 2 symbols")
    if not 0.0 <= eps <= 1.0:
        raise ValidationError("eps must lie in [0, 1]")
    row = np.array([1.0 - eps] + [eps / (A - 1)] * (A - 1))
    nz = row[row > 0]
    return float(np.log(A) + np.sum(nz * np.log(nz)))


def solve_eps(V: int, target: float, tol: float = 1e-10) -> float:
    """Channel noise level whose MI equals ``target`` (bisection on ``[0, V/(V+1)]``)."""
    A = V + 1
    top = np.log(A)
    if not 0.0 <= target <= top + 1e-15:
        raise ValidationError(f"target MI {target} outside [0, ln({A})]")
    lo, hi = 0.0, V / (V + 1)
    if target >= top:
        return 0.0
    if target <= 0.0:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = channel_mi(V, mid)
        if abs(val - target) <= tol:
            return mid
        if val > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def render_rectangle(latents, side: int, v_min: int) -> np.ndarray:
    """Binary image (flattened row-major, length ``side**2``) of one axis-aligned rectangle.

    ``latents = (left, top, w, h)`` covers columns ``[left, left + v_min + w)``
    and rows ``[top, top + v_min + h)``.  Accepts a batch of shape ``(B, 4)``.
    """
    lat = np.asarray(latents, dtype=np.int64)
    single = lat.ndim == 1
    lat = np.atleast_2d(lat)
    left, top, w, h = lat.T
    right, bottom = left + v_min + w, top + v_min + h
    if lat.min() < 0 or right.max() > side or bottom.max() > side:
        raise ValidationError("rectangle exceeds image bounds")
    ax = np.arange(side)
    cols = (ax[None, :] >= left[:, None]) & (ax[None, :] < right[:, None])
    rows = (ax[None, :] >= top[:, None]) & (ax[None, :] < bottom[:, None])
    img = (rows[:, :, None] & cols[:, None, :]).reshape(len(lat), side * side).astype(np.int64)
    return img[0] if single else img


@dataclass
class ImageTask:
    side: int
    V: int
    v_min: int
    eps: float
    target_mi: float
    render_version: str = "anchor-size/1"
    mi_total: float = field(init=False)

    def __post_init__(self):
        check_image_geometry(self.side, self.V, self.v_min)
        self.mi_total = 4.0 * channel_mi(self.V, self.eps)

    @property
    def space(self) -> StateSpace:
        return StateSpace(2, self.side * self.side)

    def meta(self) -> dict:
        return {
            "task": "image",
            "S": 2,
            "D": self.side * self.side,
            "side": self.side,
            "V": self.V,
            "v_min": self.v_min,
            "eps": self.eps,
            "target_mi": self.target_mi,
            "mi_true": self.mi_total,
            "render_version": self.render_version,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ImageTask":
        return cls(meta["side"], meta["V"], meta["v_min"], meta["eps"], meta["target_mi"], meta["render_version"])


def check_image_geometry(side: int, V: int, v_min: int) -> None:
    if side < 1 or V < 1 or v_min < 1:
        raise ValidationError("side, V and v_min must be positive")
    if v_min + 2 * V > side:
        raise ValidationError(f"rectangles up to {v_min + 2 * V} pixels do not fit a {side}x{side} image")


def gen_image_task(side: int, V: int, v_min: int, target_total_mi: float) -> ImageTask:
    check_image_geometry(side, V, v_min)
    return ImageTask(side, V, v_min, solve_eps(V, target_total_mi / 4.0), target_total_mi)


def sample_image_latents(task: ImageTask, count: int, rng: np.random.Generator):
    A = task.V + 1
    z0 = rng.integers(0, A, size=(count, 4))
    rows = channel_matrix(A, task.eps)[z0]
    z1 = np.asarray(categorical_sample(rows, rng, validate=False), dtype=np.int64)
    return z0, z1


def sample_image(task: ImageTask, count: int, rng: np.random.Generator, return_latents: bool = False):
    if count < 1:
        raise ValidationError("count must be >= 1")
    z0, z1 = sample_image_latents(task, count, rng)
    ds = Dataset(render_rectangle(z0, task.side, task.v_min), render_rectangle(z1, task.side, task.v_min), task.meta())
    return (ds, z0, z1) if return_latents else ds


def task_from_meta(meta: dict):
    kind = meta.get("task")
    if kind == "lowdim":
        return LowDimTask.from_meta(meta)
    if kind == "image":
        return ImageTask.from_meta(meta)
    raise ValidationError(f"unknown task kind {kind!r}")


# -- image dumps ---------------------------------------------------------------


def tile_grid(images, side: int, cols: int = 5, rows: int = 2, sep_value: int = 128) -> np.ndarray:
    """Tile ``rows * cols`` binary images with 1-pixel separators into one 8-bit image."""
    images = np.asarray(images).reshape(-1, side, side)
    if len(images) < rows * cols:
        raise ValidationError(f"need {rows * cols} images for a {cols}x{rows} grid")
    H, W = rows * side + rows - 1, cols * side + cols - 1
    grid = np.full((H, W), sep_value, dtype=np.int64)
    for k in range(rows * cols):
        r, c = divmod(k, cols)
        grid[r * (side + 1) : r * (side + 1) + side, c * (side + 1) : c * (side + 1) + side] = images[k] * 255
    return grid


def write_pgm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Plain (ASCII, ``P2``) PGM with maxval 255."""
    image = np.asarray(image, dtype=np.int64)
    H, W = image.shape
    lines = ["P2"]
    if comment:
        lines += ["# " + c for c in comment.splitlines()]
    lines += [f"{W} {H}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in image]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            continue
        tokens += line.split()
    if tokens[0] != "P2":
        raise ValidationError("not a plain PGM file")
    W, H = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:], dtype=np.int64).reshape(H, W)
