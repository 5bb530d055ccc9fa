"""Attention maps and the divergence / correlation primitives.

An attention map is a 2-D float64 array of nonnegative values summing to 1.
Maps are passed around as plain numpy arrays; every function here returns a
new array and never mutates its inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from roboattn.errors import DegenerateMap, InvalidInput, ShapeError

EPS = 1e-8
SUM_TOL = 1e-6


def _as_grid(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D grid, got shape {arr.shape}")
    return arr


def check_map(p, name: str = "map") -> np.ndarray:
    """Validate an attention map and return it as a float64 2-D array.

    Raises InvalidInput for negative or non-finite values or a sum that is
    not 1 within ``SUM_TOL``.
    """
    arr = _as_grid(p)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite values")
    if np.any(arr < 0):
        raise InvalidInput(f"{name} has negative values")
    total = arr.sum()
    if abs(total - 1.0) > SUM_TOL:
        raise InvalidInput(f"{name} sums to {total!r}, expected 1")
    return arr


def _same_shape(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {q.shape}")


def normalize_softmax(raw) -> np.ndarray:
    """Spatial softmax over all pixels, with max subtraction."""
    arr = _as_grid(raw)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("softmax input has non-finite values")
    z = np.exp(arr - arr.max())
    return z / z.sum()


def log_softmax(raw) -> np.ndarray:
    arr = _as_grid(raw)
    shifted = arr - arr.max()
    return shifted - np.log(np.exp(shifted).sum())


def normalize_sum(raw) -> np.ndarray:
    """Divide a nonnegative grid by its total (grayscale label files)."""
    arr = _as_grid(raw)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("map has non-finite values")
    if np.any(arr < 0):
        raise InvalidInput("sum-normalisation needs nonnegative values")
    total = arr.sum()
    if total <= 0:
        raise DegenerateMap("map has zero total mass")
    return arr / total


def kl_divergence(p, q, eps: float = EPS) -> float:
    """KL(p || q) in nats; q is floored at ``eps`` and 0 log 0 is 0."""
    p = _as_grid(p)
    q = _as_grid(q)
    _same_shape(p, q)
    mask = p > 0
    pm = p[mask]
    return float(np.sum(pm * (np.log(pm) - np.log(np.maximum(q[mask], eps)))))


def entropy(p) -> float:
    p = _as_grid(p)
    pm = p[p > 0]
    return float(-np.sum(pm * np.log(pm)))


def cross_entropy(p, q, eps: float = EPS) -> float:
    """-sum p log q, with the same floor as :func:`kl_divergence`."""
    p = _as_grid(p)
    q = _as_grid(q)
    _same_shape(p, q)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(np.maximum(q[mask], eps))))


def pearson_cc(p, q) -> float:
    """Pearson correlation of the flattened pixel vectors."""
    p = _as_grid(p).ravel()
    q = _as_grid(q).ravel()
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {q.shape}")
    pc = p - p.mean()
    qc = q - q.mean()
    sp = np.sqrt(np.dot(pc, pc))
    sq = np.sqrt(np.dot(qc, qc))
    if sp == 0 or sq == 0:
        raise DegenerateMap("correlation undefined for a constant map")
    return float(np.clip(np.dot(pc, qc) / (sp * sq), -1.0, 1.0))


def bilinear_resize(arr, height: int, width: int) -> np.ndarray:
    """Bilinear resample of the two leading axes (pixel-centre aligned).

    Trailing axes (e.g. colour channels) are carried along unchanged.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if height < 1 or width < 1:
        raise InvalidInput(f"target size must be >= 1, got {height}x{width}")
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return arr.copy()

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    extra = (1,) * (arr.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bottom = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def resize_map(p, width: int, height: int) -> np.ndarray:
    """Bilinear resample then renormalise to unit mass."""
    p = _as_grid(p)
    if p.shape == (height, width):
        return p.copy()
    return normalize_sum(bilinear_resize(p, height, width))


def mean_map(maps: Sequence) -> np.ndarray:
    if len(maps) == 0:
        raise InvalidInput("mean_map needs at least one map")
    grids = [_as_grid(m) for m in maps]
    for g in grids[1:]:
        _same_shape(grids[0], g)
    return np.mean(np.stack(grids), axis=0)


def centered_gaussian(height: int, width: int, sigma: float = 0.2) -> np.ndarray:
    """Isotropic Gaussian centred in the frame; sigma is a fraction of the
    larger side. Stand-in for a dataset-average map."""
    if sigma <= 0:
        raise InvalidInput("sigma must be positive")
    ys = (np.arange(height) + 0.5) - height / 2
    xs = (np.arange(width) + 0.5) - width / 2
    s = sigma * max(height, width)
    g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * s * s))
    return g / g.sum()
