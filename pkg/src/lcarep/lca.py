"""Local concepts accumulation (LCA) pooling.

The layer averages a feature map over every rectangular window larger than
1x1 at stride 1, then averages those local-concept vectors into one
embedding. Because every step is an average, the whole layer is a fixed
linear map of the input; :func:`lca_coefficient_map` gives it in closed form
and is what the backward pass uses.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .tensor import sat_build

FLAT = "flat"
PER_SIZE = "per_size"
WEIGHTINGS = (FLAT, PER_SIZE)


@dataclass(frozen=True)
class LcaConfig:
    """``weighting="flat"`` counts every window once; ``"per_size"`` averages
    positions within a size first, then averages over sizes."""

    include_1x1: bool = False
    weighting: str = FLAT

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise InvalidArgumentError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")


def _sizes(h: int, w: int, cfg: LcaConfig):
    for wh in range(1, h + 1):
        for ww in range(1, w + 1):
            if wh * ww == 1 and not cfg.include_1x1:
                continue
            yield wh, ww


def lca_window_count(h: int, w: int, cfg: LcaConfig = LcaConfig()) -> int:
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"map must be at least 1x1, got {h}x{w}")
    n = (h * (h + 1) // 2) * (w * (w + 1) // 2)
    return n if cfg.include_1x1 else n - h * w


def _check_admissible(h: int, w: int, cfg: LcaConfig) -> None:
    if lca_window_count(h, w, cfg) == 0:
        raise InvalidArgumentError(f"no admissible LCA windows on a {h}x{w} map with include_1x1=False")


def _size_weight(h: int, w: int, wh: int, ww: int, n_windows: int, n_sizes: int, cfg: LcaConfig) -> float:
    """Weight of one window of size ``wh x ww`` in the final average."""
    if cfg.weighting == FLAT:
        return 1.0 / n_windows
    return 1.0 / (n_sizes * (h - wh + 1) * (w - ww + 1))


@functools.lru_cache(maxsize=256)
def _corner_weights(h: int, w: int, cfg: LcaConfig) -> np.ndarray:
    """Weights on the ``(H + 1, W + 1)`` summed-area table such that
    ``sum(weights * sat) == lca_forward``.

    Each window contributes its four-corner identity scaled by weight/area;
    accumulating those once per shape turns every forward call into one
    table build plus one weighted reduction.
    """
    _check_admissible(h, w, cfg)
    sizes = list(_sizes(h, w, cfg))
    n = lca_window_count(h, w, cfg)
    corners = np.zeros((h + 1, w + 1), dtype=np.float64)
    for wh, ww in sizes:
        t, l = np.meshgrid(np.arange(h - wh + 1), np.arange(w - ww + 1), indexing="ij")
        c = _size_weight(h, w, wh, ww, n, len(sizes), cfg) / (wh * ww)
        np.add.at(corners, (t + wh, l + ww), c)
        np.add.at(corners, (t, l + ww), -c)
        np.add.at(corners, (t + wh, l), -c)
        np.add.at(corners, (t, l), c)
    corners.flags.writeable = False
    return corners


def lca_forward(fmap: np.ndarray, cfg: LcaConfig = LcaConfig()) -> np.ndarray:
    """Pool an ``(H, W, C)`` map (or ``(N, H, W, C)`` batch) to a length-C embedding."""
    fmap = np.asarray(fmap)
    if fmap.ndim not in (3, 4):
        raise InvalidArgumentError(f"expected (H, W, C) or (N, H, W, C), got shape {fmap.shape}")
    h, w = fmap.shape[-3:-1]
    corners = _corner_weights(h, w, cfg)
    sat = sat_build(fmap).values
    out = np.tensordot(sat, corners, axes=([-3, -2], [0, 1]))
    return out.astype(fmap.dtype if fmap.dtype.kind == "f" else np.float64)


@functools.lru_cache(maxsize=256)
def _coefficient_map(h: int, w: int, cfg: LcaConfig) -> np.ndarray:
    _check_admissible(h, w, cfg)
    sizes = list(_sizes(h, w, cfg))
    n = lca_window_count(h, w, cfg)
    rows, cols = np.arange(h), np.arange(w)
    coeff = np.zeros((h, w), dtype=np.float64)
    for wh, ww in sizes:
        # number of windows of this size covering each row / column index
        row_cover = np.minimum(rows, h - wh) - np.maximum(rows - wh + 1, 0) + 1
        col_cover = np.minimum(cols, w - ww) - np.maximum(cols - ww + 1, 0) + 1
        c = _size_weight(h, w, wh, ww, n, len(sizes), cfg) / (wh * ww)
        coeff += c * np.outer(row_cover, col_cover)
    coeff.flags.writeable = False
    return coeff


def lca_coefficient_map(h: int, w: int, cfg: LcaConfig = LcaConfig()) -> np.ndarray:
    """Per-cell weight of the layer: ``lca_forward(x) == sum_ij coeff[i, j] * x[i, j, :]``.

    The returned array is cached and read-only.
    """
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"map must be at least 1x1, got {h}x{w}")
    return _coefficient_map(int(h), int(w), cfg)


def lca_backward(grad_out: np.ndarray, h: int, w: int, cfg: LcaConfig = LcaConfig()) -> np.ndarray:
    """Adjoint of :func:`lca_forward`: broadcast ``grad_out`` by the coefficient map."""
    grad_out = np.asarray(grad_out)
    coeff = lca_coefficient_map(h, w, cfg)
    dtype = grad_out.dtype if grad_out.dtype.kind == "f" else np.float64
    grad = coeff[:, :, None] * grad_out[..., None, None, :]
    return grad.astype(dtype)


def lca_forward_bruteforce(fmap: np.ndarray, cfg: LcaConfig = LcaConfig()) -> np.ndarray:
    """Reference implementation: enumerate every window and sum it directly."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise InvalidArgumentError(f"expected (H, W, C), got shape {fmap.shape}")
    h, w, c = fmap.shape
    _check_admissible(h, w, cfg)
    size_means = []
    for wh, ww in _sizes(h, w, cfg):
        means = []
        for top in range(h - wh + 1):
            for left in range(w - ww + 1):
                means.append(fmap[top:top + wh, left:left + ww].sum(axis=(0, 1)) / (wh * ww))
        size_means.append(means)
    if cfg.weighting == FLAT:
        every = [m for means in size_means for m in means]
        return np.sum(every, axis=0) / len(every)
    return np.mean([np.sum(means, axis=0) / len(means) for means in size_means], axis=0)
