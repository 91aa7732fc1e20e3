"""Per-pixel saliency maps and binary masks from input gradients.

Pipeline: input gradients of the two-head deviation loss at label 0,
channelwise l2 magnitude, mean-pool to a g*g grid, B-spline smoothing back
to image resolution, min-max normalization, and thresholding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .loss import deviation, deviation_loss
from .model import bind_params, forward_scores, quadrant_origins

__all__ = [
    "SaliencyConfig",
    "SaliencyMap",
    "SaliencyMask",
    "input_gradients",
    "channel_l2",
    "downsample_to_grid",
    "bspline_kernel",
    "bspline_smooth",
    "normalize_minmax",
    "threshold_mask",
    "saliency_mask_for",
]


@dataclass(frozen=True)
class SaliencyConfig:
    """Grid size, mask threshold, and smoothing order for saliency masks."""

    grid_size: int = 18
    threshold: float = 0.4
    spline_order: int = 3

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be >= 2, got {self.grid_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.spline_order < 1:
            raise ConfigError(f"spline_order must be >= 1, got {self.spline_order}")


@dataclass
class SaliencyMap:
    """Full-resolution saliency field with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.min() < 0.0 or v.max() > 1.0:
            raise ContractError("saliency map must be 2-D with values in [0, 1]")


@dataclass
class SaliencyMask:
    """Binary salient-region field plus the fraction of bits set."""

    bits: np.ndarray
    salient_fraction: float


def input_gradients(state, sample, dev_cfg):
    """Gradient of the y=0 two-head deviation loss w.r.t. each input pixel.

    The sample must be normal; network parameters are left untouched (no
    gradients are even computed for them). Patch origins use the fixed
    quadrant tiling so repeated calls are bit-identical.
    """
    if sample.label != 0:
        raise ContractError(f"input_gradients needs a normal sample, got label {sample.label}")
    graph = T.Graph()
    params = bind_params(graph, state, requires_grad=False)
    x = graph.leaf(sample.image[None], requires_grad=True)
    phi1, phi2 = forward_scores(graph, params, state.arch, x, quadrant_origins(state.arch, 1))
    dev1 = deviation(phi1, dev_cfg.prior_mean, dev_cfg.prior_std)
    dev2 = deviation(phi2, dev_cfg.prior_mean, dev_cfg.prior_std)
    loss = T.mean(deviation_loss(dev1, dev2, 0.0, dev_cfg.margin))
    grads = T.backward(loss)
    return T.Tensor(grads[x.node_id].data.reshape(sample.image.shape))


def channel_l2(grad):
    """Per-pixel l2 magnitude across input channels of a [C,H,W] gradient."""
    arr = grad.data if isinstance(grad, T.Tensor) else np.asarray(grad, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"channel_l2 expects [C,H,W], got {arr.shape}")
    return np.sqrt((arr * arr).sum(axis=0))


def _bin_edges(n, g):
    # equal bins of floor(n/g); the n % g leftover pixels widen the trailing bins
    sizes = np.full(g, n // g, dtype=np.int64)
    rem = n % g
    if rem:
        sizes[g - rem :] += 1
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return edges, sizes


def downsample_to_grid(field, g):
    """Mean-pool a [H,W] field onto a g*g grid partitioning the image."""
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape
    if g > min(h, w):
        raise ConfigError(f"grid size {g} exceeds field size {h}x{w}")
    row_edges, row_sizes = _bin_edges(h, g)
    col_edges, col_sizes = _bin_edges(w, g)
    sums = np.add.reduceat(np.add.reduceat(field, row_edges[:-1], axis=0),
                           col_edges[:-1], axis=1)
    return sums / np.outer(row_sizes, col_sizes)


def bspline_kernel(x, order):
    """Centered cardinal B-spline of the given order (box-function convolutions)."""
    x = np.asarray(x, dtype=np.float64)
    if order == 0:
        return ((x >= -0.5) & (x < 0.5)).astype(np.float64)
    n = order
    return (
        (x + (n + 1) / 2.0) * bspline_kernel(x + 0.5, n - 1)
        + ((n + 1) / 2.0 - x) * bspline_kernel(x - 0.5, n - 1)
    ) / n


def _axis_weights(n_out, g, order):
    """[n_out, g] convex-combination weights of grid nodes for each pixel.

    Grid node centers sit at (i + 0.5)/g of the field extent, pixel centers
    at (p + 0.5)/n_out; out-of-range basis indices clamp to the border node,
    and rows are renormalized to sum to one.
    """
    t = (np.arange(n_out) + 0.5) * (g / n_out) - 0.5
    weights = np.zeros((n_out, g))
    reach = int(np.ceil((order + 1) / 2.0))
    k_lo = int(np.floor(t.min())) - reach
    k_hi = int(np.ceil(t.max())) + reach
    for k in range(k_lo, k_hi + 1):
        w = bspline_kernel(t - k, order)
        weights[:, min(max(k, 0), g - 1)] += w
    return weights / weights.sum(axis=1, keepdims=True)


def bspline_smooth(grid, height, width, order=3):
    """Separable B-spline expansion of a [g,g] grid up to [height, width].

    Every output pixel is a convex combination of grid values, so the result
    stays within [grid.min(), grid.max()] and a constant grid maps to a
    constant field.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 2 or grid.shape[1] < 2:
        raise ConfigError(f"bspline_smooth needs a grid of at least 2x2, got {grid.shape}")
    if order < 1:
        raise ConfigError(f"spline order must be >= 1, got {order}")
    wy = _axis_weights(height, grid.shape[0], order)
    wx = _axis_weights(width, grid.shape[1], order)
    out = wy @ grid @ wx.T
    # trim float round-off so the convex-combination bound holds exactly
    return np.clip(out, grid.min(), grid.max())


def normalize_minmax(field):
    """Min-max normalize to [0, 1]; a constant field degenerates to all zeros."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = field.min(), field.max()
    if hi == lo:
        return SaliencyMap(np.zeros_like(field))
    return SaliencyMap((field - lo) / (hi - lo))


def threshold_mask(smap, threshold):
    """Binary mask marking pixels with saliency >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    bits = (smap.values >= threshold).astype(np.uint8)
    return SaliencyMask(bits, float(bits.mean()))


def saliency_mask_for(sample, state, cfg, dev_cfg):
    """Full Algorithm-style composition: gradients to binary saliency mask."""
    grad = input_gradients(state, sample, dev_cfg)
    field = channel_l2(grad)
    h, w = field.shape
    grid = downsample_to_grid(field, cfg.grid_size)
    smooth = bspline_smooth(grid, h, w, cfg.spline_order)
    return threshold_mask(normalize_minmax(smooth), cfg.threshold)
