"""Z-score deviation loss over the two scoring heads.

Scores are standardized against a Gaussian reference set drawn fresh each
iteration; normal samples are pulled to the reference mean while anomalies
are pushed past a fixed margin above it, on both heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

PRIOR_REFRESH_MODES = ("iteration", "epoch")


@dataclass
class DeviationConfig:
    """Margin and Gaussian-reference parameters for the deviation loss.

    prior_mean / prior_std hold the reference statistics currently in
    effect; training refreshes them from fresh draws per `prior_refresh`.
    """

    margin: float = 5.0
    prior_count: int = 5000
    prior_mean: float = 0.0
    prior_std: float = 1.0
    prior_refresh: str = "iteration"

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.prior_count < 2:
            raise ConfigError(f"prior_count must be >= 2, got {self.prior_count}")
        if self.prior_std <= 0:
            raise ConfigError(f"prior_std must be positive, got {self.prior_std}")
        if self.prior_refresh not in PRIOR_REFRESH_MODES:
            raise ConfigError(f"prior_refresh must be one of {PRIOR_REFRESH_MODES}")


def prior_stats(rng, count):
    """Sample mean and population std of `count` standard-normal draws."""
    if count < 2:
        raise ConfigError(f"prior_stats needs count >= 2, got {count}")
    draws = np.asarray(rng.standard_normal(count), dtype=np.float64)
    return float(draws.mean()), float(draws.std())


def deviation(phi, prior_mean, prior_std):
    """Standardized score (phi - mean) / std; phi may be a float or Tensor."""
    if prior_std <= 0:
        raise ConfigError(f"prior_std must be positive, got {prior_std}")
    if isinstance(phi, T.Tensor):
        return T.mul(T.sub(phi, float(prior_mean)), 1.0 / float(prior_std))
    return (float(phi) - float(prior_mean)) / float(prior_std)


def deviation_loss(dev1, dev2, y, margin):
    """Two-head deviation loss: sum over heads of
    (1 - y) * |dev| + y * max(0, margin - dev).

    Works elementwise: scalar devs with y in {0, 1}, or [N] tensors with a
    matching 0/1 label vector. Tensor inputs stay differentiable.
    """
    margin = float(margin)
    if isinstance(dev1, T.Tensor) or isinstance(dev2, T.Tensor):
        y_arr = np.asarray(y, dtype=np.float64)
        total = None
        for dev in (dev1, dev2):
            normal_term = T.mul(T.abs_(dev), 1.0 - y_arr)
            anomaly_term = T.mul(T.max_with_scalar(T.sub(margin, dev), 0.0), y_arr)
            term = T.add(normal_term, anomaly_term)
            total = term if total is None else T.add(total, term)
        return total
    y_arr = np.asarray(y, dtype=np.float64)
    total = 0.0
    for dev in (dev1, dev2):
        total = total + (1.0 - y_arr) * abs(dev) + y_arr * max(0.0, margin - dev)
    return float(total)
