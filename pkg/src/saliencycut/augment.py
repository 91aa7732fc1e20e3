"""Pseudo-anomaly generation: saliency-guided cut-paste and a random baseline.

A pseudo sample keeps the non-salient region of one normal image in place
and fills the salient region with pixels from a second normal image; every
output pixel comes verbatim from one of the two sources.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DataError, DimensionError
from .loss import prior_stats
from .saliency import saliency_mask_for

logger = logging.getLogger(__name__)

REJECT_BAND = (0.01, 0.99)  # accepted non-salient fraction of a source mask
MAX_RETRIES = 10


@dataclass
class Provenance:
    source_a: str
    source_b: str
    salient_fraction: float
    rect: tuple = None  # (row0, col0, height, width) for the cut-paste baseline


@dataclass
class PseudoSample:
    """Composite image labeled anomalous, with its source bookkeeping."""

    image: np.ndarray
    provenance: Provenance
    label: int = 1
    type_tag: str = "pseudo"

    @property
    def id(self):
        return f"pseudo({self.provenance.source_a}|{self.provenance.source_b})"


def _check_pair(x_a, x_b, op):
    if x_a.label != 0 or x_b.label != 0:
        raise ContractError(f"{op} needs normal sources, got labels "
                            f"{x_a.label}/{x_b.label}")
    if x_a.image.shape != x_b.image.shape:
        raise DimensionError(f"{op} source shapes differ: "
                             f"{x_a.image.shape} vs {x_b.image.shape}")


def saliency_cut(x_a, mask, x_b):
    """Composite: keep x_a where the mask bit is 0, take x_b where it is 1."""
    _check_pair(x_a, x_b, "saliency_cut")
    if mask.bits.shape != x_a.image.shape[1:]:
        raise DimensionError(f"mask shape {mask.bits.shape} does not match image "
                             f"{x_a.image.shape}")
    image = np.where(mask.bits[None, :, :] == 1, x_b.image, x_a.image)
    return PseudoSample(image, Provenance(x_a.id, x_b.id, mask.salient_fraction))


def random_cut_paste(x_a, x_b, rng, area_range=(0.02, 0.3)):
    """Unguided baseline: paste a random rectangle of x_a into x_b.

    The rectangle's area fraction is uniform over area_range (forcing the
    range to (1.0, 1.0) reproduces x_a exactly), its aspect log-uniform in
    [1/2, 2], and its position uniform.
    """
    _check_pair(x_a, x_b, "random_cut_paste")
    _, h, w = x_a.image.shape
    frac = rng.uniform(*area_range)
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    rect_h = int(np.clip(round(np.sqrt(frac * h * w * aspect)), 1, h))
    rect_w = int(np.clip(round(frac * h * w / rect_h), 1, w))
    r0 = int(rng.integers(0, h - rect_h + 1))
    c0 = int(rng.integers(0, w - rect_w + 1))
    image = x_b.image.copy()
    image[:, r0 : r0 + rect_h, c0 : c0 + rect_w] = x_a.image[
        :, r0 : r0 + rect_h, c0 : c0 + rect_w
    ]
    fraction = rect_h * rect_w / (h * w)
    return PseudoSample(
        image, Provenance(x_a.id, x_b.id, fraction, rect=(r0, c0, rect_h, rect_w))
    )


def _draw_pair(n, rng):
    ia = int(rng.integers(n))
    ib = int(rng.integers(n - 1))
    if ib >= ia:
        ib += 1
    return ia, ib


def generate_pseudo_pool(dataset, state, sal_cfg, count, rng, dev_cfg):
    """Saliency-cut pseudo samples from the dataset's normals.

    Network parameters are frozen throughout (no parameter gradients are
    taken). Pairs draw uniformly without replacement within a pair; sources
    whose mask keeps less than 1% or more than 99% of the image non-salient
    are redrawn up to 10 times, then skipped with a warning. Masks reuse a
    per-source cache: they depend only on the source image and the model.
    """
    normals = dataset.normals
    if len(normals) < 2:
        raise DataError(f"pseudo pool needs >= 2 normal samples, got {len(normals)}")
    mu, sigma = prior_stats(rng, dev_cfg.prior_count)
    pool_dev_cfg = replace(dev_cfg, prior_mean=mu, prior_std=sigma)
    mask_cache = {}
    pool = []
    for _ in range(count):
        for attempt in range(MAX_RETRIES + 1):
            ia, ib = _draw_pair(len(normals), rng)
            x_a = normals[ia]
            mask = mask_cache.get(x_a.id)
            if mask is None:
                mask = saliency_mask_for(x_a, state, sal_cfg, pool_dev_cfg)
                mask_cache[x_a.id] = mask
            non_salient = 1.0 - mask.salient_fraction
            if REJECT_BAND[0] <= non_salient <= REJECT_BAND[1]:
                pool.append(saliency_cut(x_a, mask, normals[ib]))
                break
        else:
            logger.warning(
                "skipped a pseudo sample after %d retries (degenerate masks)",
                MAX_RETRIES,
            )
    return pool


def generate_cutpaste_pool(dataset, count, rng, area_range=(0.02, 0.3)):
    """Random cut-paste pool with the same pair-draw semantics."""
    normals = dataset.normals
    if len(normals) < 2:
        raise DataError(f"pseudo pool needs >= 2 normal samples, got {len(normals)}")
    pool = []
    for _ in range(count):
        ia, ib = _draw_pair(len(normals), rng)
        pool.append(random_cut_paste(normals[ia], normals[ib], rng, area_range))
    return pool
