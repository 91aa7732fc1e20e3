"""Deviation-loss training over normal, seen-anomaly, and pseudo samples.

Each epoch regenerates the pseudo pool with frozen parameters, then runs a
fixed number of Adam steps on stratified batches: half normals, half
anomalies (seen and pseudo split evenly, pseudo taking any odd remainder).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import generate_cutpaste_pool, generate_pseudo_pool
from .errors import ConfigError, DataError, NumericsError, TrainingDiverged
from .loss import DeviationConfig, deviation, deviation_loss, prior_stats
from .model import ArchConfig, bind_params, draw_origins, forward_scores, init_model
from .saliency import SaliencyConfig

logger = logging.getLogger(__name__)

AUGMENTATION_MODES = ("saliencycut", "random_cut_paste", "none")
POOL_CAP = 512

LOG_COLUMNS = ("epoch", "iteration", "loss", "mu_R", "sigma_R", "seed")


@dataclass
class TrainConfig:
    epochs: int = 30
    iterations_per_epoch: int = 20
    batch_size: int = 48
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    augmentation: str = "saliencycut"

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even, got {self.batch_size}")
        if self.epochs < 0 or self.iterations_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and iterations_per_epoch >= 1")
        if self.augmentation not in AUGMENTATION_MODES:
            raise ConfigError(
                f"augmentation must be one of {AUGMENTATION_MODES}, got "
                f"'{self.augmentation}'"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # tuples matching LOG_COLUMNS
    val_auc: list = field(default_factory=list)  # (epoch, auc) when validating

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            writer.writerows(self.rows)


class Adam:
    """Standard Adam with optional L2 weight decay folded into the gradient."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, value in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * value
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self._m[name] = m
                self._v[name] = np.zeros_like(value)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] = value - step


def compose_batch(dataset, pseudo_pool, batch_size, rng):
    """Stratified batch: half normals; the anomaly half splits evenly between
    seen and pseudo anomalies (odd remainder to pseudo); a missing stratum
    cedes its share to the other. Draws are with replacement per stratum.

    Returns a list of (sample, label) pairs.
    """
    if batch_size % 2:
        raise ConfigError(f"batch_size must be even, got {batch_size}")
    normals = dataset.normals
    if not normals:
        raise DataError("compose_batch needs at least one normal sample")
    seen = dataset.anomalies
    pseudo_pool = pseudo_pool or []
    n_normal = batch_size // 2
    anomaly_half = batch_size - n_normal
    if seen and pseudo_pool:
        n_seen = anomaly_half // 2
        n_pseudo = anomaly_half - n_seen
    elif seen:
        n_seen, n_pseudo = anomaly_half, 0
    elif pseudo_pool:
        n_seen, n_pseudo = 0, anomaly_half
    else:
        raise DataError("no seen anomalies and no pseudo pool to fill the batch")
    batch = [(normals[i], 0) for i in rng.integers(len(normals), size=n_normal)]
    if n_seen:
        batch.extend((seen[i], 1) for i in rng.integers(len(seen), size=n_seen))
    if n_pseudo:
        batch.extend(
            (pseudo_pool[i], 1) for i in rng.integers(len(pseudo_pool), size=n_pseudo)
        )
    return batch


def _regenerate_pool(dataset, state, cfg, sal_cfg, dev_cfg, epoch):
    count = min(len(dataset.normals), POOL_CAP)
    pool_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch]))
    if cfg.augmentation == "saliencycut":
        return generate_pseudo_pool(dataset, state, sal_cfg, count, pool_rng, dev_cfg)
    if cfg.augmentation == "random_cut_paste":
        return generate_cutpaste_pool(dataset, count, pool_rng)
    return []


def train(dataset, cfg, dev_cfg=None, sal_cfg=None, arch=None, val_set=None,
          score_fn=None):
    """Train a fresh model on `dataset`; returns (ModelState, TrainLog).

    Fully deterministic in (dataset, configs, seed). When `val_set` is given,
    each epoch ends with an AUC pass over it using `score_fn` (defaults to
    the inference score).
    """
    dev_cfg = dev_cfg or DeviationConfig()
    sal_cfg = sal_cfg or SaliencyConfig()
    arch = arch or ArchConfig()

    state = init_model(arch, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    optimizer = Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    log = TrainLog()
    mu, sigma = dev_cfg.prior_mean, dev_cfg.prior_std

    for epoch in range(cfg.epochs):
        if cfg.augmentation != "none":
            pool = _regenerate_pool(dataset, state, cfg, sal_cfg, dev_cfg, epoch)
        else:
            pool = []
        for iteration in range(cfg.iterations_per_epoch):
            it_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 2, epoch, iteration])
            )
            batch = compose_batch(dataset, pool, cfg.batch_size, it_rng)
            if dev_cfg.prior_refresh == "iteration" or iteration == 0:
                mu, sigma = prior_stats(it_rng, dev_cfg.prior_count)
            images = np.stack([s.image for s, _ in batch])
            labels = np.array([y for _, y in batch], dtype=np.float64)
            origins = draw_origins(arch, it_rng, len(batch))

            try:
                graph = T.Graph()
                params = bind_params(graph, state, requires_grad=True)
                phi1, phi2 = forward_scores(graph, params, arch, images, origins)
                dev1 = deviation(phi1, mu, sigma)
                dev2 = deviation(phi2, mu, sigma)
                loss = T.mean(deviation_loss(dev1, dev2, labels, dev_cfg.margin))
                grads = T.backward(loss)
            except NumericsError as exc:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch} iteration {iteration}: {exc}"
                ) from exc
            grad_arrays = {
                name: grads[leaf.node_id].data for name, leaf in params.items()
            }
            optimizer.step(state.params, grad_arrays)
            log.rows.append(
                (epoch, iteration, float(loss.data), mu, sigma, cfg.seed)
            )
        if val_set is not None:
            auc = _validation_auc(state, val_set, score_fn)
            log.val_auc.append((epoch, auc))
            logger.info("epoch %d validation AUC %.4f", epoch, auc)
    return state, log


def _validation_auc(state, val_set, score_fn):
    from .evaluate import auc_roc
    from .model import inference_score

    fn = score_fn or (lambda st, sample: inference_score(sample.image, st))
    samples = val_set.all_samples
    scores = [fn(state, s) for s in samples]
    return auc_roc(scores, [s.label for s in samples])
