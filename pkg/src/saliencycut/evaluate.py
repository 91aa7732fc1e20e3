"""AUC-ROC metric and the general / hard / anomaly-free protocols.

A protocol run draws a split, trains a model, scores the held-out set, and
repeats over independent trial seeds; reported AUC is the probability that
a random anomaly outscores a random normal, ties counted one half.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, MetricError
from .model import inference_heads
from .train import train

SETTINGS = ("general", "hard", "anomaly_free")
BUDGETS = (0, 1, 10)
NORMAL_TRAIN_FRACTION = 0.7


@dataclass
class ProtocolSpec:
    """Which open-set protocol to run and with how many seen anomalies."""

    setting: str = "general"
    budget: int = 10
    seen_type: str = None
    trials: int = 3
    seeds: tuple = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got '{self.setting}'")
        if self.budget not in BUDGETS:
            raise ConfigError(f"budget must be one of {BUDGETS}, got {self.budget}")
        if self.setting == "anomaly_free" and self.budget != 0:
            raise ConfigError("anomaly_free setting requires budget 0")
        if self.setting != "anomaly_free" and self.budget == 0:
            raise ConfigError(f"{self.setting} setting requires a nonzero budget")
        if self.setting == "hard" and not self.seen_type:
            raise ConfigError("hard setting requires seen_type")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


@dataclass
class EvalReport:
    setting: str
    budget: int
    seen_type: str
    seeds: list
    trial_aucs: list
    mean_auc: float
    std_auc: float
    score_dumps: list = field(default_factory=list)
    manifests: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "setting": self.setting,
            "budget": self.budget,
            "seen_type": self.seen_type,
            "seeds": list(self.seeds),
            "trial_aucs": self.trial_aucs,
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "score_dumps": self.score_dumps,
            "manifests": self.manifests,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def auc_roc(scores, labels):
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0 or pos + neg != labels.size:
        raise MetricError(f"auc_roc needs both classes, got {pos} pos / {neg} neg")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[np.asarray(labels) == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def build_split(dataset, spec, rng):
    """Draw (train, test) datasets for a protocol; never leaks ids across.

    Normals split 70/30. General: `budget` anomalies drawn uniformly from
    the pooled anomaly set go to train, the rest to test. Hard: `budget`
    anomalies of the seen type go to train and the test anomalies are the
    other types only. Anomaly-free: no training anomalies.
    """
    normals = list(dataset.normals)
    perm = rng.permutation(len(normals))
    n_train = int(len(normals) * NORMAL_TRAIN_FRACTION)
    train_normals = [normals[i] for i in perm[:n_train]]
    test_normals = [normals[i] for i in perm[n_train:]]

    anomalies = list(dataset.anomalies)
    if spec.setting == "anomaly_free":
        train_anoms, test_anoms = [], anomalies
    elif spec.setting == "general":
        if len(anomalies) < spec.budget:
            raise DataError(
                f"general setting needs {spec.budget} anomalies, have {len(anomalies)}"
            )
        aperm = rng.permutation(len(anomalies))
        train_anoms = [anomalies[i] for i in aperm[: spec.budget]]
        test_anoms = [anomalies[i] for i in aperm[spec.budget :]]
    else:  # hard
        seen = [s for s in anomalies if s.type_tag == spec.seen_type]
        unseen = [s for s in anomalies if s.type_tag != spec.seen_type]
        if len(seen) < spec.budget:
            raise DataError(
                f"hard setting needs {spec.budget} '{spec.seen_type}' anomalies, "
                f"have {len(seen)}"
            )
        sperm = rng.permutation(len(seen))
        train_anoms = [seen[i] for i in sperm[: spec.budget]]
        test_anoms = unseen

    train_ds = Dataset(train_normals, train_anoms)
    test_ds = Dataset(test_normals, test_anoms)
    train_ids = {s.id for s in train_ds.all_samples}
    test_ids = {s.id for s in test_ds.all_samples}
    leaked = train_ids & test_ids
    if leaked:
        raise DataError(f"split leaked {len(leaked)} ids into both sides")
    return train_ds, test_ds


def default_scorer(state, sample):
    """(phi1, phi2, score) at deterministic inference origins."""
    return inference_heads(sample.image, state)


def _dump_scores(path, test_ds, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "type_tag", "phi1", "phi2", "score"])
        for sample, (phi1, phi2, score) in zip(test_ds.all_samples, rows):
            writer.writerow(
                [sample.id, sample.label, sample.type_tag,
                 repr(phi1), repr(phi2), repr(score)]
            )


def _write_manifest(path, samples):
    Path(path).write_text("".join(s.id + "\n" for s in samples))


def run_protocol(dataset, spec, train_cfg, dev_cfg=None, sal_cfg=None, arch=None,
                 out_dir=None, score_fn=None):
    """Run `spec` over its trial seeds; returns an EvalReport.

    Each trial reseeds the split, model init, patch origins, and prior draws
    together from one trial seed. score_fn(state, sample) -> (phi1, phi2,
    score) replaces the trained-model scorer when given (plumbing tests).
    """
    seeds = list(spec.seeds) if spec.seeds else [train_cfg.seed + t for t in range(spec.trials)]
    scorer = score_fn or default_scorer
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    trial_aucs = []
    dumps = []
    manifests = {}
    for trial, seed in enumerate(seeds):
        split_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        train_ds, test_ds = build_split(dataset, spec, split_rng)
        cfg = replace(train_cfg, seed=seed)
        state, _ = train(train_ds, cfg, dev_cfg=dev_cfg, sal_cfg=sal_cfg, arch=arch)
        rows = [scorer(state, s) for s in test_ds.all_samples]
        auc = auc_roc([r[2] for r in rows], [s.label for s in test_ds.all_samples])
        trial_aucs.append(auc)
        if out:
            dump_path = out / f"scores_trial{trial}.csv"
            _dump_scores(dump_path, test_ds, rows)
            dumps.append(str(dump_path))
            for name, samples in (("train", train_ds.all_samples),
                                  ("test", test_ds.all_samples)):
                mpath = out / f"{name}_trial{trial}.txt"
                _write_manifest(mpath, samples)
                manifests[f"{name}_trial{trial}"] = str(mpath)

    aucs = np.array(trial_aucs)
    report = EvalReport(
        setting=spec.setting,
        budget=spec.budget,
        seen_type=spec.seen_type,
        seeds=seeds,
        trial_aucs=[float(a) for a in trial_aucs],
        mean_auc=float(aucs.mean()),
        std_auc=float(aucs.std()),  # population denominator over trials
        score_dumps=dumps,
        manifests=manifests,
    )
    if out:
        report.write_json(out / "report.json")
    return report
