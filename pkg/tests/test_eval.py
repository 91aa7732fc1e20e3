"""AUC metric, protocol splits, and the trial harness."""

import numpy as np
import pytest

from oracles import auc_pairwise

from saliencycut import evaluate as E
from saliencycut import model as M
from saliencycut.data import Dataset, Sample
from saliencycut.errors import ConfigError, DataError, MetricError
from saliencycut.loss import DeviationConfig
from saliencycut.saliency import SaliencyConfig
from saliencycut.train import TrainConfig

ARCH = M.ArchConfig(input_size=16, in_channels=2, channels=(4, 6), mlp_hidden=8)


def make_dataset(seed, n_normal=20, per_type=(6, 6, 6), size=16, channels=2,
                 tags=("blotch", "scratch", "hole")):
    rng = np.random.default_rng(seed)
    normals = [
        Sample(rng.uniform(0, 1, (channels, size, size)), 0, "normal", f"n{i}")
        for i in range(n_normal)
    ]
    anomalies = []
    for tag, count in zip(tags, per_type):
        anomalies.extend(
            Sample(rng.uniform(0, 1, (channels, size, size)), 1, tag, f"{tag}{i}")
            for i in range(count)
        )
    return Dataset(normals, anomalies)


class TestAucRoc:
    def test_perfect_separation(self):
        assert E.auc_roc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0

    def test_inverted_labels(self):
        assert E.auc_roc([1, 2, 3, 4], [1, 1, 0, 0]) == 0.0

    def test_all_ties(self):
        assert E.auc_roc([2, 2, 2, 2], [0, 1, 0, 1]) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(4, 30))
            scores = rng.choice([-1.0, 0.25, 0.5, 1.5, 2.0], size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            got = E.auc_roc(scores, labels)
            assert abs(got - auc_pairwise(scores, labels)) <= 1e-12

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=60)
        labels = rng.integers(0, 2, size=60)
        labels[0], labels[1] = 0, 1
        base = E.auc_roc(scores, labels)
        assert E.auc_roc(3.0 * scores + 2.0, labels) == base
        assert E.auc_roc(scores**3, labels) == base
        assert E.auc_roc(np.tanh(scores), labels) == base

    def test_swapping_pair_across_classes_never_decreases(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            scores = rng.normal(size=20)
            labels = np.array([0] * 10 + [1] * 10)
            base = E.auc_roc(scores, labels)
            # find a normal outscoring an anomaly and swap their scores
            normals = np.flatnonzero(labels == 0)
            anoms = np.flatnonzero(labels == 1)
            i = normals[np.argmax(scores[normals])]
            j = anoms[np.argmin(scores[anoms])]
            if scores[i] <= scores[j]:
                continue
            swapped = scores.copy()
            swapped[i], swapped[j] = swapped[j], swapped[i]
            assert E.auc_roc(swapped, labels) >= base

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            E.auc_roc([1.0, 2.0], [1, 1])


class TestBuildSplit:
    def test_hard_setting_rules(self):
        ds = make_dataset(3)
        spec = E.ProtocolSpec(setting="hard", budget=1, seen_type="blotch")
        train, test = E.build_split(ds, spec, np.random.default_rng(4))
        train_tags = [s.type_tag for s in train.anomalies]
        assert train_tags == ["blotch"]
        assert "blotch" not in {s.type_tag for s in test.anomalies}
        assert {s.type_tag for s in test.anomalies} == {"scratch", "hole"}

    def test_anomaly_free_has_no_train_anomalies(self):
        ds = make_dataset(5)
        spec = E.ProtocolSpec(setting="anomaly_free", budget=0)
        train, test = E.build_split(ds, spec, np.random.default_rng(6))
        assert train.anomalies == []
        assert len(test.anomalies) == 18

    def test_normals_split_seventy_thirty(self):
        ds = make_dataset(7)
        spec = E.ProtocolSpec(setting="general", budget=10)
        train, test = E.build_split(ds, spec, np.random.default_rng(8))
        assert len(train.normals) == 14 and len(test.normals) == 6

    def test_general_budget_covers_types(self):
        ds = make_dataset(9, per_type=(20, 20), tags=("blotch", "scratch"))
        spec = E.ProtocolSpec(setting="general", budget=10)
        hits = 0
        for seed in range(100):
            train, _ = E.build_split(ds, spec, np.random.default_rng(seed))
            assert len(train.anomalies) == 10
            if len({s.type_tag for s in train.anomalies}) == 2:
                hits += 1
        assert hits > 95

    def test_no_id_leak_across_many_splits(self):
        ds = make_dataset(10)
        spec = E.ProtocolSpec(setting="general", budget=1)
        for seed in range(20):
            train, test = E.build_split(ds, spec, np.random.default_rng(seed))
            assert not ({s.id for s in train.all_samples}
                        & {s.id for s in test.all_samples})

    def test_insufficient_seen_type_rejected(self):
        ds = make_dataset(11, per_type=(2, 6, 6))
        spec = E.ProtocolSpec(setting="hard", budget=10, seen_type="blotch")
        with pytest.raises(DataError):
            E.build_split(ds, spec, np.random.default_rng(12))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            E.ProtocolSpec(setting="weird")
        with pytest.raises(ConfigError):
            E.ProtocolSpec(setting="anomaly_free", budget=10)
        with pytest.raises(ConfigError):
            E.ProtocolSpec(setting="hard", budget=1)
        with pytest.raises(ConfigError):
            E.ProtocolSpec(setting="general", budget=3)


def fast_cfg(**kw):
    base = dict(epochs=1, iterations_per_epoch=1, batch_size=8, seed=5,
                augmentation="none")
    base.update(kw)
    return TrainConfig(**base)


class TestRunProtocol:
    def test_fixed_seed_reproduces_auc(self, tmp_path):
        ds = make_dataset(13)
        spec = E.ProtocolSpec(setting="general", budget=1, trials=1, seeds=(9,))
        kwargs = dict(dev_cfg=DeviationConfig(prior_count=50),
                      sal_cfg=SaliencyConfig(grid_size=4), arch=ARCH)
        r1 = E.run_protocol(ds, spec, fast_cfg(), out_dir=tmp_path / "a", **kwargs)
        r2 = E.run_protocol(ds, spec, fast_cfg(), out_dir=tmp_path / "b", **kwargs)
        assert r1.trial_aucs == r2.trial_aucs
        dump1 = (tmp_path / "a" / "scores_trial0.csv").read_bytes()
        dump2 = (tmp_path / "b" / "scores_trial0.csv").read_bytes()
        assert dump1 == dump2

    def test_oracle_scorer_gives_perfect_auc(self):
        ds = make_dataset(14)
        spec = E.ProtocolSpec(setting="general", budget=1, trials=2)
        report = E.run_protocol(
            ds, spec, fast_cfg(epochs=0), arch=ARCH,
            score_fn=lambda state, s: (0.0, float(s.label), float(s.label)),
        )
        assert report.trial_aucs == [1.0, 1.0]
        assert report.mean_auc == 1.0 and report.std_auc == 0.0

    def test_random_scorer_stays_near_half(self):
        # Var(AUC) = (n+m+1)/(12nm) -> sigma ~ 0.018 at n=m=500; 0.1 is 5.4 sigma
        ds = make_dataset(15, n_normal=667, per_type=(500,), size=4, channels=1,
                          tags=("blotch",))
        for seed in range(50):
            rng = np.random.default_rng(10_000 + seed)
            spec = E.ProtocolSpec(setting="general", budget=10, trials=1,
                                  seeds=(seed,))
            report = E.run_protocol(
                ds, spec,
                fast_cfg(epochs=0),
                arch=M.ArchConfig(input_size=4, in_channels=1, channels=(2,),
                                  mlp_hidden=2),
                score_fn=lambda state, s: (0.0, 0.0, float(rng.normal())),
            )
            assert 0.4 < report.mean_auc < 0.6

    def test_report_json_round_trip(self, tmp_path):
        ds = make_dataset(16)
        spec = E.ProtocolSpec(setting="anomaly_free", budget=0, trials=1, seeds=(3,))
        report = E.run_protocol(
            ds, spec, fast_cfg(augmentation="random_cut_paste"),
            dev_cfg=DeviationConfig(prior_count=50),
            sal_cfg=SaliencyConfig(grid_size=4), arch=ARCH,
            out_dir=tmp_path,
        )
        import json

        loaded = json.loads((tmp_path / "report.json").read_text())
        assert loaded["trial_aucs"] == report.trial_aucs
        assert loaded["setting"] == "anomaly_free"
        train_ids = (tmp_path / "train_trial0.txt").read_text().split()
        test_ids = (tmp_path / "test_trial0.txt").read_text().split()
        assert not set(train_ids) & set(test_ids)

    def test_std_uses_population_denominator(self):
        ds = make_dataset(17)
        spec = E.ProtocolSpec(setting="general", budget=1, trials=2)
        trial_of_state = {}

        def scorer(state, s):
            idx = trial_of_state.setdefault(id(state), len(trial_of_state))
            score = float(s.label) if idx == 0 else -float(s.label)
            return (0.0, score, score)

        report = E.run_protocol(ds, spec, fast_cfg(epochs=0), arch=ARCH,
                                score_fn=scorer)
        assert report.trial_aucs == [1.0, 0.0]
        assert report.mean_auc == 0.5
        assert report.std_auc == 0.5  # population denominator (N), not N-1
