"""
Unit Tests for head localization
Probes, ranking, mass-mean directions and intervention vectors
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from checkpoint import read_container, write_container
from config import ProbeConfig
from evalsuite import build_probe_examples
from exceptions import ArtifactIOException, ContractException, InputException
from localize import (
    Probe,
    ProbeExample,
    build_intervention,
    collect_activations,
    direction_sigma,
    load_interventions,
    localize,
    mass_mean_shift,
    probe_split,
    rank_heads,
    save_interventions,
    save_probe_report,
    train_probe,
)
from model import HeadId, all_heads


def blobs(rng, n, d, spread=0.1):
    labels = np.arange(n) % 2
    acts = rng.normal(scale=spread, size=(n, d))
    acts[:, 0] += np.where(labels == 1, 1.0, -1.0)
    return acts, labels


def probe(layer, head, val_acc):
    return Probe(HeadId(layer, head), np.zeros(2), 0.0, val_acc, val_acc)


class TestTrainProbe:
    """Tests for train_probe"""

    def test_separable_blobs(self, rng):
        """Blobs at +e1 and -e1 are perfectly separated"""
        acts, labels = blobs(rng, 100, 4)
        result = train_probe(acts, labels, ProbeConfig(max_steps=2000))
        assert result.val_accuracy == 1.0
        assert result.train_accuracy == 1.0
        assert result.weights[0] > 0

    def test_shuffled_labels_near_chance(self):
        """Noise labels give chance-level validation accuracy on average"""
        accs = []
        for seed in range(20):
            r = np.random.default_rng(seed)
            acts = r.normal(size=(200, 4))
            labels = r.permutation(np.arange(200) % 2)
            accs.append(train_probe(acts, labels, ProbeConfig(max_steps=300, split_seed=seed)).val_accuracy)
        assert 0.35 <= float(np.mean(accs)) <= 0.65

    def test_rescaled_features_keep_accuracy(self, rng):
        """Doubling every activation leaves validation accuracy within 0.02"""
        acts, labels = blobs(rng, 400, 4, spread=1.0)
        config = ProbeConfig(max_steps=3000, l2=0.0)
        plain = train_probe(acts, labels, config)
        doubled = train_probe(2.0 * acts, labels, config)
        assert 0.6 < plain.val_accuracy < 1.0
        assert abs(plain.val_accuracy - doubled.val_accuracy) <= 0.02

    def test_identical_features_are_chance(self):
        """Rows that carry no signal give chance-level accuracy"""
        acts = np.ones((400, 4))
        labels = np.arange(400) % 2
        result = train_probe(acts, labels, ProbeConfig(max_steps=500))
        assert abs(result.train_accuracy - 0.5) <= 0.05
        assert 0.35 <= result.val_accuracy <= 0.65

    def test_single_class_rejected(self, rng):
        """A probe needs both classes"""
        with pytest.raises(ContractException):
            train_probe(rng.normal(size=(10, 3)), np.ones(10))

    def test_shape_mismatch_rejected(self, rng):
        """Features and labels must have matching rows"""
        with pytest.raises(ContractException):
            train_probe(rng.normal(size=(10, 3)), np.arange(9) % 2)

    def test_split_is_fixed_and_disjoint(self):
        """The train/validation split is fixed by seed and disjoint"""
        train, val = probe_split(50, 0.2, seed=3)
        again_train, again_val = probe_split(50, 0.2, seed=3)
        assert np.array_equal(train, again_train) and np.array_equal(val, again_val)
        assert len(val) == 10
        assert set(train) | set(val) == set(range(50))
        assert not set(train) & set(val)


class TestRankHeads:
    """Tests for rank_heads"""

    def test_orders_by_accuracy(self):
        """Heads rank by validation accuracy, best first"""
        probes = [probe(0, 0, 0.6), probe(0, 1, 0.9), probe(1, 0, 0.7)]
        assert rank_heads(probes, 2) == [HeadId(0, 1), HeadId(1, 0)]

    def test_ties_by_layer_then_head(self):
        """Equal accuracy falls back to (layer, head) order"""
        probes = [probe(1, 1, 0.8), probe(0, 1, 0.8), probe(1, 0, 0.8), probe(0, 0, 0.5)]
        assert rank_heads(probes, 3) == [HeadId(0, 1), HeadId(1, 0), HeadId(1, 1)]

    def test_full_ranking_is_permutation(self, rng):
        """A full ranking lists every head once"""
        probes = [probe(l, h, float(rng.random())) for l in range(3) for h in range(3)]
        ranked = rank_heads(probes, len(probes))
        assert sorted(ranked) == sorted(p.head for p in probes)

    def test_k_too_large(self):
        """k larger than the head count is a contract error"""
        with pytest.raises(ContractException):
            rank_heads([probe(0, 0, 0.5)], 2)


class TestDirections:
    """Tests for mass_mean_shift, direction_sigma and build_intervention"""

    def test_mass_mean_shift_example(self):
        """Mass-mean shift of a small example"""
        pos = np.array([[1.0, 0.0], [1.0, 2.0]])
        neg = np.array([[-1.0, 0.0], [-1.0, -2.0]])
        assert np.allclose(mass_mean_shift(pos, neg), [2.0, 2.0])

    def test_mass_mean_shift_antisymmetric(self, rng):
        """Swapping classes negates the shift"""
        pos, neg = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
        assert np.allclose(mass_mean_shift(pos, neg), -mass_mean_shift(neg, pos))

    def test_mass_mean_shift_recovers_gaussian_means(self):
        """With 10^4 samples per class the shift is within 0.1 of the true mean difference"""
        r = np.random.default_rng(0)
        mu_pos, mu_neg = np.array([1.0, 0.0, -1.0, 2.0]), np.array([0.0, 0.5, 0.0, -1.0])
        pos = r.normal(size=(10_000, 4)) + mu_pos
        neg = r.normal(size=(10_000, 4)) + mu_neg
        assert np.max(np.abs(mass_mean_shift(pos, neg) - (mu_pos - mu_neg))) < 0.1

    def test_mass_mean_shift_needs_both_classes(self):
        """Both classes are needed for a shift"""
        with pytest.raises(ContractException):
            mass_mean_shift(np.zeros((0, 2)), np.ones((3, 2)))

    def test_sigma_identical_rows(self):
        """Identical rows have zero spread"""
        acts = np.tile([1.0, 2.0, 3.0], (5, 1))
        assert direction_sigma(acts, np.array([1.0, 0.0, 0.0])) == 0.0

    def test_sigma_plus_minus_one(self):
        """Projections {-1, +1} have population std 1"""
        acts = np.array([[1.0, 5.0], [-1.0, 5.0], [1.0, -5.0], [-1.0, -5.0]])
        assert direction_sigma(acts, np.array([3.0, 0.0])) == pytest.approx(1.0)

    def test_sigma_standard_normal(self, rng):
        """Standard normal activations have unit spread"""
        acts = rng.normal(size=(10_000, 3))
        assert 0.95 <= direction_sigma(acts, np.array([1.0, 1.0, 0.0])) <= 1.05

    def test_sigma_zero_direction(self, rng):
        """A zero direction has zero spread"""
        assert direction_sigma(rng.normal(size=(4, 2)), np.zeros(2)) == 0.0

    def test_sigma_needs_two_rows(self):
        """Spread needs at least two rows"""
        with pytest.raises(ContractException):
            direction_sigma(np.ones((1, 2)), np.ones(2))

    def test_build_intervention_scales_unit_direction(self):
        """u = (3, 4), sigma = 2 -> theta = (1.2, 1.6)"""
        iv = build_intervention(HeadId(0, 0), np.array([3.0, 4.0]), 2.0)
        assert np.allclose(iv.theta, [1.2, 1.6])
        assert np.linalg.norm(iv.theta) == pytest.approx(2.0)

    def test_build_intervention_zero_direction(self):
        """A zero direction gives a zero intervention"""
        iv = build_intervention(HeadId(0, 0), np.zeros(3), 2.0)
        assert np.array_equal(iv.theta, np.zeros(3))

    def test_build_intervention_unnormalized(self):
        """Interventions keep the raw direction when normalization is off"""
        iv = build_intervention(HeadId(0, 0), np.array([3.0, 4.0]), 2.0, normalize_direction=False)
        assert np.allclose(iv.theta, [6.0, 8.0])


class TestCollectAndLocalize:
    """Tests for collect_activations and localize"""

    def test_shapes_and_labels(self, tiny_task, random_weights):
        """One feature row per example per head with matching labels"""
        world = tiny_task.world
        examples = build_probe_examples(world, tiny_task.split.train, per_subject=2, seed=0)
        labeled = collect_activations(random_weights, examples)
        config = random_weights.config
        assert len(labeled) == len(examples) == 2 * 2 * len(tiny_task.split.train)
        assert set(labeled.acts) == set(all_heads(config))
        assert labeled.acts[HeadId(0, 0)].shape == (len(examples), config.head_dim)
        assert int(labeled.labels.sum()) == len(examples) // 2

    def test_identical_examples_give_identical_rows(self, random_weights):
        """Identical examples give identical feature rows"""
        ex = ProbeExample((0, 10, 1), (4, 2), (0, 11, 1), 1)
        labeled = collect_activations(random_weights, [ex, ex._replace(label=0)])
        for rows in labeled.acts.values():
            assert np.array_equal(rows[0], rows[1])

    def test_overlong_example_rejected(self, random_weights):
        """Examples longer than the context are input errors"""
        ex = ProbeExample(tuple([0] * 10), (4, 2), tuple([0] * 10), 1)
        with pytest.raises(InputException):
            collect_activations(random_weights, [ex])

    def test_empty_rejected(self, random_weights):
        """No examples is a contract error"""
        with pytest.raises(ContractException):
            collect_activations(random_weights, [])

    def test_localize_covers_every_head(self, tiny_task, tiny_weights):
        """Localization probes every head and ranks them"""
        examples = build_probe_examples(tiny_task.world, tiny_task.split.train, per_subject=2, seed=0)
        result = localize(tiny_weights, examples, ProbeConfig(max_steps=200))
        heads = all_heads(tiny_weights.config)
        assert sorted(result.ranked) == sorted(heads)
        assert set(result.interventions) == set(heads)
        assert len(result.top(2)) == 2
        frame = result.report_frame()
        assert list(frame.columns) == ["layer", "head", "train_acc", "val_acc", "sigma", "theta_norm"]
        assert len(frame) == len(heads)
        assert np.allclose(frame["theta_norm"], frame["sigma"])


class TestPersistence:
    """Tests for saving and loading localizations"""

    def test_round_trip(self, tmp_path, tiny_task, random_weights):
        """Saved and loaded interventions match"""
        examples = build_probe_examples(tiny_task.world, tiny_task.split.train, per_subject=1, seed=0)
        result = localize(random_weights, examples, ProbeConfig(max_steps=50))
        loaded = load_interventions(save_interventions(result, tmp_path / "loc.hedl"))
        assert loaded.ranked == result.ranked
        for head, iv in result.interventions.items():
            assert np.array_equal(loaded.interventions[head].theta, iv.theta)
            assert loaded.interventions[head].sigma == iv.sigma
            assert loaded.probes[head].val_accuracy == result.probes[head].val_accuracy

    def test_probe_report_csv(self, tmp_path, tiny_task, random_weights):
        """The probe report CSV lists every head"""
        examples = build_probe_examples(tiny_task.world, tiny_task.split.train, per_subject=1, seed=0)
        result = localize(random_weights, examples, ProbeConfig(max_steps=50))
        path = save_probe_report(result, tmp_path / "probes.csv")
        assert path.read_text().splitlines()[0] == "layer,head,train_acc,val_acc,sigma,theta_norm"

    def test_missing_entry_rejected(self, tmp_path, tiny_task, random_weights):
        """A localization file without one head's vectors is an artifact error"""
        examples = build_probe_examples(tiny_task.world, tiny_task.split.train, per_subject=1, seed=0)
        result = localize(random_weights, examples, ProbeConfig(max_steps=50))
        entries = read_container(save_interventions(result, tmp_path / "loc.hedl"))
        del entries["layer0.head0.theta"]
        with pytest.raises(ArtifactIOException):
            load_interventions(write_container(tmp_path / "partial.hedl", entries))
