"""
Desk-scale target checks
Runs configs/desk.json end to end; set HEADEDIT_DESK_SEEDS (e.g. "0" or "0,1,2") to enable
"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from analytics import best_scores, effective_single_heads
from config import load_lab_config
from harness import ACCURACY_TARGET, prepare_seed, run_experiment

DESK_SEEDS = os.environ.get("HEADEDIT_DESK_SEEDS", "")

pytestmark = pytest.mark.skipif(not DESK_SEEDS, reason="desk run takes hours; set HEADEDIT_DESK_SEEDS")


@pytest.fixture(scope="module")
def desk_lab():
    return load_lab_config(Path(__file__).parent / "configs" / "desk.json")


@pytest.fixture(scope="module")
def desk_seeds():
    return [int(s) for s in DESK_SEEDS.split(",") if s.strip()]


@pytest.fixture(scope="module")
def desk_records(desk_lab, desk_seeds):
    results = run_experiment(desk_lab, desk_seeds)
    return [r.record() for r in results.runs]


def median(records, condition):
    scores = best_scores(records, condition)
    assert scores, f"no successful {condition} runs"
    return float(np.median(scores))


class TestDeskTargets:
    """Targets the desk configuration must reach"""

    def test_base_model_memorizes_corpus(self, desk_lab, desk_seeds):
        """Pretraining reaches the next-token accuracy target on every seed"""
        for seed in desk_seeds:
            _, weights, _ = prepare_seed(desk_lab, seed)
            assert weights.train_accuracy >= ACCURACY_TARGET

    def test_base_model_repeats_misconceptions(self, desk_records):
        """The unedited model scores at most 0.4 Info*Truth on misconception subjects"""
        mis = best_scores(desk_records, "base", "mis_info_truth")
        assert mis and max(mis) <= 0.4

    def test_localized_iti_beats_random_sets(self, desk_records):
        """ITI on probed heads is at least as good as the median random head set"""
        assert median(desk_records, "iti_localized") >= median(desk_records, "iti_random")

    def test_random_ipo_matches_localized_and_full(self, desk_records):
        """Random-head IPO lands near localized and full IPO, all well above base"""
        random_it = median(desk_records, "ipo_random")
        assert abs(random_it - median(desk_records, "ipo_localized")) <= 0.1
        assert abs(random_it - median(desk_records, "ipo_full")) <= 0.15
        base = median(desk_records, "base")
        for condition in ("ipo_random", "ipo_localized", "ipo_full"):
            assert median(desk_records, condition) > base

    def test_several_single_heads_are_effective(self, desk_records):
        """At least two single heads come within 0.15 of full IPO"""
        assert effective_single_heads(desk_records, margin=0.15) >= 2
