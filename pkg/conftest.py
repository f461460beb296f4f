"""
Shared pytest fixtures for HeadEdit Lab
Tiny model shapes, a tiny synthetic task and a briefly pretrained base model
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from config import AlignConfig, LabConfig, ModelConfig, PlanConfig, PretrainConfig, ProbeConfig, WorldConfig
from evalsuite import generate_task
from model import ModelWeights, pretrain


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model_config():
    """2 layers x 2 heads x 4 dims; fits the tiny world's 20 tokens"""
    return ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=24, context_len=16, mlp_ratio=2.0, seed=0)


@pytest.fixture(scope="session")
def tiny_world_config():
    return WorldConfig(
        n_subjects=10, n_values=6, misconception_fraction=0.5, p_mis=0.7, p_abstain=0.05,
        n_documents=60, facts_per_doc=2, n_mc_distractors=2,
    )


@pytest.fixture(scope="session")
def tiny_task(tiny_world_config):
    return generate_task(tiny_world_config, seed=0)


@pytest.fixture(scope="session")
def tiny_weights(tiny_model_config, tiny_task):
    """Briefly pretrained; frozen"""
    return pretrain(tiny_model_config, tiny_task.corpus, PretrainConfig(epochs=3, batch_size=8, lr=1e-2))


@pytest.fixture
def random_weights(tiny_model_config):
    return ModelWeights.init(tiny_model_config)


@pytest.fixture(scope="session")
def tiny_lab(tiny_model_config, tiny_world_config):
    """Smallest lab config that still runs every condition"""
    return LabConfig(
        model=tiny_model_config,
        pretrain=PretrainConfig(epochs=2, batch_size=8, lr=1e-2),
        world=tiny_world_config,
        probe=ProbeConfig(max_steps=200, random_questions_per_subject=2, top_k=2),
        align=AlignConfig(tau_grid=[0.5], epochs=1, batch_size=4, lr_scale=10.0),
        plan=PlanConfig(k=2, n_random_sets=2, n_single_heads=2, alpha_grid=[0.0, 5.0], seeds=[0]),
    )
