import pytest
import torch

from dgsan.data import synthesize_dataset
from dgsan.glfe import EncoderConfig
from dgsan.hcmgfm import FusionConfig
from dgsan.model import ModelConfig

torch.set_num_threads(1)


def tiny_model_config(**kwargs) -> ModelConfig:
    """A narrow network that trains in well under a second per epoch on a handful of cases."""
    enc = EncoderConfig(
        stage_channels=[4, 8, 12, 16], heads_per_stage=[1, 1, 1, 1], clinical_hidden=8, feature_dim=16
    )
    return ModelConfig(encoder=enc, fusion=FusionConfig(d=16, heads=2), **kwargs)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture(scope="session")
def syn10(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn10")
    return synthesize_dataset(10, 7, out)


@pytest.fixture(scope="session")
def syn40(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn40")
    return synthesize_dataset(40, 3, out)
