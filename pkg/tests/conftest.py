import numpy as np
import pytest

from cassi_tools.config import CMFormerConfig, RunConfig, SolverConfig, TrainConfig
from cassi_tools.data_io import synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_model_config():
    return CMFormerConfig(channels=4, blocks=(1, 1, 1), kernel_size=3, ffn_expansion=2)


@pytest.fixture
def dataset(tmp_path):
    """Three 16x16x2 scenes (two train, one val) with a global binary mask, d = 1."""
    return synth_dataset(tmp_path / "data", seed=7, scenes=3, height=16, width=16, bands=2, shift_step=1)


@pytest.fixture
def tiny_run_config(tiny_model_config):
    return RunConfig(
        seed=42,
        solver=SolverConfig(framework="r2admm", stages=1, denoiser="cmformer"),
        model=tiny_model_config,
        train=TrainConfig(epochs=1, steps_per_epoch=2, crop=8, precision="float64"),
    ).validate()
