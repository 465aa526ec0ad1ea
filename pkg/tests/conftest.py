import pytest
import torch

from syncanim.dataset import SyntheticSceneConfig, generate_synthetic_dataset
from syncanim.trainer import TrainConfig


@pytest.fixture(scope="session", autouse=True)
def single_thread_torch():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_bundle():
    """Small scene shared across trainer/pipeline/CLI tests."""
    cfg = SyntheticSceneConfig(n_train=24, n_eval=12, resolution=32, seed=9)
    return generate_synthetic_dataset(cfg)


@pytest.fixture()
def tiny_train_cfg():
    return TrainConfig(stage_steps=(6, 5, 4), rays_per_iter=512, n_samples=8,
                       batch_frames=8, seed=2)
