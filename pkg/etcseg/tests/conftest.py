import numpy as np
import pytest

from etcseg.config import TrainConfig
from etcseg.services.data_service import GeneratorParams, SegDataset, generate_dataset
from etcseg.services.model_service import TriBranchNet

TINY_WIDTHS = (2, 3, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_params():
    return GeneratorParams(height=16, width=16, num_classes=3, noise_sigma=0.2, blur_radius=1)


@pytest.fixture
def tiny_config(tmp_path):
    return TrainConfig().updated({
        'seed': 7,
        'iterations': 2,
        'eval_every': 2,
        'height': 16,
        'width': 16,
        'n_samples': 8,
        'n_test': 2,
        'widths': TINY_WIDTHS,
        'labeled_fraction': 0.25,
        'kl_warmup': 10,
        'progress': False,
        'dataset_path': str(tmp_path / 'data'),
        'output_dir': str(tmp_path / 'run'),
    })


@pytest.fixture
def tiny_dataset(tiny_config, tiny_params):
    root = generate_dataset(tiny_config.dataset_path, tiny_config.seed, tiny_config.n_samples, tiny_params,
                            n_test=tiny_config.n_test)
    return SegDataset(root / 'train')


@pytest.fixture
def tiny_net():
    return TriBranchNet.initialize(seed=3, num_classes=3, widths=TINY_WIDTHS)


def random_evidence(rng, shape, low=0.1, high=5.0):
    return rng.uniform(low, high, size=shape)


def random_one_hot(rng, batch, num_classes, height, width):
    labels = rng.integers(0, num_classes, size=(batch, height, width))
    return np.moveaxis(np.eye(num_classes)[labels], -1, -3)
