import numpy as np
import pytest

from fmapshield.codecs.dataset_codec import synthetic_digits
from fmapshield.config import settings
from fmapshield.schemas.campaign import CampaignConfig, ErrorModel
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import LayerConfig, LayerKind
from fmapshield.services.analysis import split_dataset
from fmapshield.services.engine import classify
from fmapshield.services.quantizer import QuantScheme, calibrate
from fmapshield.services.trainer import build_desknet, init_network, train_sgd

TINY_LAYERS = (
    LayerConfig(kind=LayerKind.CONV2D, in_channels=1, out_channels=3, kernel_size=(3, 3)),
    LayerConfig(kind=LayerKind.RELU),
    LayerConfig(kind=LayerKind.CONV2D, in_channels=3, out_channels=2, kernel_size=(2, 2)),
    LayerConfig(kind=LayerKind.RELU),
    LayerConfig(kind=LayerKind.FLATTEN),
    LayerConfig(kind=LayerKind.DENSE, in_features=18, out_features=3),
)


@pytest.fixture(autouse=True)
def reset_settings():
    """Restore settings that CLI overrides mutate."""
    saved = settings.model_dump()
    yield
    for key, value in saved.items():
        setattr(settings, key, value)


@pytest.fixture
def tiny_net():
    """1x6x6 input, two conv layers (3 + 2 fmaps), 3 classes."""
    return init_network(TINY_LAYERS, (1, 6, 6), seed=7, name="tiny")


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(11)
    return rng.uniform(0.0, 1.0, size=(12, 1, 6, 6)).astype(np.float32)


@pytest.fixture
def tiny_dataset(tiny_net, tiny_images):
    """Images labeled with the tiny net's own predictions, so every one is correct."""
    labels = np.zeros(len(tiny_images), dtype=np.int64)
    labels = classify(tiny_net, tiny_images, labels)
    return Dataset(tiny_images, labels.astype(np.int64), name="tiny")


@pytest.fixture
def tiny_profile(tiny_net, tiny_images):
    return calibrate(tiny_net, tiny_images)


@pytest.fixture(scope="session")
def digits():
    return synthetic_digits(3000, seed=0)


@pytest.fixture(scope="session")
def trained_desknet(digits):
    """Desk-scale network trained to the accuracy gate on synthetic digits."""
    return train_sgd(build_desknet(seed=0), digits, epochs=12, learning_rate=0.05, seed=0)


@pytest.fixture(scope="session")
def desk_eval():
    return synthetic_digits(200, seed=4)


@pytest.fixture(scope="session")
def desk_profile(trained_desknet, digits):
    return calibrate(trained_desknet, digits.images)


@pytest.fixture(scope="session")
def desk_split(trained_desknet, desk_eval, desk_profile):
    scheme = QuantScheme.from_profile(trained_desknet, desk_profile)
    return split_dataset(trained_desknet, desk_eval, seed=5, quant=scheme)


@pytest.fixture
def flip_config():
    return CampaignConfig(error_model=ErrorModel.FXP_FLIP, injections_per_fmap=16, master_seed=9)


@pytest.fixture
def tiny_fxp_dataset(tiny_net, tiny_images, tiny_profile):
    """Images labeled with the fake-quantized tiny net's predictions."""
    scheme = QuantScheme.from_profile(tiny_net, tiny_profile)
    labels = classify(tiny_net, tiny_images, np.zeros(len(tiny_images), dtype=np.int64), scheme)
    return Dataset(tiny_images, labels.astype(np.int64), name="tiny-fxp")
