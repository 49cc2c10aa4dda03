import pytest

from gmcml.render import generate_dataset
from gmcml.trainer import TrainConfig

TINY_TRAIN = dict(
    num_classes=2,
    resolution=16,
    batch_size=8,
    latent=4,
    gen_channels=(4, 4, 4),
    cls_stem=4,
    cls_widths=(8, 8, 8),
    epochs_pretrain=2,
    epochs_finetune=2,
)


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_pairs():
    return generate_dataset(3, 2, 12, 16, modes=("centered", "shifted"))
