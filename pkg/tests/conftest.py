import pytest
import torch

from vitsentry.mae import MAEConfig, MaskedAutoencoder
from vitsentry.vit import ModelConfig, VitClassifier

# small geometry shared across the unit tests: 16x16 images, 4x4 patches,
# two blocks. Big enough to exercise every code path, cheap enough to
# build dozens of times.
TINY = dict(image_size=16, channels=3, patch_size=4, embed_dim=32, depth=2,
            num_heads=2, mlp_hidden_dim=64, num_classes=4)
TINY_MAE = dict(image_size=16, channels=3, patch_size=4, encoder_dim=32,
                encoder_depth=2, encoder_heads=2, encoder_mlp_dim=64,
                decoder_dim=32, decoder_depth=1, decoder_heads=2,
                decoder_mlp_dim=64)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    torch.manual_seed(0)
    model = VitClassifier(tiny_config)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_mae_config():
    return MAEConfig(**TINY_MAE)


@pytest.fixture(scope="session")
def tiny_mae(tiny_mae_config):
    torch.manual_seed(1)
    model = MaskedAutoencoder(tiny_mae_config)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_batch():
    g = torch.Generator().manual_seed(7)
    x = torch.rand(5, 16, 16, 3, generator=g)
    y = torch.randint(0, 4, (5,), generator=g)
    return x, y
