import numpy as np
import pytest

from cxr_sslx.config import TrainConfig

from _synth import write_blob_corpus


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory):
    """Small 4-class disk corpus shared across tests (read-only)."""
    root = tmp_path_factory.mktemp("blobs")
    return write_blob_corpus(root, n_per_class=8, image_size=32, seed=11)


@pytest.fixture()
def tiny_config():
    """Config sized for CPU test runs: tiny backbone, small views."""
    return TrainConfig(
        backbone="tiny8", mlp_hidden=16, projection_size=8,
        view_size=32, finetune_image_size=32, batch_size=8,
        ssl_epochs=2, finetune_epochs=2, seed=123,
        init_mode="ssl_only",
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)
