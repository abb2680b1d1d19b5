import numpy as np
import pytest

from facadeseg import facade_data


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12-facade photo corpus shared by pipeline-level tests."""
    root = str(tmp_path_factory.mktemp("tinydata"))
    manifest = facade_data.build_dataset(root, 12, seed=3, styles=("photo",),
                                         rows_choices=(1, 2),
                                         cols_choices=(1, 2))
    return root, manifest


def random_mask(rng, shape):
    return (rng.random(shape) < rng.uniform(0.1, 0.9)).astype(np.uint8)
