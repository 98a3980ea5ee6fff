import dataclasses

import numpy as np
import pytest

from tpesim.dgm import generate_trial, pioneer1_config
from tpesim.harness import limit_blas_threads

limit_blas_threads()


@pytest.fixture(scope="session")
def default_cfg():
    return pioneer1_config("dar", "instant", 0.1, root_seed=42)


@pytest.fixture(scope="session")
def dataset(default_cfg):
    return generate_trial(default_cfg, 0)


@pytest.fixture(scope="session")
def complete_dataset(dataset):
    """Same trial with the withdrawal flags wiped."""
    return dataclasses.replace(dataset, miss=np.zeros_like(dataset.miss))
