import numpy as np
import pytest

from mrad import RetrievalParams, build_bank, make_task


@pytest.fixture(scope="session")
def task():
    """A small, well-separated synthetic task shared by read-only tests."""
    return make_task(
        seed=11,
        d=16,
        n_aux_normal=12,
        n_aux_anomalous=10,
        n_query_normal=6,
        n_query_anomalous=6,
    )


@pytest.fixture(scope="session")
def bank(task):
    return build_bank(task.aux, task.grid)


@pytest.fixture()
def params():
    return RetrievalParams()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260816)
