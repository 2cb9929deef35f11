import numpy as np
import pytest

from circuitfaith.forge import forge_reverse, forge_xproportion, gen_dataset
from circuitfaith.graph import PatchableModel, random_spec


@pytest.fixture(scope="session")
def xprop():
    return forge_xproportion()


@pytest.fixture(scope="session")
def reverse():
    return forge_reverse()


@pytest.fixture(scope="session")
def xprop_batch():
    return gen_dataset("xproportion", 100, 1)


@pytest.fixture(scope="session")
def reverse_batch():
    return gen_dataset("reverse", 100, 1)


def random_model(seed: int, **kw) -> PatchableModel:
    return PatchableModel(random_spec(np.random.default_rng(seed), **kw))
