import numpy as np
import pytest

from crozenas import space
from crozenas.batchfile import synthetic_batch
from crozenas.space import StackConfig

# 2-cell, C=4 network on 3x8x8 inputs
TINY_STACK = StackConfig(in_channels=3, height=8, width=8, channels=4, stages=2,
                         cells_per_stage=1, num_classes=10)
DESK_STACK = StackConfig()

MIXED_CELL = "|conv3x3~0|+|conv1x1~1|avgpool3x3~0|+|zero~2|conv3x3~1|skip~0|"


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def tiny_batch():
    return synthetic_batch(n=2, classes=10, shape=(3, 8, 8), seed=11)


@pytest.fixture
def desk_batch():
    return synthetic_batch(n=8, classes=10, shape=(3, 16, 16), seed=5)


@pytest.fixture
def mixed_plan():
    return space.build_plan(space.decode(MIXED_CELL), TINY_STACK)
