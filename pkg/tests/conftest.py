import os
import sys

import numpy as np
import pytest

# プロジェクトルートをパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.geometry import CurveSpec, discretize, make_curve
from core.network import MLP, NetworkSpec, init_network


@pytest.fixture
def unit_circle():
    return make_curve(CurveSpec(kind="circle"))


@pytest.fixture
def circle_grid(unit_circle):
    return discretize(unit_circle, 64)


@pytest.fixture
def star_grid():
    return discretize(make_curve(CurveSpec(kind="star")), 256)


@pytest.fixture
def square_grid():
    return discretize(make_curve(CurveSpec(kind="square")), 200)


@pytest.fixture
def small_net():
    spec = NetworkSpec(arch=MLP, in_dim=2, out_dim=1, width=8, depth=2, activation="tanh")
    return init_network(spec, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
