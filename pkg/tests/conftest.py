import numpy as np
import pytest

from seqloc.geometry import Pose, Quaternion


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    w, x, y, z = rng.normal(size=4)
    return Quaternion(w, x, y, z)


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    return Pose(random_quaternion(rng), rng.normal(scale=t_scale, size=3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
