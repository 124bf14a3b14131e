import numpy as np
import pytest

from uavckm.geometry import Building, Vec3, World
from uavckm.harness import desk_profile


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_profile()


@pytest.fixture(scope="session")
def desk_world(desk_cfg):
    from uavckm.geometry import generate_world
    return generate_world(7, desk_cfg.world)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_world(buildings, bounds=(1000.0, 1000.0, 750.0), uav_min_height=250.0):
    return World(bounds=Vec3(*bounds), uav_min_height=uav_min_height,
                 buildings=buildings, users=[], uav_start=Vec3(0, 0, uav_min_height))


def box(lo, hi):
    return Building(Vec3(*lo), Vec3(*hi))
