"""Shared fixtures: vehicle defaults and cached primitive libraries."""

import pytest

from forestnav.kinematics import DEFAULT_PARAMS
from forestnav.primitives import PrimitiveConfig, generate_library


@pytest.fixture(scope="session")
def params():
    return DEFAULT_PARAMS


@pytest.fixture(scope="session")
def default_library():
    """Full library at defaults (30 angles x 450 leaves); shared, immutable."""
    return generate_library(PrimitiveConfig(), DEFAULT_PARAMS)


@pytest.fixture(scope="session")
def small_library():
    """Cheap library for planner and mission tests: 5 angles x 45 leaves."""
    cfg = PrimitiveConfig(n_initial_angles=5, n_control_pairs=5, split_branching=(3, 3), seed=3)
    return generate_library(cfg, DEFAULT_PARAMS)
