import numpy as np
import pytest

from exitrate import Box, FeedbackProfile, MultiChannelSystem


def scalar_system(a: float, eps: float, n_channels: int = 0, b: float = 1.0, sigma: float = 1.0):
    """1D plant x' = a x + sum b u_i + sqrt(eps) sigma dW."""
    return MultiChannelSystem(
        A=[[a]], B=tuple([[b]] for _ in range(n_channels)), sigma=[[sigma]], epsilon=eps
    )


def empty_profile():
    return FeedbackProfile(gains=())


@pytest.fixture
def unstable_1d():
    """Closed loop x' = x on [1, 3]: empty kernel, hovering rate 1/2 at x = 1."""
    return scalar_system(1.0, 0.1), empty_profile(), Box([1.0], [3.0])


@pytest.fixture
def stable_1d():
    """Closed loop x' = -x on (-1, 1): the origin is an interior equilibrium."""
    return scalar_system(-1.0, 0.1), empty_profile(), Box([-1.0], [1.0])


@pytest.fixture
def brownian_1d():
    """Zero drift, unit sigma on (0, 1): the analytic Dirichlet benchmark."""
    return scalar_system(0.0, 0.4), empty_profile(), Box([0.0], [1.0])
