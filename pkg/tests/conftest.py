import numpy as np
import pytest

from fklab.envelopes import EnvelopeFamily, ScalingFunction, VolumeFunction
from fklab.functionals import MeasureSpec
from fklab.processes import ProcessSpec


@pytest.fixture
def bm1():
    return ProcessSpec(kind="brownian", dim=1)


@pytest.fixture
def bm3():
    return ProcessSpec(kind="brownian", dim=3)


@pytest.fixture
def cauchy():
    return ProcessSpec(kind="alpha_stable_1d", dim=1, alpha_stable_index=1.0, jump_cutoff=0.5)


@pytest.fixture
def unit_ball():
    return MeasureSpec.uniform_ball(1.0, 1.0)


@pytest.fixture
def gaussian_family_1d():
    return EnvelopeFamily(kind="gaussian_UE", phi=ScalingFunction.power(2),
                          volume=VolumeFunction.lebesgue(1))


def exact_gaussian(t, r, dim=1):
    return (2 * np.pi * t) ** (-dim / 2.0) * np.exp(-r * r / (2 * t))
