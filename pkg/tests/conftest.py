import numpy as np
import pytest

from segperf.synthetic import QualityCurve, SyntheticWorld, build_quality_curve


@pytest.fixture(scope="session")
def world() -> SyntheticWorld:
    return SyntheticWorld.generate(200, seed=0)


@pytest.fixture(scope="session")
def curve(world: SyntheticWorld) -> QualityCurve:
    return build_quality_curve(np.linspace(0.0, 1.0, 41), world.pairs, seed=0)
