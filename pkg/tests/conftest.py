import numpy as np
import pytest

from spinecycle.grid import VolumeGrid
from spinecycle.sidecars import load_default_stats


@pytest.fixture(scope="session")
def stats():
    return load_default_stats()


@pytest.fixture(scope="session")
def calibration_scans():
    """The frozen annotation set whose fitted priors equal the shipped ones."""
    from pathlib import Path

    from spinecycle.sidecars import read_annotations

    path = Path(__file__).parent / "data" / "prior_calibration.json"
    return read_annotations(path)


def make_grid(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return VolumeGrid(data=np.asarray(data), spacing=spacing, origin=origin)


def cube_mask(shape, lo, hi, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Axis-aligned solid box [lo, hi) in index space, as a bool grid."""
    data = np.zeros(shape, dtype=bool)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    data[sl] = True
    return make_grid(data, spacing, origin)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
