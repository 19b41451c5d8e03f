import numpy as np
import pytest
from hypothesis import settings

from sausage_sym.geometry import Grid, GridField, GridSet

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_mask(rng, grid: Grid, density=0.3, pad=None):
    """Random mask kept ``pad`` cells (default: a quarter of the half-extent) away from the edge."""
    mask = rng.random(grid.shape) < density
    half = min(grid.half)
    pad = half // 2 + 1 if pad is None else pad
    inner = tuple(slice(pad, n - pad) for n in grid.extent)
    out = np.zeros(grid.shape, dtype=bool)
    out[inner] = mask[inner]
    return GridSet(grid, out)


def random_field(rng, A: GridSet, pad=None):
    vals = rng.random(A.grid.shape)
    keep = random_mask(rng, A.grid, 1.0, pad).mask
    vals = np.where(keep, vals, 0.0)
    vals[A.mask] = 1.0
    return GridField(A.grid, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)
