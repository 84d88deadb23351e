import numpy as np
import pytest

from rivlpr import RivConfig, Scan


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def small_cfg():
    """Desk-size projection config: 3x20 patch grid, short range."""
    return RivConfig(width=280, height=42, max_range=80.0, knn_k=8, wrap_cols=14)


def make_room_scan(rng, n=6000, extent=30.0, refl_max=255.0, seed_id="scan"):
    """Scattered box-room cloud: walls, floor and random clutter."""
    n_wall = n // 2
    walls = np.empty((n_wall, 3))
    side = rng.integers(0, 4, n_wall)
    walls[:, 0] = np.where(side < 2, np.where(side == 0, extent, -extent), rng.uniform(-extent, extent, n_wall))
    walls[:, 1] = np.where(side >= 2, np.where(side == 2, extent, -extent), rng.uniform(-extent, extent, n_wall))
    walls[:, 2] = rng.uniform(-2.0, 6.0, n_wall)
    clutter = rng.uniform(-extent, extent, (n - n_wall, 3))
    clutter[:, 2] = rng.uniform(-2.0, 6.0, n - n_wall)
    xyz = np.vstack([walls, clutter])
    refl = rng.uniform(0.0, refl_max, n)
    return Scan(xyz, refl, timestamp=0.0, id=seed_id)


@pytest.fixture
def room_scan(rng):
    return make_room_scan(rng)
