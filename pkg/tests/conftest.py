import numpy as np
import pytest

from kronsep.data import Dataset, SubjectData
from kronsep.simulate import SimConfig, gen_dataset


def make_subject(sid, y, times, t_idx, locs, l_idx, x=None):
    y = np.asarray(y, dtype=float)
    if x is None:
        x = np.ones((y.size, 1))
    return SubjectData(
        id=str(sid),
        y=y,
        x=np.asarray(x, dtype=float),
        times=np.asarray(times, dtype=float),
        time_grid_idx=np.asarray(t_idx),
        locs=np.asarray(locs, dtype=float).reshape(len(l_idx), -1),
        loc_grid_idx=np.asarray(l_idx),
    )


def random_dataset(seed, N=12, grid_times=(0.0, 1.0, 3.0), grid_locs=(0.0, 1.5, 2.5, 5.0), p=2):
    """Unbalanced dataset with random sub-grids and a random design (not from the simulator)."""
    rng = np.random.default_rng(seed)
    grid_times = np.asarray(grid_times)
    grid_locs = np.asarray(grid_locs)
    subjects = []
    for i in range(N):
        t = rng.integers(1, len(grid_times) + 1)
        s = rng.integers(1, len(grid_locs) + 1)
        t_idx = np.sort(rng.choice(len(grid_times), t, replace=False))
        l_idx = np.sort(rng.choice(len(grid_locs), s, replace=False))
        n = t * s
        x = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)])
        subjects.append(make_subject(i, rng.normal(size=n), grid_times[t_idx], t_idx, grid_locs[l_idx], l_idx, x))
    return Dataset(subjects, grid_times=grid_times, grid_locs=grid_locs[:, None])


@pytest.fixture
def small_dataset():
    return random_dataset(0)


@pytest.fixture(scope="session")
def sim80():
    return gen_dataset(SimConfig.table1(80, 3, seed=11), 1)
