import numpy as np
import pytest

from warpuq import DisplacementField, GridSpec, LabelVolume, ScalarVolume


def naive_trilinear(vol, qx, qy, qz):
    """Reference 8-corner interpolation of one point, clamped to the edges.

    Written as plain per-point arithmetic, independent of the vectorized
    implementation under test.
    """
    nz, ny, nx = vol.shape
    qx = min(max(float(qx), 0.0), nx - 1.0)
    qy = min(max(float(qy), 0.0), ny - 1.0)
    qz = min(max(float(qz), 0.0), nz - 1.0)
    x0 = min(int(np.floor(qx)), nx - 2)
    y0 = min(int(np.floor(qy)), ny - 2)
    z0 = min(int(np.floor(qz)), nz - 2)
    fx = qx - x0
    fy = qy - y0
    fz = qz - z0
    total = 0.0
    for dz, wz in ((0, 1.0 - fz), (1, fz)):
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                total += wz * wy * wx * vol[z0 + dz, y0 + dy, x0 + dx]
    return total


def naive_warp(src, field):
    """Per-voxel brute-force backward warp using :func:`naive_trilinear`."""
    nz, ny, nx = src.shape
    out = np.empty_like(src)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                out[z, y, x] = naive_trilinear(
                    src,
                    x + field[0, z, y, x],
                    y + field[1, z, y, x],
                    z + field[2, z, y, x],
                )
    return out


def random_volume(grid: GridSpec, seed: int) -> ScalarVolume:
    rng = np.random.default_rng(seed)
    return ScalarVolume(grid, rng.random(grid.shape))


def random_field(grid: GridSpec, seed: int, scale: float = 2.0) -> DisplacementField:
    rng = np.random.default_rng(seed)
    return DisplacementField(grid, rng.uniform(-scale, scale, (3,) + grid.shape))


def random_labels(grid: GridSpec, seed: int, channels: int = 2) -> LabelVolume:
    rng = np.random.default_rng(seed)
    return LabelVolume(grid, rng.random((channels,) + grid.shape))


@pytest.fixture
def grid8():
    return GridSpec((8, 8, 8))


@pytest.fixture
def grid4():
    return GridSpec((4, 4, 4))
