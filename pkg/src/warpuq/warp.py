"""Backward trilinear warping of scalar and label volumes, plus argmax discretization.

Backward warping: the output value at voxel p is sampled from the source at
``phi(p) = p + u(p)``.  Out-of-bounds sample coordinates clamp to the nearest
edge voxel per axis; zero padding would manufacture artificial background
mass at the boundary, which matters for label entropy downstream.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .volumes import (
    DisplacementField,
    GridMismatchError,
    GridSpec,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    VolumeError,
)

__all__ = [
    "BoundaryPolicy",
    "warp_scalar",
    "warp_labels",
    "argmax_discretize",
    "mean_warped_labels",
]


class BoundaryPolicy(Enum):
    """Out-of-bounds sampling policy; only edge clamping is implemented."""

    CLAMP_TO_EDGE = "clamp_to_edge"


def _base_coords(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcastable voxel-center coordinates (x, y, z) for an (nz, ny, nx) array."""
    nz, ny, nx = shape
    x = np.arange(nx, dtype=np.float64).reshape(1, 1, nx)
    y = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
    z = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1)
    return x, y, z


def _trilinear(vol: np.ndarray, qx, qy, qz, with_grad: bool = False):
    """Trilinear sample of ``vol`` (nz, ny, nx) at coordinates (qx, qy, qz).

    Coordinates clamp to [0, n-1] per axis.  With ``with_grad``, also returns
    the derivative of the sampled value w.r.t. each coordinate; the gradient
    is zero wherever the pre-clamp coordinate was outside the volume.
    """
    nz, ny, nx = vol.shape
    cx = np.clip(qx, 0.0, nx - 1.0)
    cy = np.clip(qy, 0.0, ny - 1.0)
    cz = np.clip(qz, 0.0, nz - 1.0)

    x0 = np.minimum(cx.astype(np.intp), nx - 2)
    y0 = np.minimum(cy.astype(np.intp), ny - 2)
    z0 = np.minimum(cz.astype(np.intp), nz - 2)
    fx = cx - x0
    fy = cy - y0
    fz = cz - z0

    x1 = x0 + 1
    y1 = y0 + 1
    z1 = z0 + 1

    v000 = vol[z0, y0, x0]
    v100 = vol[z0, y0, x1]
    v010 = vol[z0, y1, x0]
    v110 = vol[z0, y1, x1]
    v001 = vol[z1, y0, x0]
    v101 = vol[z1, y0, x1]
    v011 = vol[z1, y1, x0]
    v111 = vol[z1, y1, x1]

    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz

    c00 = gx * v000 + fx * v100
    c10 = gx * v010 + fx * v110
    c01 = gx * v001 + fx * v101
    c11 = gx * v011 + fx * v111

    c0 = gy * c00 + fy * c10
    c1 = gy * c01 + fy * c11
    value = gz * c0 + fz * c1

    if not with_grad:
        return value

    dx00 = v100 - v000
    dx10 = v110 - v010
    dx01 = v101 - v001
    dx11 = v111 - v011
    ddx = gz * (gy * dx00 + fy * dx10) + fz * (gy * dx01 + fy * dx11)

    d0 = c10 - c00
    d1 = c11 - c01
    ddy = gz * d0 + fz * d1
    ddz = c1 - c0

    inside_x = (qx >= 0.0) & (qx <= nx - 1.0)
    inside_y = (qy >= 0.0) & (qy <= ny - 1.0)
    inside_z = (qz >= 0.0) & (qz <= nz - 1.0)
    ddx = np.where(inside_x, ddx, 0.0)
    ddy = np.where(inside_y, ddy, 0.0)
    ddz = np.where(inside_z, ddz, 0.0)
    return value, ddx, ddy, ddz


def _warp_array(src: np.ndarray, field_data: np.ndarray) -> np.ndarray:
    x, y, z = _base_coords(src.shape)
    return _trilinear(src, x + field_data[0], y + field_data[1], z + field_data[2])


def _check_same_grid(a: GridSpec, b: GridSpec, what: str) -> None:
    if a != b:
        raise GridMismatchError(f"{what}: grids differ ({a.dims} vs {b.dims})")


def warp_scalar(
    src: ScalarVolume,
    field: DisplacementField,
    policy: BoundaryPolicy = BoundaryPolicy.CLAMP_TO_EDGE,
) -> ScalarVolume:
    """Backward-warp a scalar volume: out(p) = trilinear sample of src at p + u(p)."""
    _check_same_grid(src.grid, field.grid, "warp_scalar")
    if policy is not BoundaryPolicy.CLAMP_TO_EDGE:
        raise VolumeError(f"unsupported boundary policy {policy!r}")
    return ScalarVolume(src.grid, _warp_array(src.data, field.data))


def warp_labels(
    src: LabelVolume,
    field: DisplacementField,
    policy: BoundaryPolicy = BoundaryPolicy.CLAMP_TO_EDGE,
) -> LabelVolume:
    """Warp each label channel independently with trilinear interpolation.

    Outputs are convex combinations of in-range values and stay in [0, 1]
    (clipped against float round-off).  The result is soft even for binary
    input; discretize with :func:`argmax_discretize` when needed.
    """
    _check_same_grid(src.grid, field.grid, "warp_labels")
    if policy is not BoundaryPolicy.CLAMP_TO_EDGE:
        raise VolumeError(f"unsupported boundary policy {policy!r}")
    out = np.empty_like(src.data)
    for c in range(src.channels):
        out[c] = _warp_array(src.data[c], field.data)
    np.clip(out, 0.0, 1.0, out=out)
    return LabelVolume(src.grid, out)


def argmax_discretize(soft: LabelVolume, background_channel: int | None = None) -> LabelVolume:
    """One-hot discretization of a soft label volume.

    With ``background_channel=None`` an implicit background score
    ``1 - sum(channels)`` competes with all structure channels; where it wins,
    the output is all-zero at that voxel.  Ties break toward the lowest
    channel index, with the implicit background winning ties against
    structures.
    """
    data = soft.data
    nch = soft.channels
    if background_channel is None:
        bg = 1.0 - data.sum(axis=0)
        scores = np.concatenate([bg[np.newaxis], data], axis=0)
        winner = np.argmax(scores, axis=0)
        out = np.zeros_like(data)
        for c in range(nch):
            out[c] = (winner == c + 1).astype(np.float64)
    else:
        background_channel = int(background_channel)
        if not (0 <= background_channel < nch):
            raise VolumeError(
                f"background_channel {background_channel} out of range for {nch} channels"
            )
        winner = np.argmax(data, axis=0)
        out = np.zeros_like(data)
        for c in range(nch):
            out[c] = (winner == c).astype(np.float64)
    return LabelVolume(soft.grid, out, binary=True)


def mean_warped_labels(src: LabelVolume, samples: SampleSet) -> LabelVolume:
    """Voxelwise arithmetic mean over T of the warped label channels."""
    _check_same_grid(src.grid, samples.grid, "mean_warped_labels")
    acc = np.zeros_like(src.data)
    for field in samples:
        acc += warp_labels(src, field).data
    acc /= float(len(samples))
    np.clip(acc, 0.0, 1.0, out=acc)
    return LabelVolume(src.grid, acc)
