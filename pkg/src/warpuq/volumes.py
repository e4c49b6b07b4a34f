"""Grid geometry and the immutable volume/field containers shared by all modules.

Conventions, pinned once and used everywhere:

* All coordinates and displacements are in voxel units.  Physical spacing is
  carried on the grid for reporting only; no internal math uses it.
* Flat payloads are x-fastest: ``index = x + nx * (y + ny * z)``.  In-memory
  arrays are shaped ``(nz, ny, nx)`` (C order), whose ravel is exactly that
  layout.  Multi-channel payloads are channel-major: shape
  ``(channels, nz, ny, nx)``.
* Displacement fields store the three components in spatial-axis order
  ``(u_x, u_y, u_z)`` and follow the backward-warping convention
  ``phi(p) = p + u(p)``: the output value at voxel p is sampled from the
  source at ``phi(p)``.
* Storage and accumulation are float64.  Containers copy their payload at
  construction and freeze it (``writeable = False``), so every operation in
  the package is value-semantic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VolumeError",
    "GridMismatchError",
    "GridSpec",
    "ScalarVolume",
    "LabelVolume",
    "DisplacementField",
    "SampleSet",
    "make_volume",
    "linear_index",
    "inverse_linear_index",
    "checksum",
]


class VolumeError(ValueError):
    """A grid, volume, or field violates a construction invariant."""


class GridMismatchError(VolumeError):
    """An operation received operands defined on different grids."""


def _as_triple(value, name, cast):
    try:
        items = tuple(cast(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise VolumeError(f"{name} must be a sequence of 3 numbers, got {value!r}") from exc
    if len(items) != 3:
        raise VolumeError(f"{name} must have exactly 3 entries, got {len(items)}")
    return items


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid geometry.

    ``dims`` is (nx, ny, nz) voxel counts; ``spacing`` is (sx, sy, sz) in mm,
    informational only.  All dims must be >= 2 so finite differences have at
    least two samples per axis.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = _as_triple(self.dims, "dims", int)
        spacing = _as_triple(self.spacing, "spacing", float)
        if any(d < 2 for d in dims):
            raise VolumeError(f"all dims must be >= 2, got {dims}")
        if any(not np.isfinite(s) or s <= 0.0 for s in spacing):
            raise VolumeError(f"all spacing components must be finite and > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def nx(self) -> int:
        return self.dims[0]

    @property
    def ny(self) -> int:
        return self.dims[1]

    @property
    def nz(self) -> int:
        return self.dims[2]

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """In-memory array shape (nz, ny, nx): z slowest, x fastest."""
        return (self.dims[2], self.dims[1], self.dims[0])


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _coerce_payload(data, grid: GridSpec, channels: int, what: str) -> np.ndarray:
    """Copy payload to float64 shaped (channels, nz, ny, nx); checks size only."""
    arr = np.array(data, dtype=np.float64, order="C")
    expected = channels * grid.voxel_count
    if arr.size != expected:
        raise VolumeError(
            f"{what}: payload has {arr.size} values, expected {expected} "
            f"for dims {grid.dims} with {channels} channel(s)"
        )
    target = (channels,) + grid.shape
    try:
        arr = arr.reshape(target)
    except ValueError as exc:
        raise VolumeError(f"{what}: payload shape {arr.shape} incompatible with {target}") from exc
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Single-channel 3D intensity grid. ``data`` has shape (nz, ny, nx)."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = _coerce_payload(self.data, self.grid, 1, "ScalarVolume")[0]
        if not np.all(np.isfinite(arr)):
            raise VolumeError("ScalarVolume: payload contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def flat(self) -> np.ndarray:
        """x-fastest flat view (read-only)."""
        return self.data.reshape(-1)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """N-channel soft label grid with values in [0, 1], channel-major.

    ``data`` has shape (channels, nz, ny, nx).  A volume flagged ``binary``
    may contain only exact 0.0 and 1.0.
    """

    grid: GridSpec
    data: np.ndarray
    binary: bool = False

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim == 4:
            nch = raw.shape[0]
        elif raw.ndim == 3 or raw.ndim == 1:
            nch = raw.size // self.grid.voxel_count if raw.ndim == 1 else 1
        else:
            raise VolumeError(f"LabelVolume: payload must be 1-, 3- or 4-dimensional, got shape {raw.shape}")
        if nch < 1:
            raise VolumeError("LabelVolume: at least one channel required")
        arr = _coerce_payload(raw, self.grid, nch, "LabelVolume")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("LabelVolume: payload contains non-finite values")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            bad = int(np.argmax((arr < 0.0) | (arr > 1.0)))
            raise VolumeError(
                f"LabelVolume: value {arr.reshape(-1)[bad]!r} at flat index {bad} outside [0, 1]"
            )
        if self.binary and not np.all((arr == 0.0) | (arr == 1.0)):
            raise VolumeError("LabelVolume flagged binary contains values other than 0 and 1")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Voxel-unit displacement u with phi(p) = p + u(p), backward warping.

    ``data`` has shape (3, nz, ny, nx); component order is (u_x, u_y, u_z).
    """

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = _coerce_payload(self.data, self.grid, 3, "DisplacementField")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("DisplacementField: payload contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def u_x(self) -> np.ndarray:
        return self.data[0]

    @property
    def u_y(self) -> np.ndarray:
        return self.data[1]

    @property
    def u_z(self) -> np.ndarray:
        return self.data[2]


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Ordered collection of T displacement fields from one stochastic run."""

    samples: tuple[DisplacementField, ...]

    def __post_init__(self):
        samples = tuple(self.samples)
        if len(samples) < 1:
            raise VolumeError("SampleSet requires at least one sample")
        grid = samples[0].grid
        for i, s in enumerate(samples):
            if s.grid != grid:
                raise GridMismatchError(f"SampleSet member {i} has grid {s.grid.dims}, expected {grid.dims}")
        object.__setattr__(self, "samples", samples)

    @property
    def grid(self) -> GridSpec:
        return self.samples[0].grid

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> DisplacementField:
        return self.samples[i]


def make_volume(grid: GridSpec, fill: float) -> ScalarVolume:
    """Constant-valued scalar volume."""
    fill = float(fill)
    if not np.isfinite(fill):
        raise VolumeError(f"fill value must be finite, got {fill!r}")
    return ScalarVolume(grid, np.full(grid.shape, fill, dtype=np.float64))


def linear_index(grid: GridSpec, x: int, y: int, z: int) -> int:
    """Flat index of voxel (x, y, z): x + nx * (y + ny * z)."""
    x, y, z = int(x), int(y), int(z)
    nx, ny, nz = grid.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise VolumeError(f"voxel ({x}, {y}, {z}) out of range for dims {grid.dims}")
    return x + nx * (y + ny * z)


def inverse_linear_index(grid: GridSpec, index: int) -> tuple[int, int, int]:
    """Inverse of :func:`linear_index`."""
    index = int(index)
    nx, ny, _ = grid.dims
    if not (0 <= index < grid.voxel_count):
        raise VolumeError(f"flat index {index} out of range for dims {grid.dims}")
    x = index % nx
    y = (index // nx) % ny
    z = index // (nx * ny)
    return (x, y, z)


def _payload_of(volume) -> tuple[str, int, np.ndarray]:
    if isinstance(volume, ScalarVolume):
        return "scalar", 1, volume.data[np.newaxis]
    if isinstance(volume, LabelVolume):
        return "label", volume.channels, volume.data
    if isinstance(volume, DisplacementField):
        return "field", 3, volume.data
    raise VolumeError(f"cannot checksum object of type {type(volume).__name__}")


def checksum(volume) -> str:
    """Deterministic hex digest of header plus bit-exact float64 payload.

    The header covers type, dims, spacing and channel count, so volumes with
    equal payloads on different grids hash differently.
    """
    tag, nch, payload = _payload_of(volume)
    g = volume.grid
    header = (
        f"{tag}|dims {g.dims[0]} {g.dims[1]} {g.dims[2]}"
        f"|spacing {g.spacing[0]!r} {g.spacing[1]!r} {g.spacing[2]!r}"
        f"|channels {nch}\n"
    )
    h = hashlib.sha256()
    h.update(header.encode("ascii"))
    h.update(np.ascontiguousarray(payload, dtype="<f8").tobytes())
    return h.hexdigest()
