"""Synthetic data: analytic intensity/label phantoms and smooth random deformations.

Everything here is reproducible bit-exactly from (spec, seed); the generators
stand in for clinical anatomy so downstream claims are testable without data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .filters import gaussian_smooth
from .volumes import (
    DisplacementField,
    GridMismatchError,
    GridSpec,
    LabelVolume,
    ScalarVolume,
    VolumeError,
)
from .warp import argmax_discretize, warp_labels, warp_scalar

__all__ = [
    "Structure",
    "PhantomSpec",
    "RandomFieldSpec",
    "generate_phantom",
    "generate_smooth_field",
    "make_ground_truth_pair",
]

_KINDS = ("sphere", "ellipsoid", "shell")


@dataclass(frozen=True)
class Structure:
    """One analytic shape: a filled ellipsoid/sphere or an ellipsoidal shell.

    ``center`` and ``radii`` are in voxel coordinates.  A shell occupies the
    outer ellipsoid minus the (strictly smaller) inner one given by
    ``inner_radii``.  Boundary voxels are inclusive for the outer surface and
    exclusive for the inner one, so a shell never overlaps the shape it wraps.
    """

    kind: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float
    channel: int
    inner_radii: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise VolumeError(f"unknown structure kind {self.kind!r}; expected one of {_KINDS}")
        center = tuple(float(v) for v in self.center)
        radii = tuple(float(v) for v in self.radii)
        if len(center) != 3 or len(radii) != 3:
            raise VolumeError("center and radii must have 3 entries")
        if any(r <= 0 for r in radii):
            raise VolumeError(f"radii must be > 0, got {radii}")
        inner = self.inner_radii
        if self.kind == "shell":
            if inner is None:
                raise VolumeError("shell structures require inner_radii")
            inner = tuple(float(v) for v in inner)
            if any(i <= 0 for i in inner) or any(i >= r for i, r in zip(inner, radii)):
                raise VolumeError(f"shell inner radii {inner} must be positive and < outer {radii}")
        elif inner is not None:
            raise VolumeError(f"inner_radii only valid for shells, not {self.kind!r}")
        if not np.isfinite(self.intensity):
            raise VolumeError("structure intensity must be finite")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "inner_radii", inner)
        object.__setattr__(self, "channel", int(self.channel))

    @staticmethod
    def sphere(center, radius: float, intensity: float, channel: int) -> "Structure":
        r = float(radius)
        return Structure("sphere", tuple(center), (r, r, r), intensity, channel)


def _inside_ellipsoid(x, y, z, center, radii) -> np.ndarray:
    # Cleared-denominator form keeps integer configurations exact in float64.
    cx, cy, cz = center
    rx, ry, rz = radii
    dx = (x - cx) * (ry * rz)
    dy = (y - cy) * (rx * rz)
    dz = (z - cz) * (rx * ry)
    rhs = (rx * ry * rz) ** 2
    return dx * dx + dy * dy + dz * dz <= rhs


def _structure_mask(s: Structure, x, y, z) -> np.ndarray:
    outer = _inside_ellipsoid(x, y, z, s.center, s.radii)
    if s.kind == "shell":
        inner = _inside_ellipsoid(x, y, z, s.center, s.inner_radii)
        return outer & ~inner
    return outer


@dataclass(frozen=True)
class PhantomSpec:
    """Analytic phantom: shapes on a grid plus i.i.d. Gaussian intensity noise."""

    grid: GridSpec
    structures: tuple[Structure, ...]
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        structures = tuple(self.structures)
        if not structures:
            raise VolumeError("PhantomSpec requires at least one structure")
        channels = sorted(s.channel for s in structures)
        if channels != list(range(len(structures))):
            raise VolumeError(
                f"structure channels must be distinct and contiguous from 0, got {channels}"
            )
        nx, ny, nz = self.grid.dims
        for s in structures:
            for c, r, n in zip(s.center, s.radii, (nx, ny, nz)):
                if c - r < 0 or c + r > n - 1:
                    raise VolumeError(
                        f"structure on channel {s.channel} does not fit inside dims {self.grid.dims}"
                    )
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise VolumeError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        object.__setattr__(self, "structures", structures)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class RandomFieldSpec:
    """Gaussian-smoothed white-noise displacement field, rescaled to a max amplitude.

    ``amplitude`` is the max absolute displacement per component in voxels
    (0 yields the zero field); ``smoothness`` is the Gaussian kernel sigma in
    voxels.  Keep amplitude <= 0.5 * smoothness for fold-free fields.  An
    optional constant ``translation`` (voxels) is added after rescaling; it
    guarantees bulk misalignment wherever the structures sit and never folds.
    """

    grid: GridSpec
    amplitude: float
    smoothness: float
    seed: int = 0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.amplitude) or self.amplitude < 0:
            raise VolumeError(f"amplitude must be finite and >= 0, got {self.amplitude}")
        if not np.isfinite(self.smoothness) or self.smoothness < 0.5:
            raise VolumeError(f"smoothness must be >= 0.5, got {self.smoothness}")
        translation = tuple(float(v) for v in self.translation)
        if len(translation) != 3 or any(not np.isfinite(t) for t in translation):
            raise VolumeError(f"translation must be 3 finite values, got {self.translation}")
        object.__setattr__(self, "amplitude", float(self.amplitude))
        object.__setattr__(self, "smoothness", float(self.smoothness))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "translation", translation)


def _masks(spec: PhantomSpec) -> np.ndarray:
    nz, ny, nx = spec.grid.shape
    x = np.arange(nx, dtype=np.float64).reshape(1, 1, nx)
    y = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
    z = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1)
    masks = np.zeros((len(spec.structures),) + spec.grid.shape, dtype=bool)
    for s in spec.structures:
        masks[s.channel] = _structure_mask(s, x, y, z)
    for a in range(len(spec.structures)):
        for b in range(a + 1, len(spec.structures)):
            if np.any(masks[a] & masks[b]):
                raise VolumeError(
                    f"structures on channels {a} and {b} overlap; conflicting channels"
                )
    return masks


def generate_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Intensity volume (shape intensities + seeded noise) and binary per-structure labels."""
    masks = _masks(spec)
    intensity = np.zeros(spec.grid.shape, dtype=np.float64)
    for s in spec.structures:
        intensity[masks[s.channel]] += s.intensity
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, size=intensity.shape)
    labels = masks.astype(np.float64)
    return ScalarVolume(spec.grid, intensity), LabelVolume(spec.grid, labels, binary=True)


def generate_smooth_field(spec: RandomFieldSpec) -> DisplacementField:
    """Per component: Gaussian-smoothed white noise rescaled so max |component| =
    amplitude, plus the constant translation."""
    rng = np.random.default_rng(spec.seed)
    data = np.zeros((3,) + spec.grid.shape, dtype=np.float64)
    if spec.amplitude > 0:
        for c in range(3):
            white = rng.standard_normal(spec.grid.shape)
            smooth = gaussian_smooth(white, spec.smoothness)
            peak = np.abs(smooth).max()
            if peak > 0:
                data[c] = smooth * (spec.amplitude / peak)
    for c in range(3):
        if spec.translation[c] != 0.0:
            data[c] += spec.translation[c]
    return DisplacementField(spec.grid, data)


def make_ground_truth_pair(
    phantom: PhantomSpec, field: RandomFieldSpec
) -> tuple[ScalarVolume, ScalarVolume, LabelVolume, LabelVolume, DisplacementField]:
    """Registration test pair with known truth.

    Returns (fixed, moving, S_f, S_m, true_field).  The moving image is the
    phantom itself; the fixed image is the noiseless phantom warped by the
    true field, with fresh noise drawn from a seed derived from the phantom's.
    S_f is the discretized warp of S_m, so label propagation under a perfect
    registration is consistent by construction.
    """
    if phantom.grid != field.grid:
        raise GridMismatchError(
            f"phantom grid {phantom.grid.dims} != field grid {field.grid.dims}"
        )
    true_field = generate_smooth_field(field)
    moving, labels_moving = generate_phantom(phantom)
    clean, _ = generate_phantom(replace(phantom, noise_sigma=0.0))
    fixed_arr = warp_scalar(clean, true_field).data
    if phantom.noise_sigma > 0:
        rng = np.random.default_rng([phantom.seed, 1])
        fixed_arr = fixed_arr + rng.normal(0.0, phantom.noise_sigma, size=fixed_arr.shape)
    fixed = ScalarVolume(phantom.grid, fixed_arr)
    labels_fixed = argmax_discretize(warp_labels(labels_moving, true_field))
    return fixed, moving, labels_fixed, labels_moving, true_field
