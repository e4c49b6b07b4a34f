"""The four per-voxel uncertainty maps and their combination.

* Transformation uncertainty: population variance (1/T) of the sampled
  displacement components, summed over the three components into one channel
  (voxel^2 units).
* Appearance uncertainty: mean over samples of the squared difference between
  warped moving and fixed intensities.
* Epistemic segmentation uncertainty: per structure, the binary entropy (in
  nats) of the mean propagated soft label.
* Aleatoric segmentation uncertainty is produced by the prediction head (see
  :mod:`warpuq.aleatoric`); here it only participates in the combination.

The combined map min-max normalizes the epistemic and aleatoric channels to
[0, 1] over the volume before summing, since nats and label-variance units
are not commensurable.  That normalization-then-sum rule is an artifact
decision and is labeled as such in evaluation reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import xlogy

from .volumes import (
    GridMismatchError,
    GridSpec,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    VolumeError,
    _coerce_payload,
    _freeze,
)
from .warp import _warp_array, mean_warped_labels

__all__ = [
    "UncertaintyKind",
    "UncertaintyMap",
    "LN2",
    "transformation_uncertainty",
    "appearance_uncertainty",
    "epistemic_seg_uncertainty",
    "combine_seg_uncertainty",
]

LN2 = float(np.log(2.0))


class UncertaintyKind(str, Enum):
    TRANSFORMATION = "transformation"
    APPEARANCE = "appearance"
    EPISTEMIC_SEG = "epistemic_seg"
    ALEATORIC_SEG = "aleatoric_seg"
    COMBINED_SEG = "combined_seg"


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    """Nonnegative per-voxel map; one channel for the registration kinds,
    one channel per structure for the segmentation kinds."""

    grid: GridSpec
    kind: UncertaintyKind
    data: np.ndarray

    def __post_init__(self):
        kind = UncertaintyKind(self.kind)
        raw = np.asarray(self.data, dtype=np.float64)
        nch = raw.shape[0] if raw.ndim == 4 else 1
        arr = _coerce_payload(raw, self.grid, nch, "UncertaintyMap")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("UncertaintyMap: payload contains non-finite values")
        if arr.min(initial=0.0) < 0.0:
            raise VolumeError("UncertaintyMap: values must be >= 0")
        if kind is UncertaintyKind.EPISTEMIC_SEG and arr.max(initial=0.0) > LN2:
            # float32 storage can round ln 2 up by an ulp; clip that, reject more.
            if arr.max() > LN2 * (1.0 + 1e-6):
                raise VolumeError(
                    f"epistemic segmentation uncertainty exceeds ln 2 (max {arr.max()!r})"
                )
            arr = np.minimum(arr, LN2)
        if kind in (UncertaintyKind.TRANSFORMATION, UncertaintyKind.APPEARANCE) and nch != 1:
            raise VolumeError(f"{kind.value} maps are single-channel, got {nch}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]


def _component_variances(samples: SampleSet) -> np.ndarray:
    """Two-pass per-component population variance of the sampled fields."""
    t = float(len(samples))
    mean = np.zeros((3,) + samples.grid.shape, dtype=np.float64)
    for f in samples:
        mean += f.data
    mean /= t
    var = np.zeros_like(mean)
    for f in samples:
        d = f.data - mean
        var += d * d
    var /= t
    return var


def transformation_uncertainty(samples: SampleSet) -> UncertaintyMap:
    """Variance of the sampled displacement field, summed over components.

    Population variance (divide by T), computed two-pass so T identical
    samples give exactly zero up to round-off well below 1e-12.
    """
    var = _component_variances(samples)
    total = np.maximum(var.sum(axis=0), 0.0)
    return UncertaintyMap(samples.grid, UncertaintyKind.TRANSFORMATION, total[np.newaxis])


def appearance_uncertainty(
    moving: ScalarVolume, fixed: ScalarVolume, samples: SampleSet
) -> UncertaintyMap:
    """Mean over samples of the squared warped-minus-fixed intensity difference."""
    if moving.grid != fixed.grid or moving.grid != samples.grid:
        raise GridMismatchError("appearance_uncertainty: grids differ")
    acc = np.zeros(moving.grid.shape, dtype=np.float64)
    for f in samples:
        d = _warp_array(moving.data, f.data) - fixed.data
        acc += d * d
    acc /= float(len(samples))
    return UncertaintyMap(moving.grid, UncertaintyKind.APPEARANCE, acc[np.newaxis])


def epistemic_seg_uncertainty(labels_moving: LabelVolume, samples: SampleSet) -> UncertaintyMap:
    """Binary entropy (nats) of the mean propagated soft label, per structure.

    With p the mean warped channel value, the channel map is
    -p ln p - (1-p) ln(1-p), using the convention 0 ln 0 = 0; values are
    bounded by ln 2.
    """
    if labels_moving.grid != samples.grid:
        raise GridMismatchError("epistemic_seg_uncertainty: grids differ")
    p = mean_warped_labels(labels_moving, samples).data
    ent = -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))
    np.clip(ent, 0.0, LN2, out=ent)
    return UncertaintyMap(labels_moving.grid, UncertaintyKind.EPISTEMIC_SEG, ent)


def _minmax_channel(a: np.ndarray) -> np.ndarray:
    lo = a.min()
    hi = a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def combine_seg_uncertainty(epi: UncertaintyMap, ale: UncertaintyMap) -> UncertaintyMap:
    """Min-max normalize each channel of both maps to [0, 1], then add.

    Constant channels normalize to zero.  The inputs must be an epistemic and
    an aleatoric segmentation map on the same grid with equal channel counts.
    """
    if epi.kind is not UncertaintyKind.EPISTEMIC_SEG:
        raise VolumeError(f"expected an epistemic_seg map, got {epi.kind.value}")
    if ale.kind is not UncertaintyKind.ALEATORIC_SEG:
        raise VolumeError(f"expected an aleatoric_seg map, got {ale.kind.value}")
    if epi.grid != ale.grid:
        raise GridMismatchError("combine_seg_uncertainty: grids differ")
    if epi.channels != ale.channels:
        raise VolumeError(
            f"combine_seg_uncertainty: channel mismatch ({epi.channels} vs {ale.channels})"
        )
    out = np.empty_like(epi.data)
    for c in range(epi.channels):
        out[c] = _minmax_channel(epi.data[c]) + _minmax_channel(ale.data[c])
    return UncertaintyMap(epi.grid, UncertaintyKind.COMBINED_SEG, out)
