"""Evaluation metrics: Dice, Jacobian folding measures, non-diffeomorphic
volume, label-propagation error maps, and Pearson correlation reports.

Non-diffeomorphic volume uses the Kuhn decomposition of each unit grid cell
into 6 tetrahedra.  For the cell at corner (x, y, z), each of the 6 axis
permutations pi yields the vertex chain v0 = (0,0,0), v1 = v0 + e_pi(0),
v2 = v1 + e_pi(1), v3 = (1,1,1) (offsets added to the cell corner).  The
signed volume of a tetrahedron under phi is
sign(pi) * det([phi(v1)-phi(v0), phi(v2)-phi(v0), phi(v3)-phi(v0)]) / 6,
where the permutation parity makes every tetrahedron's identity volume +1/6,
so the 6 volumes of an undeformed cell sum to exactly 1.  %NDV is 100 times
the negative deformed volume over the total cell volume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.ndimage import binary_dilation

from .uncertainty import (
    UncertaintyKind,
    UncertaintyMap,
    appearance_uncertainty,
    combine_seg_uncertainty,
    epistemic_seg_uncertainty,
    transformation_uncertainty,
)
from .volumes import (
    DisplacementField,
    GridMismatchError,
    GridSpec,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    VolumeError,
)
from .warp import argmax_discretize, mean_warped_labels

__all__ = [
    "DegenerateCorrelationError",
    "DiceResult",
    "JacobianMap",
    "CorrelationReport",
    "EvaluationReport",
    "dice",
    "jacobian_determinant",
    "percent_nonpositive_jacobian",
    "non_diffeomorphic_volume",
    "label_propagation_error",
    "pearson_r",
    "evaluate_all",
    "write_report_csv",
    "read_report_csv",
]

REPORT_VERSION = 1
COMBINATION_RULE = "minmax_normalize_then_sum"
MASK_POLICIES = ("whole", "foreground")
_FOREGROUND_DILATION_ITERS = 2


class DegenerateCorrelationError(ValueError):
    """Pearson correlation undefined: one of the inputs has zero variance."""


@dataclass(frozen=True)
class DiceResult:
    per_structure: tuple[float, ...]
    mean: float


def dice(a: LabelVolume, b: LabelVolume) -> DiceResult:
    """Per-channel 2|A∩B| / (|A|+|B|) for binary one-hot volumes.

    Empty-vs-empty channels score 1; empty-vs-nonempty score 0.
    """
    if a.grid != b.grid:
        raise GridMismatchError("dice: grids differ")
    if a.channels != b.channels:
        raise VolumeError(f"dice: channel mismatch ({a.channels} vs {b.channels})")
    if not (a.binary and b.binary):
        raise VolumeError("dice requires binary one-hot label volumes")
    scores = []
    for c in range(a.channels):
        av = a.data[c]
        bv = b.data[c]
        inter = float((av * bv).sum())
        total = float(av.sum() + bv.sum())
        scores.append(1.0 if total == 0.0 else 2.0 * inter / total)
    return DiceResult(tuple(scores), float(np.mean(scores)))


@dataclass(frozen=True, eq=False)
class JacobianMap:
    """det(I + grad u) per voxel; central differences inside, one-sided at faces."""

    grid: GridSpec
    data: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


def jacobian_determinant(field: DisplacementField) -> JacobianMap:
    """Finite-difference Jacobian determinant of phi = Id + u at every voxel."""
    if any(d < 3 for d in field.grid.dims):
        raise VolumeError(f"jacobian_determinant requires dims >= 3, got {field.grid.dims}")
    u = field.data
    # np.gradient: second-order central differences with one-sided stencils
    # at the faces.  Array axes (z, y, x) map to spatial axes in reverse.
    j = np.empty((3, 3) + field.grid.shape, dtype=np.float64)
    for comp in range(3):
        dz, dy, dx = np.gradient(u[comp])
        j[comp, 0] = dx
        j[comp, 1] = dy
        j[comp, 2] = dz
    for axis in range(3):
        j[axis, axis] += 1.0
    det = (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )
    return JacobianMap(field.grid, det)


def percent_nonpositive_jacobian(field: DisplacementField) -> float:
    """100 * fraction of voxels with Jacobian determinant <= 0."""
    det = jacobian_determinant(field).data
    return 100.0 * float((det <= 0.0).mean())


_PERMS = tuple(permutations(range(3)))


def _perm_sign(p) -> float:
    sign = 1.0
    p = list(p)
    for i in range(3):
        for k in range(i + 1, 3):
            if p[i] > p[k]:
                sign = -sign
    return sign


def _kuhn_tetrahedra():
    """(sign, v0, v1, v2, v3) corner offsets for the 6 tetrahedra of a unit cell."""
    tets = []
    for p in _PERMS:
        v = [np.zeros(3, dtype=np.intp)]
        for axis in p:
            nxt = v[-1].copy()
            nxt[axis] += 1
            v.append(nxt)
        tets.append((_perm_sign(p), tuple(tuple(c) for c in v)))
    return tuple(tets)


_TETRAHEDRA = _kuhn_tetrahedra()


def non_diffeomorphic_volume(field: DisplacementField) -> float:
    """%NDV: negatively oriented deformed volume over total cell volume.

    Each unit cell is split into the 6 Kuhn tetrahedra described in the
    module docstring; the contributions max(0, -signed volume) are summed
    over all tetrahedra of all cells.
    """
    nz, ny, nx = field.grid.shape
    u = field.data
    x = np.arange(nx, dtype=np.float64).reshape(1, 1, nx)
    y = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
    z = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1)
    phi = np.empty((3, nz, ny, nx), dtype=np.float64)
    phi[0] = x + u[0]
    phi[1] = y + u[1]
    phi[2] = z + u[2]

    def corner(offset):
        ox, oy, oz = offset
        return phi[:, oz : nz - 1 + oz, oy : ny - 1 + oy, ox : nx - 1 + ox]

    negative = 0.0
    for sign, (v0, v1, v2, v3) in _TETRAHEDRA:
        a = corner(v0)
        e1 = corner(v1) - a
        e2 = corner(v2) - a
        e3 = corner(v3) - a
        det = (
            e1[0] * (e2[1] * e3[2] - e2[2] * e3[1])
            - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0])
            + e1[2] * (e2[0] * e3[1] - e2[1] * e3[0])
        )
        signed_volume = sign * det / 6.0
        negative += float(np.maximum(0.0, -signed_volume).sum())
    n_cells = (nx - 1) * (ny - 1) * (nz - 1)
    return 100.0 * negative / n_cells


def label_propagation_error(
    labels_moving: LabelVolume, labels_fixed: LabelVolume, samples: SampleSet
) -> np.ndarray:
    """Per-structure squared error (mean propagated soft label - target)^2.

    Returns an array shaped (channels, nz, ny, nx).
    """
    if labels_moving.grid != labels_fixed.grid or labels_moving.grid != samples.grid:
        raise GridMismatchError("label_propagation_error: grids differ")
    if labels_moving.channels != labels_fixed.channels:
        raise VolumeError("label_propagation_error: channel mismatch")
    propagated = mean_warped_labels(labels_moving, samples).data
    return (propagated - labels_fixed.data) ** 2


def pearson_r(u, e, mask: np.ndarray | None = None) -> float:
    """Pearson correlation between two per-voxel maps over the selected voxels.

    ``u`` and ``e`` are arrays (any matching shape); ``mask`` optionally
    restricts the computation (default: all voxels).  Raises
    :class:`DegenerateCorrelationError` when either input has zero variance
    over the selection; degenerate correlations are never silently 0.
    """
    uu = np.asarray(u, dtype=np.float64).reshape(-1)
    ee = np.asarray(e, dtype=np.float64).reshape(-1)
    if uu.shape != ee.shape:
        raise VolumeError(f"pearson_r: shape mismatch ({uu.size} vs {ee.size} values)")
    if mask is not None:
        sel = np.asarray(mask).reshape(-1).astype(bool)
        if sel.shape != uu.shape:
            raise VolumeError("pearson_r: mask shape mismatch")
        uu = uu[sel]
        ee = ee[sel]
    if uu.size < 2:
        raise VolumeError(f"pearson_r needs at least 2 voxels, got {uu.size}")
    du = uu - uu.mean()
    de = ee - ee.mean()
    su = float((du * du).sum())
    se = float((de * de).sum())
    # Constant inputs only miss exact zero by accumulated round-off; treat
    # anything at that scale as zero variance.
    tol_u = (1e-13 * max(np.abs(uu).max(), 1.0)) ** 2 * uu.size
    tol_e = (1e-13 * max(np.abs(ee).max(), 1.0)) ** 2 * ee.size
    if su <= tol_u or se <= tol_e:
        raise DegenerateCorrelationError(
            "zero variance in correlation input (constant over the selected voxels)"
        )
    r = float((du * de).sum() / np.sqrt(su * se))
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class CorrelationReport:
    """Per-structure Pearson r of one uncertainty kind against the label error.

    Degenerate structures carry None instead of a coefficient.
    """

    kind: UncertaintyKind
    mask_policy: str
    r_per_structure: tuple
    voxel_counts: tuple[int, ...]

    @property
    def mean_r(self):
        vals = [r for r in self.r_per_structure if r is not None]
        return float(np.mean(vals)) if vals else None


@dataclass(frozen=True)
class EvaluationReport:
    dice_per_structure: tuple[float, ...]
    dice_mean: float
    pct_nonpositive_jacobian: float
    pct_ndv: float
    correlations: tuple[CorrelationReport, ...]
    mask_policy: str
    combination_rule: str = COMBINATION_RULE

    def correlation(self, kind: UncertaintyKind) -> CorrelationReport:
        for rep in self.correlations:
            if rep.kind is kind:
                return rep
        raise KeyError(kind)


def _foreground_masks(discretized: LabelVolume, target: LabelVolume) -> list[np.ndarray]:
    masks = []
    for c in range(target.channels):
        union = (discretized.data[c] > 0) | (target.data[c] > 0)
        masks.append(binary_dilation(union, iterations=_FOREGROUND_DILATION_ITERS))
    return masks


def _correlate_map(
    umap: UncertaintyMap, err: np.ndarray, masks, mask_policy: str
) -> CorrelationReport:
    n_struct = err.shape[0]
    rs = []
    counts = []
    for c in range(n_struct):
        channel = umap.data[0] if umap.channels == 1 else umap.data[c]
        mask = None if mask_policy == "whole" else masks[c]
        counts.append(int(err[c].size if mask is None else mask.sum()))
        try:
            rs.append(pearson_r(channel, err[c], mask))
        except DegenerateCorrelationError:
            rs.append(None)
    return CorrelationReport(umap.kind, mask_policy, tuple(rs), tuple(counts))


def evaluate_all(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    labels_moving: LabelVolume,
    labels_fixed: LabelVolume,
    samples: SampleSet,
    ale_map: UncertaintyMap | None = None,
    mask_policy: str = "whole",
) -> EvaluationReport:
    """Full metric bundle for one registration run.

    Dice is computed on the argmax-discretized mean warped labels against the
    fixed labels; the folding metrics are averaged over the samples; each
    uncertainty kind is correlated per structure against the label
    propagation error (single-channel registration uncertainties are
    correlated against every structure's error map unchanged).  Aleatoric
    and combined correlations require ``ale_map``.
    """
    if mask_policy not in MASK_POLICIES:
        raise VolumeError(f"mask_policy must be one of {MASK_POLICIES}, got {mask_policy!r}")
    propagated = mean_warped_labels(labels_moving, samples)
    discretized = argmax_discretize(propagated)
    dice_result = dice(discretized, labels_fixed)

    pct_nonpos = float(np.mean([percent_nonpositive_jacobian(f) for f in samples]))
    pct_ndv = float(np.mean([non_diffeomorphic_volume(f) for f in samples]))

    err = label_propagation_error(labels_moving, labels_fixed, samples)
    masks = None if mask_policy == "whole" else _foreground_masks(discretized, labels_fixed)

    maps = [
        transformation_uncertainty(samples),
        appearance_uncertainty(moving, fixed, samples),
        epistemic_seg_uncertainty(labels_moving, samples),
    ]
    if ale_map is not None:
        if ale_map.kind is not UncertaintyKind.ALEATORIC_SEG:
            raise VolumeError(f"ale_map must be an aleatoric_seg map, got {ale_map.kind.value}")
        maps.append(ale_map)
        maps.append(combine_seg_uncertainty(maps[2], ale_map))

    correlations = tuple(_correlate_map(m, err, masks, mask_policy) for m in maps)
    return EvaluationReport(
        dice_result.per_structure,
        dice_result.mean,
        pct_nonpos,
        pct_ndv,
        correlations,
        mask_policy,
    )


# ---------------------------------------------------------------------------
# CSV export/import.  Schema v1: header "metric,structure,value"; one row per
# (structure, metric) plus "mean" rows; floats serialized with repr so the
# round trip is lossless; degenerate correlations carry the literal value
# "degenerate".


def _rows_of(report: EvaluationReport) -> list[tuple[str, str, str]]:
    rows = [("report_version", "all", str(REPORT_VERSION))]
    rows.append(("mask_policy", "all", report.mask_policy))
    rows.append(("combination_rule", "all", report.combination_rule))
    for c, v in enumerate(report.dice_per_structure):
        rows.append(("dice", str(c), repr(v)))
    rows.append(("dice", "mean", repr(report.dice_mean)))
    rows.append(("pct_nonpositive_jacobian", "all", repr(report.pct_nonpositive_jacobian)))
    rows.append(("pct_ndv", "all", repr(report.pct_ndv)))
    for rep in report.correlations:
        name = f"pearson_r:{rep.kind.value}"
        for c, r in enumerate(rep.r_per_structure):
            rows.append((name, str(c), "degenerate" if r is None else repr(r)))
        mean = rep.mean_r
        rows.append((name, "mean", "degenerate" if mean is None else repr(mean)))
        for c, n in enumerate(rep.voxel_counts):
            rows.append((f"voxels:{rep.kind.value}", str(c), str(n)))
    return rows


def write_report_csv(path, report: EvaluationReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "structure", "value"))
        writer.writerows(_rows_of(report))


def read_report_csv(path) -> EvaluationReport:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["metric", "structure", "value"]:
            raise VolumeError(f"{path}: unexpected report header {header!r}")
        rows = [tuple(row) for row in reader]
    table: dict[str, dict[str, str]] = {}
    for metric, structure, value in rows:
        table.setdefault(metric, {})[structure] = value
    version = table.get("report_version", {}).get("all")
    if version != str(REPORT_VERSION):
        raise VolumeError(f"{path}: unsupported report version {version!r}")
    mask_policy = table["mask_policy"]["all"]
    combination_rule = table["combination_rule"]["all"]

    def structures_of(metric):
        keys = [k for k in table[metric] if k != "mean"]
        return sorted(keys, key=int)

    dice_structs = structures_of("dice")
    dice_per = tuple(float(table["dice"][k]) for k in dice_structs)
    dice_mean = float(table["dice"]["mean"])

    correlations = []
    for kind in UncertaintyKind:
        name = f"pearson_r:{kind.value}"
        if name not in table:
            continue
        structs = structures_of(name)
        rs = tuple(
            None if table[name][k] == "degenerate" else float(table[name][k]) for k in structs
        )
        counts = tuple(int(table[f"voxels:{kind.value}"][k]) for k in structs)
        correlations.append(CorrelationReport(kind, mask_policy, rs, counts))
    return EvaluationReport(
        dice_per,
        dice_mean,
        float(table["pct_nonpositive_jacobian"]["all"]),
        float(table["pct_ndv"]["all"]),
        tuple(correlations),
        mask_policy,
        combination_rule,
    )
