"""Variational deformable registration with stochastic sampling.

The objective is the weighted sum of an intensity similarity term (local NCC
or SSD), a diffusion regularizer on the displacement field, and a soft Dice
term on warped labels when labels are given.  Optimization is demons-style
multi-resolution gradient descent on the displacement field itself: at each
iteration the per-voxel force (the functional derivative of the objective,
i.e. the finite-dimensional gradient scaled by voxel count) is Gaussian
smoothed, magnitude-capped at the configured step size, and subtracted.

Stochastic sampling emulates Monte Carlo model sampling with per-run
stochasticity: Gaussian-perturbed initialization at the coarsest level and/or
random voxel masking of the similarity force each iteration.  Run i of T is
seeded ``cfg.seed + i``, so a sample set is reproducible end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .filters import box_count, box_sum, gaussian_smooth
from .volumes import (
    DisplacementField,
    GridMismatchError,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    VolumeError,
)
from .warp import _base_coords, _trilinear

__all__ = [
    "Similarity",
    "StochasticMode",
    "RegistrationConfig",
    "StochasticPolicy",
    "RegistrationDivergenceError",
    "similarity_ncc",
    "diffusion_energy",
    "soft_dice_loss",
    "register",
    "sample_registrations",
]

DICE_EPS = 1e-5

# Local-window variances below this relative floor count as degenerate
# (flat window up to round-off); their correlation is defined as 0.
_NCC_VAR_REL_TOL = 1e-10
_NCC_VAR_ABS_TOL = 1e-30


class Similarity(str, Enum):
    SSD = "ssd"
    NCC = "ncc"


class StochasticMode(str, Enum):
    INIT_PERTURBATION = "init_perturbation"
    SIMILARITY_DROPOUT = "similarity_dropout"
    BOTH = "both"


class RegistrationDivergenceError(ArithmeticError):
    """The objective became non-finite during optimization."""


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    iterations: int = 100
    step_size: float = 0.5
    similarity: Similarity = Similarity.NCC
    ncc_window: int = 9
    weight_sim: float = 1.0
    weight_diffusion: float = 1.0
    weight_dice: float = 1.0
    smooth_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise VolumeError(f"levels must be >= 1, got {self.levels}")
        if self.iterations < 1:
            raise VolumeError(f"iterations must be >= 1, got {self.iterations}")
        if not np.isfinite(self.step_size) or self.step_size <= 0:
            raise VolumeError(f"step_size must be > 0, got {self.step_size}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise VolumeError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        weights = (self.weight_sim, self.weight_diffusion, self.weight_dice)
        if any(w < 0 or not np.isfinite(w) for w in weights):
            raise VolumeError(f"loss weights must be >= 0, got {weights}")
        if all(w == 0 for w in weights):
            raise VolumeError("at least one loss weight must be positive")
        if self.smooth_sigma < 0:
            raise VolumeError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")
        object.__setattr__(self, "similarity", Similarity(self.similarity))


@dataclass(frozen=True)
class StochasticPolicy:
    mode: StochasticMode = StochasticMode.BOTH
    dropout_rate: float = 0.2
    init_sigma: float = 0.5
    samples: int = 1

    def __post_init__(self):
        if not (0.0 <= self.dropout_rate < 1.0):
            raise VolumeError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.init_sigma < 0 or not np.isfinite(self.init_sigma):
            raise VolumeError(f"init_sigma must be >= 0, got {self.init_sigma}")
        if self.samples < 1:
            raise VolumeError(f"sample count must be >= 1, got {self.samples}")
        object.__setattr__(self, "mode", StochasticMode(self.mode))

    @property
    def perturbs_init(self) -> bool:
        return (
            self.mode in (StochasticMode.INIT_PERTURBATION, StochasticMode.BOTH)
            and self.init_sigma > 0
        )

    @property
    def drops_similarity(self) -> bool:
        return (
            self.mode in (StochasticMode.SIMILARITY_DROPOUT, StochasticMode.BOTH)
            and self.dropout_rate > 0
        )


# ---------------------------------------------------------------------------
# Loss terms


def _ncc_cc2_terms(F: np.ndarray, J: np.ndarray, window: int, need_force: bool):
    """Squared local correlation map of F and J over truncated windows.

    Returns (cc2, force) where force = voxel-count-scaled d(1 - mean cc2)/dJ,
    or None when not requested.  Windows whose variance is zero up to
    round-off contribute cc2 = 0 and no force.
    """
    cnt = box_count(F.shape, window)
    sF = box_sum(F, window)
    sJ = box_sum(J, window)
    sFF = box_sum(F * F, window)
    sJJ = box_sum(J * J, window)
    sFJ = box_sum(F * J, window)

    cross = sFJ - sF * sJ / cnt
    var_f = sFF - sF * sF / cnt
    var_j = sJJ - sJ * sJ / cnt
    ok = (var_f > _NCC_VAR_REL_TOL * np.abs(sFF) + _NCC_VAR_ABS_TOL) & (
        var_j > _NCC_VAR_REL_TOL * np.abs(sJJ) + _NCC_VAR_ABS_TOL
    )
    denom = np.where(ok, var_f * var_j, 1.0)
    cc2 = np.where(ok, cross * cross / denom, 0.0)

    if not need_force:
        return cc2, None

    alpha = np.where(ok, 2.0 * cross / denom, 0.0)
    beta = np.where(ok, 2.0 * cross * cross / (denom * np.where(ok, var_j, 1.0)), 0.0)
    gamma = beta * (sJ / cnt) - alpha * (sF / cnt)
    # A voxel q appears in exactly the windows centered within the (truncated)
    # window around q, so the adjoint of the window sum is the same box sum.
    force = -(F * box_sum(alpha, window) - J * box_sum(beta, window) + box_sum(gamma, window))
    return cc2, force


def similarity_ncc(a: ScalarVolume, b: ScalarVolume, window: int = 9) -> float:
    """Local NCC loss: 1 - mean squared windowed correlation coefficient.

    Value in [0, 1]; 0 when b is a non-degenerate affine intensity remap of a.
    Edge windows are truncated, not padded.
    """
    if a.grid != b.grid:
        raise GridMismatchError("similarity_ncc: grids differ")
    if window < 3 or window % 2 == 0:
        raise VolumeError(f"window must be odd and >= 3, got {window}")
    cc2, _ = _ncc_cc2_terms(a.data, b.data, window, need_force=False)
    return float(1.0 - cc2.mean())


def _diffusion_energy_array(u: np.ndarray) -> float:
    total = 0.0
    for axis in (1, 2, 3):
        g = np.diff(u, axis=axis)
        total += float((g * g).sum()) / g[0].size
    return total


def _diffusion_force(u: np.ndarray, n_voxels: int) -> np.ndarray:
    force = np.zeros_like(u)
    lo = [slice(None)] * 4
    hi = [slice(None)] * 4
    for axis in (1, 2, 3):
        g = np.diff(u, axis=axis)
        scale = 2.0 * n_voxels / g[0].size
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        force[tuple(lo)] -= scale * g
        force[tuple(hi)] += scale * g
        lo[axis] = slice(None)
        hi[axis] = slice(None)
    return force


def diffusion_energy(field: DisplacementField) -> float:
    """Mean squared forward-difference gradient of u.

    Per axis, the mean runs over the positions where the forward difference
    is defined, summed over the three displacement components; a unit shear
    (u_x = x) therefore scores exactly 1 and any translation scores 0.
    """
    return _diffusion_energy_array(field.data)


def soft_dice_loss(warped: LabelVolume, target: LabelVolume) -> float:
    """1 - mean over channels of (2*sum(w*t) + eps) / (sum(w) + sum(t) + eps)."""
    if warped.grid != target.grid:
        raise GridMismatchError("soft_dice_loss: grids differ")
    if warped.channels != target.channels:
        raise VolumeError(
            f"soft_dice_loss: channel mismatch ({warped.channels} vs {target.channels})"
        )
    total = 0.0
    for c in range(warped.channels):
        w = warped.data[c]
        t = target.data[c]
        num = 2.0 * float((w * t).sum()) + DICE_EPS
        den = float(w.sum()) + float(t.sum()) + DICE_EPS
        total += num / den
    return 1.0 - total / warped.channels


# ---------------------------------------------------------------------------
# Pyramid machinery


def _mean_pool(a: np.ndarray) -> np.ndarray:
    nz, ny, nx = a.shape
    a = a[: nz - nz % 2, : ny - ny % 2, : nx - nx % 2]
    return a.reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2).mean(axis=(1, 3, 5))


def _pyramid_depth(shape: tuple[int, int, int], levels: int) -> int:
    depth = 1
    dims = list(shape)
    while depth < levels and all(d // 2 >= 2 for d in dims):
        dims = [d // 2 for d in dims]
        depth += 1
    return depth


def _build_pyramid(a: np.ndarray, depth: int) -> list[np.ndarray]:
    levels = [a]
    for _ in range(depth - 1):
        levels.append(_mean_pool(levels[-1]))
    return levels


def _prolong(u: np.ndarray, fine_shape: tuple[int, int, int]) -> np.ndarray:
    """Upsample a coarse displacement to the finer grid; displacements double.

    Mean pooling maps fine voxels {2c, 2c+1} onto coarse voxel c (center
    2c + 0.5), so fine voxel i reads the coarse field at (i - 0.5) / 2.
    """
    nz, ny, nx = fine_shape
    qx = ((np.arange(nx, dtype=np.float64) - 0.5) / 2.0).reshape(1, 1, nx)
    qy = ((np.arange(ny, dtype=np.float64) - 0.5) / 2.0).reshape(1, ny, 1)
    qz = ((np.arange(nz, dtype=np.float64) - 0.5) / 2.0).reshape(nz, 1, 1)
    qx, qy, qz = np.broadcast_arrays(
        qx, qy, qz
    )
    out = np.empty((3,) + fine_shape, dtype=np.float64)
    for c in range(3):
        out[c] = 2.0 * _trilinear(u[c], qx, qy, qz)
    return out


# ---------------------------------------------------------------------------
# Optimization


def _loss_and_force(F, M, LM, LF, u, cfg: RegistrationConfig, base, sim_mask=None):
    """Objective value and its voxel-count-scaled gradient w.r.t. u."""
    n_vox = F.size
    qx = base[0] + u[0]
    qy = base[1] + u[1]
    qz = base[2] + u[2]

    loss = 0.0
    force = np.zeros_like(u)

    if cfg.weight_sim > 0:
        J, gx, gy, gz = _trilinear(M, qx, qy, qz, with_grad=True)
        if cfg.similarity is Similarity.NCC:
            cc2, dJ = _ncc_cc2_terms(F, J, cfg.ncc_window, need_force=True)
            loss += cfg.weight_sim * (1.0 - float(cc2.mean()))
        else:
            r = J - F
            loss += cfg.weight_sim * float((r * r).mean())
            dJ = 2.0 * r
        if sim_mask is not None:
            dJ = dJ * sim_mask
        force[0] += cfg.weight_sim * dJ * gx
        force[1] += cfg.weight_sim * dJ * gy
        force[2] += cfg.weight_sim * dJ * gz

    if LM is not None and cfg.weight_dice > 0:
        nch = LM.shape[0]
        dice_sum = 0.0
        for c in range(nch):
            Wc, gxc, gyc, gzc = _trilinear(LM[c], qx, qy, qz, with_grad=True)
            np.clip(Wc, 0.0, 1.0, out=Wc)
            Tc = LF[c]
            num = 2.0 * float((Wc * Tc).sum()) + DICE_EPS
            den = float(Wc.sum()) + float(Tc.sum()) + DICE_EPS
            dice_sum += num / den
            dWc = -(n_vox / nch) * (2.0 * Tc * den - num) / (den * den)
            force[0] += cfg.weight_dice * dWc * gxc
            force[1] += cfg.weight_dice * dWc * gyc
            force[2] += cfg.weight_dice * dWc * gzc
        loss += cfg.weight_dice * (1.0 - dice_sum / nch)

    if cfg.weight_diffusion > 0:
        loss += cfg.weight_diffusion * _diffusion_energy_array(u)
        force += cfg.weight_diffusion * _diffusion_force(u, n_vox)

    return loss, force


def _loss_only(F, M, LM, LF, u, cfg, base):
    loss, _ = _loss_and_force(F, M, LM, LF, u, cfg, base)
    return loss


def _optimize_level(F, M, LM, LF, u, cfg, rng, policy, level_index):
    base = _base_coords(F.shape)
    cap = cfg.step_size
    cap_floor = cfg.step_size / 64.0
    best_loss = np.inf
    best_u = u
    prev_loss = None
    for it in range(cfg.iterations):
        sim_mask = None
        if policy is not None and policy.drops_similarity:
            sim_mask = (rng.random(F.shape) >= policy.dropout_rate).astype(np.float64)
        loss, force = _loss_and_force(F, M, LM, LF, u, cfg, base, sim_mask)
        if not np.isfinite(loss):
            raise RegistrationDivergenceError(
                f"objective non-finite at level {level_index}, iteration {it}"
            )
        if loss < best_loss:
            best_loss = loss
            best_u = u
        # Crude trust-region control: shrink the step cap when the objective
        # went up, creep it back otherwise.
        if prev_loss is not None:
            if loss > prev_loss:
                cap = max(cap * 0.5, cap_floor)
            else:
                cap = min(cap * 1.1, cfg.step_size)
        prev_loss = loss
        update = np.stack([gaussian_smooth(force[c], cfg.smooth_sigma) for c in range(3)])
        mag = np.sqrt((update * update).sum(axis=0)).max()
        if mag > cap:
            update *= cap / mag
        u = u - update
    final_loss = _loss_only(F, M, LM, LF, u, cfg, base)
    if np.isfinite(final_loss) and final_loss < best_loss:
        best_u = u
    return best_u


def _run_single(fixed, moving, labels_moving, labels_fixed, cfg, policy, run_seed):
    rng = np.random.default_rng(int(run_seed))
    depth = _pyramid_depth(fixed.shape, cfg.levels)
    pyr_f = _build_pyramid(fixed, depth)
    pyr_m = _build_pyramid(moving, depth)
    if labels_moving is not None:
        pyr_lm = [
            np.stack(p)
            for p in zip(*[_build_pyramid(ch, depth) for ch in labels_moving])
        ]
        pyr_lf = [
            np.stack(p)
            for p in zip(*[_build_pyramid(ch, depth) for ch in labels_fixed])
        ]
    else:
        pyr_lm = [None] * depth
        pyr_lf = [None] * depth

    u = np.zeros((3,) + pyr_f[depth - 1].shape, dtype=np.float64)
    if policy is not None and policy.perturbs_init:
        u += rng.normal(0.0, policy.init_sigma, size=u.shape)

    for li in range(depth - 1, -1, -1):
        if u.shape[1:] != pyr_f[li].shape:
            u = _prolong(u, pyr_f[li].shape)
        u = _optimize_level(pyr_f[li], pyr_m[li], pyr_lm[li], pyr_lf[li], u, cfg, rng, policy, li)
    return u


def _check_register_inputs(fixed, moving, labels_moving, labels_fixed):
    if fixed.grid != moving.grid:
        raise GridMismatchError("register: fixed and moving grids differ")
    if (labels_moving is None) != (labels_fixed is None):
        raise VolumeError("register: labels must be given for both images or neither")
    if labels_moving is not None:
        if labels_moving.grid != fixed.grid or labels_fixed.grid != fixed.grid:
            raise GridMismatchError("register: label grids differ from image grid")
        if labels_moving.channels != labels_fixed.channels:
            raise VolumeError("register: label channel counts differ")


def register(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    labels_moving: LabelVolume | None = None,
    labels_fixed: LabelVolume | None = None,
    cfg: RegistrationConfig | None = None,
) -> DisplacementField:
    """Estimate the displacement field warping ``moving`` onto ``fixed``.

    Minimizes weight_sim * similarity + weight_diffusion * diffusion
    + weight_dice * soft Dice (when labels are given) by multi-resolution
    smoothed gradient descent.  Deterministic given ``cfg.seed``.
    """
    cfg = cfg or RegistrationConfig()
    _check_register_inputs(fixed, moving, labels_moving, labels_fixed)
    lm = labels_moving.data if labels_moving is not None else None
    lf = labels_fixed.data if labels_fixed is not None else None
    u = _run_single(fixed.data, moving.data, lm, lf, cfg, None, cfg.seed)
    return DisplacementField(fixed.grid, u)


def sample_registrations(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    labels_moving: LabelVolume | None,
    labels_fixed: LabelVolume | None,
    cfg: RegistrationConfig | None = None,
    policy: StochasticPolicy | None = None,
) -> SampleSet:
    """Run T independent stochastic registrations; run i is seeded cfg.seed + i."""
    cfg = cfg or RegistrationConfig()
    policy = policy or StochasticPolicy()
    _check_register_inputs(fixed, moving, labels_moving, labels_fixed)
    lm = labels_moving.data if labels_moving is not None else None
    lf = labels_fixed.data if labels_fixed is not None else None
    fields = []
    for i in range(policy.samples):
        u = _run_single(fixed.data, moving.data, lm, lf, cfg, policy, cfg.seed + i)
        fields.append(DisplacementField(fixed.grid, u))
    return SampleSet(tuple(fields))
