"""Seeded end-to-end phantom experiments.

A directional study runs the whole pipeline (phantom pair -> stochastic
registration -> uncertainty maps -> correlation against label-propagation
error) over many seeds and counts how often the segmentation uncertainties
out-correlate the registration uncertainties.  The aleatoric head is trained
once on held-out training seeds and applied unchanged to every evaluation
run, mirroring a train/test split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aleatoric import (
    HeadConfig,
    HeadParameters,
    TrainConfig,
    build_feature_stack,
    predict_aleatoric,
    train,
)
from .metrics import EvaluationReport, dice, evaluate_all
from .phantom import PhantomSpec, RandomFieldSpec, Structure, make_ground_truth_pair
from .registration import (
    RegistrationConfig,
    StochasticMode,
    StochasticPolicy,
    register,
    sample_registrations,
)
from .uncertainty import UncertaintyKind
from .volumes import GridSpec
from .warp import warp_labels, warp_scalar

__all__ = [
    "StudySettings",
    "ExperimentResult",
    "StudyResult",
    "make_experiment_specs",
    "train_study_head",
    "run_experiment",
    "run_directional_study",
]


@dataclass(frozen=True)
class StudySettings:
    """Desk-scale knobs for the directional correlation study."""

    runs: int = 20
    grid_size: int = 32
    samples: int = 8
    noise_sigma: float = 0.05
    amplitude: float = 2.0
    smoothness: float = 5.0
    levels: int = 3
    iterations: int = 60
    step_size: float = 0.5
    ncc_window: int = 9
    smooth_sigma: float = 1.0
    dropout_rate: float = 0.2
    init_sigma: float = 0.75
    base_seed: int = 2024
    train_seeds: tuple[int, ...] = (9001, 9002)
    train_epochs: int = 250
    train_learning_rate: float = 0.01
    hidden_channels: int = 6
    features: tuple[str, ...] = ("abs_diff", "warped_image", "fixed_gradient_magnitude")


def make_experiment_specs(seed: int, st: StudySettings) -> tuple[PhantomSpec, RandomFieldSpec]:
    """Two-structure phantom (blob + surrounding shell) with seeded geometry jitter."""
    n = st.grid_size
    grid = GridSpec((n, n, n))
    rng = np.random.default_rng([seed, 7])
    mid = (n - 1) / 2.0
    center = tuple(mid + rng.uniform(-1.5, 1.5) for _ in range(3))
    r0 = 0.16 * n + rng.uniform(0.0, 0.03 * n)
    inner = r0 + 1.5
    outer = r0 + 4.5
    structures = (
        Structure.sphere(center, r0, 1.0, 0),
        Structure("shell", center, (outer,) * 3, 0.6, 1, (inner,) * 3),
    )
    phantom = PhantomSpec(grid, structures, noise_sigma=st.noise_sigma, seed=seed)
    translation = tuple(rng.uniform(-2.0, 2.0, size=3))
    field = RandomFieldSpec(
        grid,
        amplitude=st.amplitude,
        smoothness=st.smoothness,
        seed=seed + 500009,
        translation=translation,
    )
    return phantom, field


def _registration_config(st: StudySettings, seed: int) -> RegistrationConfig:
    return RegistrationConfig(
        levels=st.levels,
        iterations=st.iterations,
        step_size=st.step_size,
        ncc_window=st.ncc_window,
        smooth_sigma=st.smooth_sigma,
        seed=seed,
    )


def _policy(st: StudySettings) -> StochasticPolicy:
    return StochasticPolicy(
        mode=StochasticMode.BOTH,
        dropout_rate=st.dropout_rate,
        init_sigma=st.init_sigma,
        samples=st.samples,
    )


def train_study_head(st: StudySettings) -> HeadParameters:
    """Train the aleatoric head on the held-out training seeds."""
    pairs = []
    for seed in st.train_seeds:
        phantom, field_spec = make_experiment_specs(seed, st)
        fixed, moving, labels_fixed, labels_moving, _ = make_ground_truth_pair(
            phantom, field_spec
        )
        field = register(
            fixed, moving, labels_moving, labels_fixed, _registration_config(st, seed + 104729)
        )
        features = build_feature_stack(fixed, warp_scalar(moving, field), st.features)
        warped = warp_labels(labels_moving, field)
        pairs.append((features, warped, labels_fixed))
    cfg = TrainConfig(
        epochs=st.train_epochs,
        learning_rate=st.train_learning_rate,
        seed=st.base_seed,
    )
    return train(pairs, cfg, HeadConfig(hidden_channels=st.hidden_channels)).params


@dataclass(frozen=True)
class ExperimentResult:
    seed: int
    dice_initial: float
    report: EvaluationReport

    def mean_r(self, kind: UncertaintyKind):
        return self.report.correlation(kind).mean_r


@dataclass(frozen=True)
class StudyResult:
    settings: StudySettings
    results: tuple[ExperimentResult, ...]

    @staticmethod
    def _gt(a, b) -> bool:
        return a is not None and b is not None and a > b

    @property
    def combined_beats_registration(self) -> int:
        """Runs where combined r exceeds both transformation and appearance r."""
        count = 0
        for res in self.results:
            comb = res.mean_r(UncertaintyKind.COMBINED_SEG)
            trans = res.mean_r(UncertaintyKind.TRANSFORMATION)
            appear = res.mean_r(UncertaintyKind.APPEARANCE)
            if self._gt(comb, trans) and self._gt(comb, appear):
                count += 1
        return count

    @property
    def epistemic_beats_transformation(self) -> int:
        count = 0
        for res in self.results:
            epi = res.mean_r(UncertaintyKind.EPISTEMIC_SEG)
            trans = res.mean_r(UncertaintyKind.TRANSFORMATION)
            if self._gt(epi, trans):
                count += 1
        return count

    def mean_over_runs(self, kind: UncertaintyKind):
        vals = [r.mean_r(kind) for r in self.results if r.mean_r(kind) is not None]
        return float(np.mean(vals)) if vals else None


def run_experiment(seed: int, st: StudySettings, head: HeadParameters) -> ExperimentResult:
    phantom, field_spec = make_experiment_specs(seed, st)
    fixed, moving, labels_fixed, labels_moving, _ = make_ground_truth_pair(phantom, field_spec)
    samples = sample_registrations(
        fixed,
        moving,
        labels_moving,
        labels_fixed,
        _registration_config(st, seed + 104729),
        _policy(st),
    )
    features = build_feature_stack(fixed, warp_scalar(moving, samples[0]), st.features)
    ale = predict_aleatoric(head, features)
    report = evaluate_all(fixed, moving, labels_moving, labels_fixed, samples, ale)
    return ExperimentResult(seed, dice(labels_moving, labels_fixed).mean, report)


def run_directional_study(
    st: StudySettings = StudySettings(), head: HeadParameters | None = None
) -> StudyResult:
    """Train the head (unless given) and run the full evaluation suite."""
    if head is None:
        head = train_study_head(st)
    results = []
    for i in range(st.runs):
        results.append(run_experiment(st.base_seed + i, st, head))
    return StudyResult(st, tuple(results))
