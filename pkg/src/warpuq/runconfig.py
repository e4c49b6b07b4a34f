"""Textual run configuration: ``section.key = value`` lines, ``#`` comments.

Unknown sections or keys are rejected with their line number.  Values are
whitespace-separated tokens; see :data:`DEFAULT_CONFIG_TEXT` for the full
documented key set and defaults.  Omitted keys fall back to those defaults,
so an empty config is valid and describes the shipped default experiment.
"""

from __future__ import annotations

from dataclasses import dataclass

from .aleatoric import FEATURE_NAMES, HeadConfig, TrainConfig
from .metrics import MASK_POLICIES
from .phantom import PhantomSpec, RandomFieldSpec, Structure
from .registration import RegistrationConfig, Similarity, StochasticMode, StochasticPolicy
from .volumes import GridSpec, VolumeError

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "DEFAULT_CONFIG_TEXT"]


class ConfigError(ValueError):
    """Malformed or unknown configuration content; names the offending line."""


DEFAULT_CONFIG_TEXT = """\
# warpuq run configuration (every key shown at its default value).
# Grammar: section.key = value tokens, '#' starts a comment.

# -- synthetic phantom -------------------------------------------------------
phantom.dims = 32 32 32
phantom.spacing = 1.0 1.0 1.0
phantom.noise_sigma = 0.05
phantom.seed = 7
# structure.<channel> = <sphere|ellipsoid|shell> cx cy cz rx ry rz intensity
#                       [inner rix riy riz]       (shell only)
phantom.structure.0 = sphere 15.5 15.5 15.5 5.0 5.0 5.0 1.0
phantom.structure.1 = shell 15.5 15.5 15.5 9.5 9.5 9.5 0.6 inner 6.5 6.5 6.5

# -- ground-truth deformation ------------------------------------------------
field.amplitude = 2.0
field.smoothness = 5.0
# Constant displacement added on top of the random component; keeps the
# structures misaligned regardless of where the random field peaks.
field.translation = 1.5 1.0 0.5
field.seed = 11

# -- registration ------------------------------------------------------------
registration.levels = 3
registration.iterations = 100
registration.step_size = 0.5
registration.similarity = ncc
registration.ncc_window = 9
registration.weight_sim = 1.0
registration.weight_diffusion = 1.0
registration.weight_dice = 1.0
registration.smooth_sigma = 1.0
registration.seed = 0

# -- stochastic sampling -----------------------------------------------------
stochastic.mode = both
stochastic.dropout_rate = 0.2
stochastic.init_sigma = 0.5
stochastic.samples = 4

# -- aleatoric head ----------------------------------------------------------
head.hidden_channels = 16
head.leaky_slope = 0.2
head.features = abs_diff warped_image fixed_image fixed_gradient_magnitude local_intensity_variance

# -- training ----------------------------------------------------------------
train.beta = 1.0
train.epochs = 500
train.learning_rate = 0.001
train.seed = 0
train.clamp = 10.0
# loss_form: 'log' uses the 0.5*ln(sigma^2) second term; 'printed' uses
# 0.5*sigma^2.  Reports should state which form produced them.
train.loss_form = log

# -- metrics -----------------------------------------------------------------
metrics.mask_policy = whole
"""

_SCALAR_KEYS = {
    ("phantom", "dims"),
    ("phantom", "spacing"),
    ("phantom", "noise_sigma"),
    ("phantom", "seed"),
    ("field", "amplitude"),
    ("field", "smoothness"),
    ("field", "translation"),
    ("field", "seed"),
    ("registration", "levels"),
    ("registration", "iterations"),
    ("registration", "step_size"),
    ("registration", "similarity"),
    ("registration", "ncc_window"),
    ("registration", "weight_sim"),
    ("registration", "weight_diffusion"),
    ("registration", "weight_dice"),
    ("registration", "smooth_sigma"),
    ("registration", "seed"),
    ("stochastic", "mode"),
    ("stochastic", "dropout_rate"),
    ("stochastic", "init_sigma"),
    ("stochastic", "samples"),
    ("head", "hidden_channels"),
    ("head", "leaky_slope"),
    ("head", "features"),
    ("train", "beta"),
    ("train", "epochs"),
    ("train", "learning_rate"),
    ("train", "seed"),
    ("train", "clamp"),
    ("train", "loss_form"),
    ("metrics", "mask_policy"),
}


def _parse_structure(tokens: list[str], line_no: int, channel: int) -> Structure:
    try:
        kind = tokens[0]
        nums = [float(t) for t in tokens[1:8]]
        if len(nums) != 7:
            raise ValueError
        center = tuple(nums[0:3])
        radii = tuple(nums[3:6])
        intensity = nums[6]
        inner = None
        rest = tokens[8:]
        if rest:
            if rest[0] != "inner" or len(rest) != 4:
                raise ValueError
            inner = tuple(float(t) for t in rest[1:4])
        if kind == "sphere" and not (radii[0] == radii[1] == radii[2]):
            raise ConfigError(f"line {line_no}: sphere radii must be equal, got {radii}")
        return Structure(kind, center, radii, intensity, channel, inner)
    except ConfigError:
        raise
    except (ValueError, VolumeError) as exc:
        raise ConfigError(f"line {line_no}: malformed structure: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration; builder methods construct the typed specs."""

    values: dict
    structures: dict

    def _get(self, section, key, default):
        return self.values.get((section, key), default)

    def _grid(self) -> GridSpec:
        dims = self._get("phantom", "dims", (32, 32, 32))
        spacing = self._get("phantom", "spacing", (1.0, 1.0, 1.0))
        return GridSpec(dims, spacing)

    def phantom_spec(self) -> PhantomSpec:
        structures = self.structures
        if not structures:
            grid = self._grid()
            cx = (grid.nx - 1) / 2.0
            cy = (grid.ny - 1) / 2.0
            cz = (grid.nz - 1) / 2.0
            scale = min(grid.dims) / 32.0
            structures = {
                0: Structure.sphere((cx, cy, cz), 5.0 * scale, 1.0, 0),
                1: Structure(
                    "shell",
                    (cx, cy, cz),
                    (9.5 * scale,) * 3,
                    0.6,
                    1,
                    (6.5 * scale,) * 3,
                ),
            }
        ordered = tuple(structures[c] for c in sorted(structures))
        return PhantomSpec(
            self._grid(),
            ordered,
            noise_sigma=self._get("phantom", "noise_sigma", 0.05),
            seed=self._get("phantom", "seed", 7),
        )

    def field_spec(self) -> RandomFieldSpec:
        return RandomFieldSpec(
            self._grid(),
            amplitude=self._get("field", "amplitude", 2.0),
            smoothness=self._get("field", "smoothness", 5.0),
            seed=self._get("field", "seed", 11),
            translation=self._get("field", "translation", (1.5, 1.0, 0.5)),
        )

    def registration_config(self) -> RegistrationConfig:
        return RegistrationConfig(
            levels=self._get("registration", "levels", 3),
            iterations=self._get("registration", "iterations", 100),
            step_size=self._get("registration", "step_size", 0.5),
            similarity=Similarity(self._get("registration", "similarity", "ncc")),
            ncc_window=self._get("registration", "ncc_window", 9),
            weight_sim=self._get("registration", "weight_sim", 1.0),
            weight_diffusion=self._get("registration", "weight_diffusion", 1.0),
            weight_dice=self._get("registration", "weight_dice", 1.0),
            smooth_sigma=self._get("registration", "smooth_sigma", 1.0),
            seed=self._get("registration", "seed", 0),
        )

    def stochastic_policy(self, samples: int | None = None) -> StochasticPolicy:
        return StochasticPolicy(
            mode=StochasticMode(self._get("stochastic", "mode", "both")),
            dropout_rate=self._get("stochastic", "dropout_rate", 0.2),
            init_sigma=self._get("stochastic", "init_sigma", 0.5),
            samples=samples if samples is not None else self._get("stochastic", "samples", 4),
        )

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            hidden_channels=self._get("head", "hidden_channels", 16),
            leaky_slope=self._get("head", "leaky_slope", 0.2),
        )

    def feature_names(self) -> tuple[str, ...]:
        return self._get("head", "features", FEATURE_NAMES)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            beta=self._get("train", "beta", 1.0),
            epochs=self._get("train", "epochs", 500),
            learning_rate=self._get("train", "learning_rate", 1e-3),
            seed=self._get("train", "seed", 0),
            clamp=self._get("train", "clamp", 10.0),
            loss_form=self._get("train", "loss_form", "log"),
        )

    def mask_policy(self) -> str:
        return self._get("metrics", "mask_policy", "whole")


def _convert(section, key, tokens, line_no):
    def one(cast):
        if len(tokens) != 1:
            raise ConfigError(f"line {line_no}: {section}.{key} expects a single value")
        try:
            return cast(tokens[0])
        except ValueError:
            raise ConfigError(f"line {line_no}: {section}.{key}: cannot parse {tokens[0]!r}")

    def triple(cast):
        if len(tokens) != 3:
            raise ConfigError(f"line {line_no}: {section}.{key} expects 3 values")
        try:
            return tuple(cast(t) for t in tokens)
        except ValueError:
            raise ConfigError(f"line {line_no}: {section}.{key}: cannot parse {tokens!r}")

    ints = {
        ("phantom", "seed"),
        ("field", "seed"),
        ("registration", "levels"),
        ("registration", "iterations"),
        ("registration", "ncc_window"),
        ("registration", "seed"),
        ("stochastic", "samples"),
        ("head", "hidden_channels"),
        ("train", "epochs"),
        ("train", "seed"),
    }
    floats = {
        ("phantom", "noise_sigma"),
        ("field", "amplitude"),
        ("field", "smoothness"),
        ("registration", "step_size"),
        ("registration", "weight_sim"),
        ("registration", "weight_diffusion"),
        ("registration", "weight_dice"),
        ("registration", "smooth_sigma"),
        ("stochastic", "dropout_rate"),
        ("stochastic", "init_sigma"),
        ("head", "leaky_slope"),
        ("train", "beta"),
        ("train", "learning_rate"),
        ("train", "clamp"),
    }
    if (section, key) == ("phantom", "dims"):
        return triple(int)
    if (section, key) in (("phantom", "spacing"), ("field", "translation")):
        return triple(float)
    if (section, key) == ("head", "features"):
        unknown = [t for t in tokens if t not in FEATURE_NAMES]
        if unknown:
            raise ConfigError(f"line {line_no}: unknown feature(s) {unknown}")
        return tuple(tokens)
    if (section, key) in ints:
        return one(int)
    if (section, key) in floats:
        return one(float)
    if (section, key) == ("registration", "similarity"):
        value = one(str)
        if value not in ("ssd", "ncc"):
            raise ConfigError(f"line {line_no}: similarity must be 'ssd' or 'ncc', got {value!r}")
        return value
    if (section, key) == ("stochastic", "mode"):
        value = one(str)
        try:
            StochasticMode(value)
        except ValueError:
            raise ConfigError(f"line {line_no}: unknown stochastic mode {value!r}")
        return value
    if (section, key) == ("train", "loss_form"):
        value = one(str)
        if value not in ("log", "printed"):
            raise ConfigError(f"line {line_no}: loss_form must be 'log' or 'printed', got {value!r}")
        return value
    if (section, key) == ("metrics", "mask_policy"):
        value = one(str)
        if value not in MASK_POLICIES:
            raise ConfigError(f"line {line_no}: mask_policy must be one of {MASK_POLICIES}")
        return value
    raise ConfigError(f"line {line_no}: unknown key {section}.{key}")


def parse_config(text: str) -> RunConfig:
    values: dict = {}
    structures: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'section.key = value', got {raw!r}")
        lhs, rhs = line.split("=", 1)
        dotted = lhs.strip()
        tokens = rhs.split()
        if not tokens:
            raise ConfigError(f"line {line_no}: empty value for {dotted!r}")
        parts = dotted.split(".")
        if len(parts) == 3 and parts[0] == "phantom" and parts[1] == "structure":
            try:
                channel = int(parts[2])
            except ValueError:
                raise ConfigError(f"line {line_no}: bad structure channel {parts[2]!r}")
            if channel in structures:
                raise ConfigError(f"line {line_no}: duplicate structure channel {channel}")
            structures[channel] = _parse_structure(tokens, line_no, channel)
            continue
        if len(parts) != 2:
            raise ConfigError(f"line {line_no}: expected 'section.key', got {dotted!r}")
        section, key = parts
        if (section, key) not in _SCALAR_KEYS:
            raise ConfigError(f"line {line_no}: unknown key {dotted!r}")
        if (section, key) in values:
            raise ConfigError(f"line {line_no}: duplicate key {dotted!r}")
        values[(section, key)] = _convert(section, key, tokens, line_no)
    return RunConfig(values, structures)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
