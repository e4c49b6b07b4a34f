"""Aleatoric uncertainty head: a compact 3D convnet trained with a β-weighted
Gaussian negative log-likelihood.

The network maps image-domain features (the mandatory absolute warped/fixed
difference plus optional intensity-derived channels) to s = ln sigma^2 per
structure; sigma^2 is the predicted variance of the label-propagation
residual.  Architecture: three blocks of (3x3x3 same-padded convolution,
batch normalization, LeakyReLU) followed by a final 3x3x3 convolution, with s
clamped to [-clamp, clamp] before exponentiation.

Forward and backward passes are written out by hand (im2col + GEMM) in
float64 and are checked against central finite differences in the test
suite.  The β weight sigma^(2β) multiplies the per-voxel loss but is excluded
from differentiation (stop-gradient).

Because only image-domain features are consumed, variance prediction runs
without any label volume at test time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .filters import local_mean_variance
from .uncertainty import UncertaintyKind, UncertaintyMap
from .volumes import (
    GridMismatchError,
    GridSpec,
    LabelVolume,
    ScalarVolume,
    VolumeError,
    _coerce_payload,
    _freeze,
)

__all__ = [
    "FEATURE_NAMES",
    "DEFAULT_FEATURES",
    "FeatureStack",
    "build_feature_stack",
    "HeadConfig",
    "TrainConfig",
    "HeadParameters",
    "TrainResult",
    "HeadNumericalError",
    "init_head_parameters",
    "forward",
    "beta_nll_loss",
    "backward",
    "train",
    "predict_aleatoric",
    "save_head_parameters",
    "load_head_parameters",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

FEATURE_NAMES = (
    "abs_diff",
    "warped_image",
    "fixed_image",
    "fixed_gradient_magnitude",
    "local_intensity_variance",
)
DEFAULT_FEATURES = FEATURE_NAMES

LOSS_FORMS = ("log", "printed")


class HeadNumericalError(ArithmeticError):
    """A non-finite value appeared in the head's forward/backward pass."""


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """Ordered image-domain feature channels on one grid; abs_diff is first."""

    grid: GridSpec
    names: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        if not names or names[0] != "abs_diff":
            raise VolumeError("FeatureStack: 'abs_diff' must be present and first")
        unknown = [n for n in names if n not in FEATURE_NAMES]
        if unknown:
            raise VolumeError(f"FeatureStack: unknown feature(s) {unknown}; known: {FEATURE_NAMES}")
        if len(set(names)) != len(names):
            raise VolumeError("FeatureStack: duplicate feature names")
        arr = _coerce_payload(np.asarray(self.data), self.grid, len(names), "FeatureStack")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("FeatureStack: payload contains non-finite values")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def build_feature_stack(
    fixed: ScalarVolume,
    warped: ScalarVolume,
    names: tuple[str, ...] = DEFAULT_FEATURES,
) -> FeatureStack:
    """Assemble feature channels from the fixed image and the warped moving image."""
    if fixed.grid != warped.grid:
        raise GridMismatchError("build_feature_stack: grids differ")
    channels = []
    for name in names:
        if name == "abs_diff":
            channels.append(np.abs(warped.data - fixed.data))
        elif name == "warped_image":
            channels.append(warped.data)
        elif name == "fixed_image":
            channels.append(fixed.data)
        elif name == "fixed_gradient_magnitude":
            gz, gy, gx = np.gradient(fixed.data)
            channels.append(np.sqrt(gx * gx + gy * gy + gz * gz))
        elif name == "local_intensity_variance":
            _, var = local_mean_variance(fixed.data, 3)
            channels.append(var)
        else:
            raise VolumeError(f"unknown feature {name!r}")
    return FeatureStack(fixed.grid, tuple(names), np.stack(channels))


@dataclass(frozen=True)
class HeadConfig:
    hidden_channels: int = 16
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise VolumeError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if not (0.0 < self.leaky_slope < 1.0):
            raise VolumeError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    epochs: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clamp: float = 10.0
    loss_form: str = "log"

    def __post_init__(self):
        if self.beta < 0 or not np.isfinite(self.beta):
            raise VolumeError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1:
            raise VolumeError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise VolumeError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.clamp <= 0:
            raise VolumeError(f"clamp must be > 0, got {self.clamp}")
        if self.loss_form not in LOSS_FORMS:
            raise VolumeError(f"loss_form must be one of {LOSS_FORMS}, got {self.loss_form!r}")


@dataclass
class HeadParameters:
    """Convolution kernels/biases plus batch-norm parameters and running stats.

    conv_weights[i] has shape (out, in, 3, 3, 3); the first three convs each
    carry batch-norm tensors, the final conv does not.
    """

    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    bn_running_mean: list[np.ndarray]
    bn_running_var: list[np.ndarray]
    leaky_slope: float = 0.2

    @property
    def in_channels(self) -> int:
        return self.conv_weights[0].shape[1]

    @property
    def hidden_channels(self) -> int:
        return self.conv_weights[0].shape[0]

    @property
    def out_channels(self) -> int:
        return self.conv_weights[3].shape[0]

    def named_tensors(self):
        """Trainable tensors in a fixed order (running stats excluded)."""
        for i in range(4):
            yield f"conv{i}.weight", self.conv_weights[i]
            yield f"conv{i}.bias", self.conv_biases[i]
            if i < 3:
                yield f"bn{i}.gamma", self.bn_gamma[i]
                yield f"bn{i}.beta", self.bn_beta[i]

    def get_tensor(self, name: str) -> np.ndarray:
        for n, t in self.named_tensors():
            if n == name:
                return t
        raise KeyError(name)

    def copy(self) -> "HeadParameters":
        return HeadParameters(
            [w.copy() for w in self.conv_weights],
            [b.copy() for b in self.conv_biases],
            [g.copy() for g in self.bn_gamma],
            [b.copy() for b in self.bn_beta],
            [m.copy() for m in self.bn_running_mean],
            [v.copy() for v in self.bn_running_var],
            self.leaky_slope,
        )

    def validate(self):
        for name, t in self.named_tensors():
            if not np.all(np.isfinite(t)):
                raise VolumeError(f"HeadParameters: non-finite values in {name}")
        for i, v in enumerate(self.bn_running_var):
            if not np.all(v > 0):
                raise VolumeError(f"HeadParameters: bn{i} running variance must be > 0")


def init_head_parameters(
    in_channels: int, out_channels: int, head: HeadConfig = HeadConfig(), seed: int = 0
) -> HeadParameters:
    """He-style initialization, seeded; biases zero, batch norm at identity."""
    rng = np.random.default_rng(int(seed))
    h = head.hidden_channels
    sizes = [(h, in_channels), (h, h), (h, h), (out_channels, h)]
    weights, biases = [], []
    for out_c, in_c in sizes:
        std = np.sqrt(2.0 / (in_c * 27))
        weights.append(rng.normal(0.0, std, size=(out_c, in_c, 3, 3, 3)))
        biases.append(np.zeros(out_c))
    return HeadParameters(
        weights,
        biases,
        [np.ones(h) for _ in range(3)],
        [np.zeros(h) for _ in range(3)],
        [np.zeros(h) for _ in range(3)],
        [np.ones(h) for _ in range(3)],
        head.leaky_slope,
    )


# ---------------------------------------------------------------------------
# Layer primitives


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, nz, ny, nx) -> (C*27, n) patch matrix for a 3x3x3 zero-padded conv."""
    c, nz, ny, nx = x.shape
    n = nz * ny * nx
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((c, 27, n), dtype=np.float64)
    k = 0
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                cols[:, k, :] = xp[:, dz : dz + nz, dy : dy + ny, dx : dx + nx].reshape(c, n)
                k += 1
    return cols.reshape(c * 27, n)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    c, nz, ny, nx = shape
    d = dcols.reshape(c, 27, nz, ny, nx)
    dxp = np.zeros((c, nz + 2, ny + 2, nx + 2), dtype=np.float64)
    k = 0
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                dxp[:, dz : dz + nz, dy : dy + ny, dx : dx + nx] += d[:, k]
                k += 1
    return dxp[:, 1:-1, 1:-1, 1:-1]


def _conv_forward(x, weight, bias):
    out_c = weight.shape[0]
    spatial = x.shape[1:]
    cols = _im2col(x)
    out = weight.reshape(out_c, -1) @ cols + bias[:, None]
    return out.reshape((out_c,) + spatial)


def _conv_backward(dout, x, weight):
    out_c = dout.shape[0]
    cols = _im2col(x)
    dflat = dout.reshape(out_c, -1)
    dweight = (dflat @ cols.T).reshape(weight.shape)
    dbias = dflat.sum(axis=1)
    dcols = weight.reshape(out_c, -1).T @ dflat
    dx = _col2im(dcols, x.shape)
    return dx, dweight, dbias


def _bn_forward_train(x, gamma, beta):
    mu = x.mean(axis=(1, 2, 3))
    var = x.var(axis=(1, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[:, None, None, None]) * inv[:, None, None, None]
    y = gamma[:, None, None, None] * xhat + beta[:, None, None, None]
    return y, (xhat, inv, mu, var)


def _bn_forward_infer(x, gamma, beta, running_mean, running_var):
    inv = 1.0 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean[:, None, None, None]) * inv[:, None, None, None]
    return gamma[:, None, None, None] * xhat + beta[:, None, None, None]


def _bn_backward(dy, xhat, inv, gamma):
    m = dy[0].size
    dgamma = (dy * xhat).sum(axis=(1, 2, 3))
    dbeta = dy.sum(axis=(1, 2, 3))
    dx = (gamma * inv)[:, None, None, None] * (
        dy
        - dbeta[:, None, None, None] / m
        - xhat * dgamma[:, None, None, None] / m
    )
    return dx, dgamma, dbeta


def _leaky_forward(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_backward(dy, x, slope):
    return dy * np.where(x > 0, 1.0, slope)


# ---------------------------------------------------------------------------
# Network forward/backward


def _forward_full(params: HeadParameters, x: np.ndarray, mode: str, clamp: float):
    """Returns (s, cache).  Pure: never mutates params or running stats."""
    if mode not in ("train", "infer"):
        raise VolumeError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.shape[0] != params.in_channels:
        raise VolumeError(
            f"feature stack has {x.shape[0]} channels, head expects {params.in_channels}"
        )
    cache = {"inputs": [], "bn": [], "pre_act": [], "batch_stats": []}
    h = x
    for i in range(3):
        cache["inputs"].append(h)
        z = _conv_forward(h, params.conv_weights[i], params.conv_biases[i])
        if mode == "train":
            y, bn_cache = _bn_forward_train(z, params.bn_gamma[i], params.bn_beta[i])
            cache["batch_stats"].append((bn_cache[2], bn_cache[3]))
        else:
            y = _bn_forward_infer(
                z,
                params.bn_gamma[i],
                params.bn_beta[i],
                params.bn_running_mean[i],
                params.bn_running_var[i],
            )
            bn_cache = None
        cache["bn"].append(bn_cache)
        cache["pre_act"].append(y)
        h = _leaky_forward(y, params.leaky_slope)
        if not np.all(np.isfinite(h)):
            raise HeadNumericalError(f"non-finite activation after block {i}")
    cache["inputs"].append(h)
    pre = _conv_forward(h, params.conv_weights[3], params.conv_biases[3])
    if not np.all(np.isfinite(pre)):
        raise HeadNumericalError("non-finite activation after final convolution")
    s = np.clip(pre, -clamp, clamp)
    cache["pre_clamp"] = pre
    cache["clamp"] = clamp
    return s, cache


def forward(
    params: HeadParameters,
    features: FeatureStack,
    mode: str = "infer",
    clamp: float = 10.0,
) -> np.ndarray:
    """Predicted s = ln sigma^2, one channel per structure, clamped.

    Train mode normalizes with batch statistics; infer mode with the stored
    running statistics.  Running statistics are only advanced by the trainer.
    """
    s, _ = _forward_full(params, features.data, mode, clamp)
    return s


def _label_array(labels, what: str) -> np.ndarray:
    if isinstance(labels, LabelVolume):
        return labels.data
    arr = np.asarray(labels, dtype=np.float64)
    if arr.ndim != 4:
        raise VolumeError(f"{what}: expected (channels, nz, ny, nx) data, got shape {arr.shape}")
    return arr


def beta_nll_loss(
    s_map: np.ndarray,
    warped_labels,
    target_labels,
    beta: float = 1.0,
    form: str = "log",
    weight: np.ndarray | None = None,
    stop_gradient: bool = True,
) -> tuple[float, np.ndarray]:
    """β-weighted Gaussian NLL between soft warped labels and target labels.

    Per voxel and structure channel, with sigma^2 = exp(s) and squared
    residual e2 = (warped - target)^2:

    * form "log" (default): w * (e2 / (2 sigma^2) + s / 2), the β-NLL of the
      heteroscedastic-regression formulation this loss follows.
    * form "printed": w * (e2 / (2 sigma^2) + sigma^2 / 2).

    The weight w = sigma^(2β) is excluded from differentiation
    (stop-gradient); pass ``weight`` to freeze it at externally supplied
    values, or ``stop_gradient=False`` to differentiate through it (test
    hook).  Returns (mean loss, d loss / d s).
    """
    if form not in LOSS_FORMS:
        raise VolumeError(f"form must be one of {LOSS_FORMS}, got {form!r}")
    w = _label_array(warped_labels, "warped_labels")
    t = _label_array(target_labels, "target_labels")
    s = np.asarray(s_map, dtype=np.float64)
    if s.shape != w.shape or s.shape != t.shape:
        raise VolumeError(
            f"beta_nll_loss: shape mismatch s {s.shape}, warped {w.shape}, target {t.shape}"
        )
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(w)) and np.all(np.isfinite(t))):
        raise VolumeError("beta_nll_loss: inputs contain non-finite values")

    e2 = (w - t) ** 2
    inv_sigma2 = np.exp(-s)
    if form == "log":
        base = 0.5 * e2 * inv_sigma2 + 0.5 * s
        dbase = -0.5 * e2 * inv_sigma2 + 0.5
    else:
        sigma2 = np.exp(s)
        base = 0.5 * e2 * inv_sigma2 + 0.5 * sigma2
        dbase = -0.5 * e2 * inv_sigma2 + 0.5 * sigma2

    if weight is None:
        wgt = np.exp(beta * s) if beta != 0 else np.ones_like(s)
    else:
        wgt = np.asarray(weight, dtype=np.float64)
        if wgt.shape != s.shape:
            raise VolumeError("beta_nll_loss: weight shape mismatch")

    loss = float((wgt * base).mean())
    if stop_gradient or weight is not None:
        grad = wgt * dbase / s.size
    else:
        grad = wgt * (beta * base + dbase) / s.size
    return loss, grad


def backward(
    params: HeadParameters,
    features: FeatureStack,
    warped_labels,
    target_labels,
    cfg: TrainConfig,
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Loss and exact reverse-mode gradients for one training volume.

    Runs the forward pass in train mode (batch statistics) and
    backpropagates the β-NLL through clamp, convolutions, batch norm, and
    LeakyReLU.  Returns (loss, gradients keyed like ``named_tensors``,
    cache with the batch statistics for the running-stat update).
    """
    s, cache = _forward_full(params, features.data, "train", cfg.clamp)
    loss, ds = beta_nll_loss(
        s, warped_labels, target_labels, cfg.beta, cfg.loss_form
    )
    grads: dict[str, np.ndarray] = {}

    pre = cache["pre_clamp"]
    d = ds * ((pre > -cfg.clamp) & (pre < cfg.clamp))

    dx, dw, db = _conv_backward(d, cache["inputs"][3], params.conv_weights[3])
    grads["conv3.weight"] = dw
    grads["conv3.bias"] = db

    for i in range(2, -1, -1):
        dy = _leaky_backward(dx, cache["pre_act"][i], params.leaky_slope)
        xhat, inv, _, _ = cache["bn"][i]
        dz, dgamma, dbeta = _bn_backward(dy, xhat, inv, params.bn_gamma[i])
        grads[f"bn{i}.gamma"] = dgamma
        grads[f"bn{i}.beta"] = dbeta
        dx, dw, db = _conv_backward(dz, cache["inputs"][i], params.conv_weights[i])
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise HeadNumericalError(f"non-finite gradient for {name}")
    return loss, grads, cache


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainResult:
    params: HeadParameters
    loss_history: tuple[float, ...]


def _check_pairs(pairs):
    if not pairs:
        raise VolumeError("train: at least one (features, warped, target) pair required")
    in_ch = pairs[0][0].channels
    out_ch = _label_array(pairs[0][1], "warped_labels").shape[0]
    for k, (stack, warped, target) in enumerate(pairs):
        w = _label_array(warped, f"pair {k} warped_labels")
        t = _label_array(target, f"pair {k} target_labels")
        if stack.channels != in_ch:
            raise VolumeError(f"pair {k}: feature channel count differs")
        if w.shape != t.shape or w.shape[0] != out_ch:
            raise VolumeError(f"pair {k}: label shapes inconsistent")
        if w.shape[1:] != stack.grid.shape:
            raise VolumeError(f"pair {k}: labels and features on different grids")
    return in_ch, out_ch


def train(
    pairs: list,
    cfg: TrainConfig = TrainConfig(),
    head: HeadConfig = HeadConfig(),
) -> TrainResult:
    """Adam-optimize the head on (features, warped_labels, target_labels) volumes.

    One Adam step per volume per epoch; batch norm runs on per-volume
    statistics with running stats updated at momentum 0.1.  Deterministic
    given ``cfg.seed`` under single-threaded execution.
    """
    in_ch, out_ch = _check_pairs(pairs)
    params = init_head_parameters(in_ch, out_ch, head, cfg.seed)

    moments1 = {name: np.zeros_like(t) for name, t in params.named_tensors()}
    moments2 = {name: np.zeros_like(t) for name, t in params.named_tensors()}
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for stack, warped, target in pairs:
            loss, grads, cache = backward(params, stack, warped, target, cfg)
            if not np.isfinite(loss):
                raise HeadNumericalError(f"non-finite loss at epoch {epoch}")
            epoch_loss += loss
            for i, (mu, var) in enumerate(cache["batch_stats"]):
                params.bn_running_mean[i] *= 1.0 - BN_MOMENTUM
                params.bn_running_mean[i] += BN_MOMENTUM * mu
                params.bn_running_var[i] *= 1.0 - BN_MOMENTUM
                params.bn_running_var[i] += BN_MOMENTUM * np.maximum(var, BN_EPS)
            step += 1
            bias1 = 1.0 - cfg.beta1**step
            bias2 = 1.0 - cfg.beta2**step
            for name, tensor in params.named_tensors():
                g = grads[name]
                m = moments1[name]
                v = moments2[name]
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                tensor -= cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
        history.append(epoch_loss / len(pairs))
    params.validate()
    return TrainResult(params.copy(), tuple(history))


def predict_aleatoric(
    params: HeadParameters, features: FeatureStack, clamp: float = 10.0
) -> UncertaintyMap:
    """Predicted sigma^2 = exp(s) per structure; strictly positive, label-free."""
    s = forward(params, features, mode="infer", clamp=clamp)
    return UncertaintyMap(features.grid, UncertaintyKind.ALEATORIC_SEG, np.exp(s))


# ---------------------------------------------------------------------------
# Serialization: magic "RAHD1", little-endian float32 payload.
#
# Layout after the magic line: three uint32 (in_channels, hidden_channels,
# out_channels) and one float32 (leaky_slope), then for each block i in 0..2:
# conv{i}.weight, conv{i}.bias, bn{i}.gamma, bn{i}.beta, bn{i}.running_mean,
# bn{i}.running_var, and finally conv3.weight, conv3.bias.  Tensors are C
# order with the shapes implied by the three channel counts.

_MAGIC = b"RAHD1\n"


def save_head_parameters(path, params: HeadParameters) -> None:
    params.validate()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIIf",
                params.in_channels,
                params.hidden_channels,
                params.out_channels,
                params.leaky_slope,
            )
        )
        for i in range(3):
            for t in (
                params.conv_weights[i],
                params.conv_biases[i],
                params.bn_gamma[i],
                params.bn_beta[i],
                params.bn_running_mean[i],
                params.bn_running_var[i],
            ):
                fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params.conv_weights[3], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params.conv_biases[3], dtype="<f4").tobytes())


def load_head_parameters(path) -> HeadParameters:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise VolumeError(f"{path}: bad magic; not a head-parameter file")
    off = len(_MAGIC)
    try:
        in_c, hidden, out_c, slope = struct.unpack_from("<IIIf", blob, off)
    except struct.error as exc:
        raise VolumeError(f"{path}: truncated header") from exc
    off += struct.calcsize("<IIIf")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(blob):
            raise VolumeError(f"{path}: truncated payload (need {end} bytes, have {len(blob)})")
        arr = np.frombuffer(blob[off:end], dtype="<f4").astype(np.float64).reshape(shape)
        off = end
        return arr

    weights, biases = [], []
    gammas, betas, rmeans, rvars = [], [], [], []
    sizes = [(hidden, in_c), (hidden, hidden), (hidden, hidden), (out_c, hidden)]
    for i in range(3):
        weights.append(take((sizes[i][0], sizes[i][1], 3, 3, 3)))
        biases.append(take((sizes[i][0],)))
        gammas.append(take((hidden,)))
        betas.append(take((hidden,)))
        rmeans.append(take((hidden,)))
        rvars.append(take((hidden,)))
    weights.append(take((out_c, hidden, 3, 3, 3)))
    biases.append(take((out_c,)))
    if off != len(blob):
        raise VolumeError(f"{path}: {len(blob) - off} trailing bytes after payload")
    params = HeadParameters(weights, biases, gammas, betas, rmeans, rvars, float(slope))
    params.validate()
    return params
