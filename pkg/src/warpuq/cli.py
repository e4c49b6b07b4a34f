"""Command-line surface tying the pipeline together.

Subcommands: phantom, register, warp, uncertainty, train-aleatoric,
predict-aleatoric, evaluate, plot, default-config.  Every failure exits
nonzero with a one-line machine-parseable message ``error: <category>:
<detail>`` on stderr and removes any partially written outputs.  Exit codes:
0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import os
import sys

import numpy as np

from . import __version__
from .aleatoric import (
    build_feature_stack,
    load_head_parameters,
    predict_aleatoric,
    save_head_parameters,
    train,
)
from .metrics import (
    DegenerateCorrelationError,
    evaluate_all,
    write_report_csv,
)
from .phantom import make_ground_truth_pair
from .registration import (
    RegistrationDivergenceError,
    register,
    sample_registrations,
)
from .aleatoric import HeadNumericalError
from .runconfig import DEFAULT_CONFIG_TEXT, ConfigError, RunConfig, load_config, parse_config
from .uncertainty import (
    appearance_uncertainty,
    epistemic_seg_uncertainty,
    transformation_uncertainty,
)
from .volumes import (
    DisplacementField,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    VolumeError,
    checksum,
)
from .volio import read_volume, write_volume
from .warp import argmax_discretize, warp_labels, warp_scalar

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


class _Outputs:
    """Tracks files created by this run so failures leave no partial outputs."""

    def __init__(self):
        self.paths = []

    def track(self, path):
        self.paths.append(path)
        return path

    def discard_all(self):
        for path in self.paths:
            try:
                os.remove(path)
            except OSError:
                pass


def _load_cfg(path) -> RunConfig:
    if path is None:
        return parse_config("")
    return load_config(path)


def _read_as(path, expected_type, what: str):
    vol = read_volume(path)
    if not isinstance(vol, expected_type):
        raise VolumeError(
            f"{path}: expected a {expected_type.__name__} ({what}), got {type(vol).__name__}"
        )
    return vol


def _read_fields(args) -> SampleSet:
    paths = list(args.field or [])
    if getattr(args, "fields_dir", None):
        paths.extend(sorted(glob.glob(os.path.join(args.fields_dir, "field_*.rvol"))))
    if not paths:
        raise UsageError("no displacement fields given (use --field or --fields-dir)")
    fields = tuple(_read_as(p, DisplacementField, "displacement field") for p in paths)
    return SampleSet(fields)


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_default_config(args, outputs):
    if args.out:
        with open(outputs.track(args.out), "w") as fh:
            fh.write(DEFAULT_CONFIG_TEXT)
    else:
        sys.stdout.write(DEFAULT_CONFIG_TEXT)


def _cmd_phantom(args, outputs):
    cfg = _load_cfg(args.config)
    phantom = cfg.phantom_spec()
    field_spec = cfg.field_spec()
    if args.seed is not None:
        from dataclasses import replace

        phantom = replace(phantom, seed=args.seed)
        field_spec = replace(field_spec, seed=args.seed + 1000003)
    fixed, moving, labels_fixed, labels_moving, true_field = make_ground_truth_pair(
        phantom, field_spec
    )
    os.makedirs(args.out_dir, exist_ok=True)
    for name, vol in (
        ("fixed.rvol", fixed),
        ("moving.rvol", moving),
        ("labels_moving.rvol", labels_moving),
        ("labels_fixed.rvol", labels_fixed),
        ("true_field.rvol", true_field),
    ):
        write_volume(outputs.track(os.path.join(args.out_dir, name)), vol)


def _cmd_register(args, outputs):
    cfg = _load_cfg(args.config)
    reg_cfg = cfg.registration_config()
    if args.seed is not None:
        from dataclasses import replace

        reg_cfg = replace(reg_cfg, seed=args.seed)
    fixed = _read_as(args.fixed, ScalarVolume, "fixed image")
    moving = _read_as(args.moving, ScalarVolume, "moving image")
    labels_moving = labels_fixed = None
    if (args.labels_moving is None) != (args.labels_fixed is None):
        raise UsageError("--labels-moving and --labels-fixed must be given together")
    if args.labels_moving is not None:
        labels_moving = _read_as(args.labels_moving, LabelVolume, "moving labels")
        labels_fixed = _read_as(args.labels_fixed, LabelVolume, "fixed labels")
    os.makedirs(args.out_dir, exist_ok=True)
    policy = cfg.stochastic_policy(args.samples)
    samples = sample_registrations(fixed, moving, labels_moving, labels_fixed, reg_cfg, policy)
    log_lines = [
        f"warpuq {__version__} register",
        f"config: {reg_cfg}",
        f"policy: {policy}",
    ]
    for i, field in enumerate(samples):
        name = f"field_{i:03d}.rvol"
        write_volume(outputs.track(os.path.join(args.out_dir, name)), field)
        log_lines.append(f"{name} checksum {checksum(field)}")
    with open(outputs.track(os.path.join(args.out_dir, "register_log.txt")), "w") as fh:
        fh.write("\n".join(log_lines) + "\n")


def _cmd_warp(args, outputs):
    field = _read_as(args.field, DisplacementField, "displacement field")
    if args.labels:
        src = _read_as(getattr(args, "in"), LabelVolume, "label volume")
        out = warp_labels(src, field)
        if args.argmax:
            out = argmax_discretize(out)
    else:
        if args.argmax:
            raise UsageError("--argmax requires --labels")
        src = _read_as(getattr(args, "in"), ScalarVolume, "scalar volume")
        out = warp_scalar(src, field)
    write_volume(outputs.track(args.out), out)


def _cmd_uncertainty(args, outputs):
    samples = _read_fields(args)
    if args.kind == "trans":
        umap = transformation_uncertainty(samples)
    elif args.kind == "appear":
        if not (args.fixed and args.moving):
            raise UsageError("--kind appear requires --fixed and --moving")
        fixed = _read_as(args.fixed, ScalarVolume, "fixed image")
        moving = _read_as(args.moving, ScalarVolume, "moving image")
        umap = appearance_uncertainty(moving, fixed, samples)
    else:
        if not args.labels_moving:
            raise UsageError("--kind epi requires --labels-moving")
        labels = _read_as(args.labels_moving, LabelVolume, "moving labels")
        umap = epistemic_seg_uncertainty(labels, samples)
    write_volume(outputs.track(args.out), umap)


def _read_manifest(path):
    rows = []
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"fixed", "moving", "field", "labels_moving", "labels_fixed"}
            if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
                raise VolumeError(
                    f"{path}: manifest must have columns {sorted(required)}, "
                    f"got {reader.fieldnames}"
                )
            base = os.path.dirname(os.path.abspath(path))
            for row in reader:
                rows.append(
                    {
                        k: v if os.path.isabs(v) else os.path.join(base, v)
                        for k, v in row.items()
                        if k in required
                    }
                )
    except OSError as exc:
        raise VolumeError(f"cannot read manifest {path}: {exc}") from exc
    if not rows:
        raise VolumeError(f"{path}: manifest lists no training pairs")
    return rows


def _cmd_train_aleatoric(args, outputs):
    cfg = _load_cfg(args.config)
    train_cfg = cfg.train_config()
    if args.seed is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, seed=args.seed)
    names = cfg.feature_names()
    pairs = []
    for row in _read_manifest(args.pairs):
        fixed = _read_as(row["fixed"], ScalarVolume, "fixed image")
        moving = _read_as(row["moving"], ScalarVolume, "moving image")
        field = _read_as(row["field"], DisplacementField, "displacement field")
        labels_moving = _read_as(row["labels_moving"], LabelVolume, "moving labels")
        labels_fixed = _read_as(row["labels_fixed"], LabelVolume, "fixed labels")
        features = build_feature_stack(fixed, warp_scalar(moving, field), names)
        pairs.append((features, warp_labels(labels_moving, field), labels_fixed))
    result = train(pairs, train_cfg, cfg.head_config())
    save_head_parameters(outputs.track(args.out), result.params)
    loss_csv = args.loss_csv or args.out + ".loss.csv"
    with open(outputs.track(loss_csv), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "loss"))
        for epoch, loss in enumerate(result.loss_history):
            writer.writerow((epoch, repr(loss)))


def _cmd_predict_aleatoric(args, outputs):
    cfg = _load_cfg(args.config)
    params = load_head_parameters(args.params)
    fixed = _read_as(args.fixed, ScalarVolume, "fixed image")
    moving = _read_as(args.moving, ScalarVolume, "moving image")
    field = _read_as(args.field, DisplacementField, "displacement field")
    names = cfg.feature_names()
    features = build_feature_stack(fixed, warp_scalar(moving, field), names)
    if features.channels != params.in_channels:
        raise VolumeError(
            f"feature stack has {features.channels} channels but the trained head "
            f"expects {params.in_channels}; use the training feature list"
        )
    write_volume(outputs.track(args.out), predict_aleatoric(params, features))


def _cmd_evaluate(args, outputs):
    if not args.all:
        raise UsageError("evaluate currently requires --all")
    cfg = _load_cfg(args.config)
    fixed = _read_as(args.fixed, ScalarVolume, "fixed image")
    moving = _read_as(args.moving, ScalarVolume, "moving image")
    labels_moving = _read_as(args.labels_moving, LabelVolume, "moving labels")
    labels_fixed = _read_as(args.labels_fixed, LabelVolume, "fixed labels")
    samples = _read_fields(args)
    ale_map = None
    if args.ale_map:
        from .uncertainty import UncertaintyKind, UncertaintyMap

        ale_map = read_volume(args.ale_map)
        if not isinstance(ale_map, UncertaintyMap) or ale_map.kind is not UncertaintyKind.ALEATORIC_SEG:
            raise VolumeError(f"{args.ale_map}: expected an aleatoric_seg uncertainty map")
    report = evaluate_all(
        fixed,
        moving,
        labels_moving,
        labels_fixed,
        samples,
        ale_map,
        mask_policy=args.mask_policy or cfg.mask_policy(),
    )
    write_report_csv(outputs.track(args.out), report)


def _parse_slice(spec: str, dims) -> tuple[int, int]:
    try:
        axis_name, index_text = spec.split("=", 1)
        axis = {"x": 0, "y": 1, "z": 2}[axis_name.strip()]
        index = int(index_text)
    except (ValueError, KeyError):
        raise UsageError(f"bad --slice {spec!r}; expected like z=8")
    if not (0 <= index < dims[axis]):
        raise UsageError(f"slice index {index} out of range for axis {axis_name} (dim {dims[axis]})")
    return axis, index


def _cmd_plot(args, outputs):
    vol = read_volume(args.map)
    data = vol.data
    if data.ndim == 3:
        data = data[np.newaxis]
    if not (0 <= args.channel < data.shape[0]):
        raise UsageError(f"--channel {args.channel} out of range for {data.shape[0]} channel(s)")
    axis, index = _parse_slice(args.slice, vol.grid.dims)
    chan = data[args.channel]
    if axis == 0:
        sl = chan[:, :, index]
    elif axis == 1:
        sl = chan[:, index, :]
    else:
        sl = chan[index, :, :]
    lo = float(sl.min())
    hi = float(sl.max())
    if hi > lo:
        img = np.round(255.0 * (sl - lo) / (hi - lo)).astype(np.uint8)
    else:
        img = np.zeros(sl.shape, dtype=np.uint8)
    h, w = img.shape
    with open(outputs.track(args.out), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpuq",
        description="Registration and segmentation uncertainty for deformable 3D registration.",
    )
    parser.add_argument("--version", action="version", version=f"warpuq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("default-config", help="print the documented default configuration")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(handler=_cmd_default_config)

    p = sub.add_parser("phantom", help="generate a synthetic ground-truth pair")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override phantom/field seeds")
    p.set_defaults(handler=_cmd_phantom)

    p = sub.add_parser("register", help="run stochastic deformable registration")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--labels-moving")
    p.add_argument("--labels-fixed")
    p.add_argument("--config")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the registration seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=_cmd_register)

    p = sub.add_parser("warp", help="warp a volume by a displacement field")
    p.add_argument("--in", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--labels", action="store_true", help="treat input as a label volume")
    p.add_argument("--argmax", action="store_true", help="discretize warped labels")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_warp)

    p = sub.add_parser("uncertainty", help="compute a registration/segmentation uncertainty map")
    p.add_argument("--kind", required=True, choices=("trans", "appear", "epi"))
    p.add_argument("--field", action="append", help="displacement field file (repeatable)")
    p.add_argument("--fields-dir", help="directory containing field_*.rvol")
    p.add_argument("--fixed")
    p.add_argument("--moving")
    p.add_argument("--labels-moving")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_uncertainty)

    p = sub.add_parser("train-aleatoric", help="train the aleatoric variance head")
    p.add_argument("--pairs", required=True, help="CSV manifest: fixed,moving,field,labels_moving,labels_fixed")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--out", required=True, help="output parameter file (.rahd)")
    p.add_argument("--loss-csv", help="loss history CSV (default: <out>.loss.csv)")
    p.set_defaults(handler=_cmd_train_aleatoric)

    p = sub.add_parser("predict-aleatoric", help="predict aleatoric uncertainty (no labels needed)")
    p.add_argument("--params", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--config", help="must list the same head.features used in training")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_predict_aleatoric)

    p = sub.add_parser("evaluate", help="compute the full metric report CSV")
    p.add_argument("--all", action="store_true", help="run every metric (required)")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--labels-moving", required=True)
    p.add_argument("--labels-fixed", required=True)
    p.add_argument("--field", action="append")
    p.add_argument("--fields-dir")
    p.add_argument("--ale-map")
    p.add_argument("--mask-policy", choices=("whole", "foreground"))
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("plot", help="render a slice of a map to a PGM image")
    p.add_argument("--map", required=True)
    p.add_argument("--slice", required=True, help="like z=8 (axes: x, y, z)")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    outputs = _Outputs()
    try:
        args.handler(args, outputs)
        return EXIT_OK
    except UsageError as exc:
        outputs.discard_all()
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RegistrationDivergenceError, HeadNumericalError, DegenerateCorrelationError) as exc:
        outputs.discard_all()
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeError, ConfigError) as exc:
        outputs.discard_all()
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        outputs.discard_all()
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
