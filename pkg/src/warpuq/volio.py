"""Bit-exact volume file format (RVOL1).

Layout: the ASCII magic line ``RVOL1`` followed by header lines
``dims nx ny nz``, ``spacing sx sy sz``, ``channels N``,
``kind <scalar|label|field|uncertainty:<kind>>``, ``dtype f32le``, one blank
line, then the payload: little-endian 32-bit floats, x-fastest within each
channel, channel-major (fields store u_x, u_y, u_z as three channels).

Write-then-read is bit-identical at float32 precision; parse failures name
the offending header line or the expected/actual payload byte counts.
"""

from __future__ import annotations

import numpy as np

from .uncertainty import UncertaintyKind, UncertaintyMap
from .volumes import (
    DisplacementField,
    GridSpec,
    LabelVolume,
    ScalarVolume,
    VolumeError,
)

__all__ = ["VolumeParseError", "read_volume", "write_volume"]

_MAGIC = "RVOL1"
_DTYPE = "f32le"


class VolumeParseError(VolumeError):
    """Malformed volume file; message carries the line number or byte counts."""


def _kind_and_payload(volume):
    if isinstance(volume, ScalarVolume):
        return "scalar", volume.data[np.newaxis]
    if isinstance(volume, LabelVolume):
        return "label", volume.data
    if isinstance(volume, DisplacementField):
        return "field", volume.data
    if isinstance(volume, UncertaintyMap):
        return f"uncertainty:{volume.kind.value}", volume.data
    raise VolumeError(f"cannot serialize object of type {type(volume).__name__}")


def write_volume(path, volume) -> None:
    """Serialize a scalar/label/field/uncertainty volume to an RVOL1 file."""
    kind, payload = _kind_and_payload(volume)
    g = volume.grid
    header = (
        f"{_MAGIC}\n"
        f"dims {g.dims[0]} {g.dims[1]} {g.dims[2]}\n"
        f"spacing {g.spacing[0]!r} {g.spacing[1]!r} {g.spacing[2]!r}\n"
        f"channels {payload.shape[0]}\n"
        f"kind {kind}\n"
        f"dtype {_DTYPE}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _parse_header(blob: bytes, path) -> tuple[dict, int]:
    fields = {}
    offset = 0
    line_no = 0
    order = ["dims", "spacing", "channels", "kind", "dtype"]
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise VolumeParseError(f"{path}: line {line_no + 1}: unterminated header")
        line = blob[offset : end].decode("ascii", errors="replace")
        offset = end + 1
        line_no += 1
        if line_no == 1:
            if line != _MAGIC:
                raise VolumeParseError(f"{path}: line 1: bad magic {line!r}, expected {_MAGIC!r}")
            continue
        if line == "":
            break
        parts = line.split()
        key = parts[0]
        if key not in order:
            raise VolumeParseError(f"{path}: line {line_no}: unknown header field {key!r}")
        if key in fields:
            raise VolumeParseError(f"{path}: line {line_no}: duplicate header field {key!r}")
        try:
            if key == "dims":
                fields[key] = tuple(int(v) for v in parts[1:])
                if len(fields[key]) != 3:
                    raise ValueError
            elif key == "spacing":
                fields[key] = tuple(float(v) for v in parts[1:])
                if len(fields[key]) != 3:
                    raise ValueError
            elif key == "channels":
                (fields[key],) = (int(parts[1]),)
            elif key in ("kind", "dtype"):
                (fields[key],) = (parts[1],)
        except (ValueError, IndexError):
            raise VolumeParseError(f"{path}: line {line_no}: malformed {key!r} field: {line!r}")
    missing = [k for k in order if k not in fields]
    if missing:
        raise VolumeParseError(f"{path}: line {line_no}: missing header field(s) {missing}")
    if fields["dtype"] != _DTYPE:
        raise VolumeParseError(f"{path}: unsupported dtype {fields['dtype']!r}, expected {_DTYPE!r}")
    return fields, offset


def read_volume(path):
    """Parse an RVOL1 file into the container matching its ``kind`` header."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, offset = _parse_header(blob, path)
    try:
        grid = GridSpec(fields["dims"], fields["spacing"])
    except VolumeError as exc:
        raise VolumeParseError(f"{path}: invalid grid: {exc}") from exc
    channels = fields["channels"]
    if channels < 1:
        raise VolumeParseError(f"{path}: channels must be >= 1, got {channels}")
    expected = 4 * channels * grid.voxel_count
    actual = len(blob) - offset
    if actual != expected:
        raise VolumeParseError(
            f"{path}: payload length mismatch: expected {expected} bytes, got {actual}"
        )
    payload = (
        np.frombuffer(blob, dtype="<f4", count=channels * grid.voxel_count, offset=offset)
        .astype(np.float64)
        .reshape((channels,) + grid.shape)
    )
    if not np.all(np.isfinite(payload)):
        bad = int(np.argmax(~np.isfinite(payload)))
        raise VolumeParseError(f"{path}: non-finite payload value at flat index {bad}")

    kind = fields["kind"]
    if kind == "scalar":
        if channels != 1:
            raise VolumeParseError(f"{path}: scalar volumes are single-channel, got {channels}")
        return ScalarVolume(grid, payload[0])
    if kind == "label":
        lo = payload.min()
        hi = payload.max()
        if lo < 0.0 or hi > 1.0:
            bad = int(np.argmax((payload < 0.0) | (payload > 1.0)))
            raise VolumeParseError(
                f"{path}: label value {payload.reshape(-1)[bad]!r} at flat index {bad} "
                "outside [0, 1]"
            )
        binary = bool(np.all((payload == 0.0) | (payload == 1.0)))
        return LabelVolume(grid, payload, binary=binary)
    if kind == "field":
        if channels != 3:
            raise VolumeParseError(f"{path}: field volumes need 3 channels, got {channels}")
        return DisplacementField(grid, payload)
    if kind.startswith("uncertainty:"):
        tag = kind.split(":", 1)[1]
        try:
            ukind = UncertaintyKind(tag)
        except ValueError:
            raise VolumeParseError(f"{path}: unknown uncertainty kind {tag!r}")
        try:
            return UncertaintyMap(grid, ukind, payload)
        except VolumeError as exc:
            raise VolumeParseError(f"{path}: invalid uncertainty payload: {exc}") from exc
    raise VolumeParseError(f"{path}: unknown kind {kind!r}")
