"""Minimal single-file NRRD reader/writer (raw, little-endian).

Only what the toolkit needs: attached raw payloads, scalar 3-D grids and
3-component vector grids (displacement fields).
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .volume import IDENTITY_ORIENTATION, LabelVolume, Mask3, Volume3

_TYPES = {
    "uchar": np.uint8, "unsigned char": np.uint8, "uint8": np.uint8, "uint8_t": np.uint8,
    "signed char": np.int8, "int8": np.int8, "int8_t": np.int8,
    "short": np.int16, "int16": np.int16, "int16_t": np.int16, "signed short": np.int16,
    "ushort": np.uint16, "unsigned short": np.uint16, "uint16": np.uint16, "uint16_t": np.uint16,
    "int": np.int32, "int32": np.int32, "int32_t": np.int32, "signed int": np.int32,
    "uint": np.uint32, "unsigned int": np.uint32, "uint32": np.uint32, "uint32_t": np.uint32,
    "float": np.float32,
    "double": np.float64,
}
_TYPE_NAMES = {np.dtype(np.uint8): "uchar", np.dtype(np.int16): "short",
               np.dtype(np.int32): "int", np.dtype(np.uint16): "ushort",
               np.dtype(np.float32): "float", np.dtype(np.float64): "double"}


class NrrdError(Exception):
    code = "nrrd"


class NrrdMissingFileError(NrrdError, FileNotFoundError):
    code = "missing-file"


class NrrdHeaderError(NrrdError):
    code = "malformed-header"


class NrrdDimensionError(NrrdError):
    code = "bad-dimension"


class NrrdSizeError(NrrdError):
    code = "size-mismatch"


def _fmt(x: float) -> str:
    return repr(float(x))


def _write(path, array: np.ndarray, spacings, extra: dict[str, str], kinds=None) -> None:
    """``array`` is in NRRD axis order (fastest axis first)."""
    dtype = np.dtype(array.dtype)
    if dtype not in _TYPE_NAMES:
        raise TypeError(f"unsupported dtype {dtype}")
    lines = [
        "NRRD0004",
        f"type: {_TYPE_NAMES[dtype]}",
        f"dimension: {array.ndim}",
        "sizes: " + " ".join(str(n) for n in array.shape),
        "spacings: " + " ".join("nan" if s is None else _fmt(s) for s in spacings),
    ]
    if kinds:
        lines.append("kinds: " + " ".join(kinds))
    if dtype.itemsize > 1:
        lines.append("endian: little")
    lines.append("encoding: raw")
    for key in sorted(extra):
        lines.append(f"{key}:={extra[key]}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    payload = np.asarray(array, dtype=dtype.newbyteorder("<")).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read(path) -> tuple[dict[str, str], dict[str, str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise NrrdMissingFileError(f"no such file: {path}")
    raw = path.read_bytes()
    sep = raw.find(b"\n\n")
    if not raw.startswith(b"NRRD") or sep < 0:
        raise NrrdHeaderError(f"{path}: not an attached-header NRRD file")
    try:
        text = raw[:sep].decode("ascii")
    except UnicodeDecodeError as e:
        raise NrrdHeaderError(f"{path}: non-ascii header") from e
    fields, keyvals = {}, {}
    for line in text.split("\n")[1:]:
        line = line.rstrip("\r")
        if not line or line.startswith("#"):
            continue
        if ":=" in line:
            k, v = line.split(":=", 1)
            keyvals[k] = v
        elif ": " in line:
            k, v = line.split(": ", 1)
            fields[k.strip().lower()] = v.strip()
        else:
            raise NrrdHeaderError(f"{path}: cannot parse header line {line!r}")

    for key in ("type", "dimension", "sizes", "encoding"):
        if key not in fields:
            raise NrrdHeaderError(f"{path}: missing required field {key!r}")
    if fields["type"] not in _TYPES:
        raise NrrdHeaderError(f"{path}: unsupported type {fields['type']!r}")
    if fields["encoding"] != "raw":
        raise NrrdHeaderError(f"{path}: unsupported encoding {fields['encoding']!r}")
    if "data file" in fields or "datafile" in fields:
        raise NrrdHeaderError(f"{path}: detached data files are not supported")
    try:
        ndim = int(fields["dimension"])
        sizes = [int(s) for s in fields["sizes"].split()]
    except ValueError as e:
        raise NrrdHeaderError(f"{path}: bad dimension/sizes") from e
    if len(sizes) != ndim or any(s < 1 for s in sizes):
        raise NrrdHeaderError(f"{path}: sizes {sizes} inconsistent with dimension {ndim}")
    dtype = np.dtype(_TYPES[fields["type"]])
    endian = fields.get("endian", "little")
    if dtype.itemsize > 1 and endian != "little":
        raise NrrdHeaderError(f"{path}: only little-endian payloads are supported")
    payload = raw[sep + 2:]
    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(payload) != expected:
        raise NrrdSizeError(
            f"{path}: header sizes {sizes} need {expected} bytes, payload has {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return fields, keyvals, data.reshape(sizes, order="F")


def _spacings(fields, n: int, path) -> list[float]:
    if "spacings" not in fields:
        raise NrrdHeaderError(f"{path}: missing required field 'spacings'")
    try:
        vals = [float(s) for s in fields["spacings"].split()]
    except ValueError as e:
        raise NrrdHeaderError(f"{path}: bad spacings") from e
    return vals


def _geometry_keyvals(v) -> dict[str, str]:
    return {
        "scarforge_origin": " ".join(_fmt(o) for o in v.origin),
        "scarforge_orientation": v.orientation,
    }


def _geometry_from(keyvals, path):
    try:
        origin = tuple(float(o) for o in keyvals.get("scarforge_origin", "0 0 0").split())
    except ValueError as e:
        raise NrrdHeaderError(f"{path}: bad origin") from e
    return origin, keyvals.get("scarforge_orientation", IDENTITY_ORIENTATION)


def save_nrrd(v: Volume3 | Mask3 | LabelVolume, path) -> None:
    """Write a grid to ``path`` as a single-file raw little-endian NRRD."""
    if isinstance(v, Mask3):
        kind, data = "mask", v.data.astype(np.uint8)
    elif isinstance(v, LabelVolume):
        kind, data = "labels", v.data
    elif isinstance(v, Volume3):
        kind, data = "volume", v.data
    else:
        raise TypeError(f"cannot save {type(v).__name__}")
    extra = _geometry_keyvals(v)
    extra["scarforge_kind"] = kind
    _write(path, data, v.spacing, extra)


def load_nrrd(path) -> Volume3 | Mask3 | LabelVolume:
    """Read a 3-D NRRD. Kind comes from the ``scarforge_kind`` key, else the type."""
    fields, keyvals, data = _read(path)
    if data.ndim != 3:
        raise NrrdDimensionError(f"{path}: expected dimension 3, got {data.ndim}")
    spacing = _spacings(fields, 3, path)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NrrdHeaderError(f"{path}: spacings must be 3 positive numbers, got {spacing}")
    origin, orientation = _geometry_from(keyvals, path)
    kind = keyvals.get("scarforge_kind")
    if kind is None:
        kind = "volume" if data.dtype.kind == "f" else "labels"
    if kind == "mask":
        return Mask3(data != 0, spacing, origin, orientation)
    if kind == "labels":
        return LabelVolume(data, spacing, origin, orientation)
    if kind == "volume":
        return Volume3(data, spacing, origin, orientation)
    raise NrrdHeaderError(f"{path}: unknown scarforge_kind {kind!r}")


def save_vector_nrrd(data: np.ndarray, spacing, origin, orientation, path) -> None:
    """Write an ``(nx, ny, nz, 3)`` vector grid as a 4-D NRRD with a leading vector axis."""
    arr = np.moveaxis(np.asarray(data, dtype=np.float64), -1, 0)
    extra = {"scarforge_origin": " ".join(_fmt(o) for o in origin),
             "scarforge_orientation": orientation,
             "scarforge_kind": "displacement"}
    _write(path, arr, [None, *spacing], extra, kinds=["vector", "domain", "domain", "domain"])


def load_vector_nrrd(path):
    """Inverse of :func:`save_vector_nrrd`: returns ``(data, spacing, origin, orientation)``."""
    fields, keyvals, data = _read(path)
    if data.ndim != 4 or data.shape[0] != 3:
        raise NrrdDimensionError(f"{path}: expected a 3-vector 3-D grid, got shape {data.shape}")
    spacing = _spacings(fields, 4, path)[1:]
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise NrrdHeaderError(f"{path}: bad spacings {spacing}")
    origin, orientation = _geometry_from(keyvals, path)
    return np.moveaxis(data, 0, -1).astype(np.float64), tuple(spacing), origin, orientation


def atomic_save_nrrd(v, path) -> None:
    """Save via a temporary file and rename, so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_nrrd(v, tmp)
    os.replace(tmp, path)
