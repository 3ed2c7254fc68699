"""Reader/writer for a deliberately small NRRD subset.

Supported: single-file NRRD, ``dimension: 3`` scalar volumes (plus
``dimension: 4`` with a trailing size-3 component axis for vector fields),
``type`` in {float, double, uchar, short}, ``encoding: raw``,
``endian: little``, diagonal ``space directions``, ``space origin``.
Raw data is x-fastest; vector component index is slowest. Anything outside
the subset is rejected loudly — no silent coercion.

Scalar files map to :class:`~splitreg.volume.Volume` (float types) or
:class:`~splitreg.volume.LabelMap` (integer types); vector files map to
:class:`~splitreg.fields.DisplacementField` with voxel-unit components.
Round trips are bit-exact for all supported dtypes.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedField
from .fields import DisplacementField, VelocityField
from .volume import Grid, LabelMap, Volume

_MAGIC = re.compile(r"^NRRD000[1-5]$")
_FIELD = re.compile(r"^([a-z ]+): ?(.*)$")
_VEC = re.compile(r"\(([^)]*)\)|none")

_DTYPES = {
    "float": np.dtype("<f4"),
    "double": np.dtype("<f8"),
    "uchar": np.dtype("u1"),
    "short": np.dtype("<i2"),
}
_TYPE_NAMES = {v: k for k, v in _DTYPES.items()}

_KNOWN_FIELDS = {
    "type", "dimension", "sizes", "encoding", "endian",
    "space directions", "space origin",
}


def _parse_header(text: str) -> dict[str, tuple[str, int]]:
    lines = text.split("\n")
    if not lines or not _MAGIC.match(lines[0].strip()):
        raise ParseError("missing NRRD magic line", line=1)
    fields: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        m = _FIELD.match(line)
        if m is None:
            raise ParseError(f"malformed header line {line!r}", line=lineno)
        key, value = m.group(1), m.group(2).strip()
        if key not in _KNOWN_FIELDS:
            raise UnsupportedField(key)
        if key in fields:
            raise ParseError(f"duplicate header field {key!r}", line=lineno)
        fields[key] = (value, lineno)
    return fields


def _require(fields: dict[str, tuple[str, int]], key: str) -> tuple[str, int]:
    if key not in fields:
        raise ParseError(f"required header field {key!r} missing")
    return fields[key]


def _parse_directions(value: str, lineno: int, n_axes: int):
    entries = _VEC.findall(value)
    if len(entries) != n_axes:
        raise ParseError(
            f"space directions has {len(entries)} entries, expected {n_axes}",
            line=lineno,
        )
    spacing = []
    for axis, entry in enumerate(entries[:3]):
        if entry == "":
            raise ParseError("spatial axis direction may not be 'none'", line=lineno)
        comps = [float(tok) for tok in entry.split(",")]
        if len(comps) != 3:
            raise ParseError("direction vectors need 3 components", line=lineno)
        for j, c in enumerate(comps):
            if j != axis and c != 0.0:
                raise UnsupportedField(
                    "space directions",
                    "only diagonal (axis-aligned) space directions are supported",
                )
        if comps[axis] <= 0.0:
            raise UnsupportedField(
                "space directions", "direction diagonal must be positive"
            )
        spacing.append(comps[axis])
    if n_axes == 4 and entries[3] != "":
        raise ParseError("component axis direction must be 'none'", line=lineno)
    return tuple(spacing)


def read_nrrd(path) -> Volume | LabelMap | DisplacementField:
    """Read a supported NRRD file; the result type follows the header.

    Scalar float/double data becomes a Volume, uchar/short a LabelMap, and
    4-D float data with a trailing size-3 axis a DisplacementField.
    """
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ParseError("no blank line terminating the header")
    try:
        header = blob[:sep].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"header is not ASCII: {exc}") from None
    data = blob[sep + 2:]
    fields = _parse_header(header)

    type_val, type_line = _require(fields, "type")
    if type_val not in _DTYPES:
        raise UnsupportedField("type", f"unsupported type {type_val!r}")
    dtype = _DTYPES[type_val]

    dim_val, dim_line = _require(fields, "dimension")
    if dim_val not in ("3", "4"):
        raise UnsupportedField("dimension", f"unsupported dimension {dim_val!r}")
    ndim = int(dim_val)

    enc_val, _ = _require(fields, "encoding")
    if enc_val != "raw":
        raise UnsupportedField("encoding", f"unsupported encoding {enc_val!r}")

    if dtype.itemsize > 1:
        end_val, _ = _require(fields, "endian")
        if end_val != "little":
            raise UnsupportedField("endian", f"unsupported endian {end_val!r}")

    sizes_val, sizes_line = _require(fields, "sizes")
    try:
        sizes = tuple(int(tok) for tok in sizes_val.split())
    except ValueError:
        raise ParseError(f"bad sizes {sizes_val!r}", line=sizes_line) from None
    if len(sizes) != ndim or any(s < 1 for s in sizes):
        raise ParseError(f"sizes {sizes} inconsistent with dimension {ndim}",
                         line=sizes_line)
    if ndim == 4:
        if sizes[3] != 3:
            raise UnsupportedField(
                "sizes", "4-D data must have a trailing size-3 component axis"
            )
        if dtype.kind != "f":
            raise UnsupportedField("type", "vector fields must be float or double")

    if "space directions" in fields:
        spacing = _parse_directions(*fields["space directions"], n_axes=ndim)
    else:
        spacing = (1.0, 1.0, 1.0)
    if "space origin" in fields:
        origin_val, origin_line = fields["space origin"]
        m = _VEC.match(origin_val)
        if m is None or m.group(1) is None:
            raise ParseError(f"bad space origin {origin_val!r}", line=origin_line)
        origin = tuple(float(tok) for tok in m.group(1).split(","))
        if len(origin) != 3:
            raise ParseError("space origin needs 3 components", line=origin_line)
    else:
        origin = (0.0, 0.0, 0.0)

    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(data) != expected:
        raise ParseError(
            f"data segment is {len(data)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(data, dtype=dtype).reshape(sizes, order="F")
    grid = Grid(sizes[:3], spacing, origin)

    if ndim == 4:
        return DisplacementField(grid, np.ascontiguousarray(arr, dtype=np.float64))
    if dtype.kind == "f":
        return Volume(grid, np.ascontiguousarray(arr))
    try:
        return LabelMap(grid, np.ascontiguousarray(arr, dtype=np.int32))
    except ValueError as exc:
        raise ParseError(f"invalid label data: {exc}") from None


def _header_lines(type_name: str, sizes: tuple[int, ...], grid: Grid) -> list[str]:
    dirs = []
    for axis in range(3):
        vec = [0.0, 0.0, 0.0]
        vec[axis] = grid.spacing[axis]
        dirs.append("(" + ",".join(repr(c) for c in vec) + ")")
    if len(sizes) == 4:
        dirs.append("none")
    return [
        "NRRD0004",
        f"type: {type_name}",
        f"dimension: {len(sizes)}",
        "sizes: " + " ".join(str(s) for s in sizes),
        "encoding: raw",
        "endian: little",
        "space directions: " + " ".join(dirs),
        "space origin: (" + ",".join(repr(o) for o in grid.origin) + ")",
    ]


def write_nrrd(obj, path) -> None:
    """Write a Volume, LabelMap, or displacement/velocity field as NRRD."""
    if isinstance(obj, Volume):
        arr = np.asarray(obj.samples)
        dtype = np.dtype("<f4") if arr.dtype == np.float32 else np.dtype("<f8")
        arr = arr.astype(dtype, copy=False)
    elif isinstance(obj, LabelMap):
        top = int(obj.labels.max(initial=0))
        if top > np.iinfo(np.int16).max:
            raise ValueError(f"labels up to {top} exceed the supported dtypes")
        dtype = np.dtype("u1") if top <= np.iinfo(np.uint8).max else np.dtype("<i2")
        arr = obj.labels.astype(dtype)
    elif isinstance(obj, (DisplacementField, VelocityField)):
        arr = obj.vectors.astype(np.dtype("<f8"), copy=False)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")

    lines = _header_lines(_TYPE_NAMES[arr.dtype.newbyteorder("<")], arr.shape, obj.grid)
    payload = "\n".join(lines).encode("ascii") + b"\n\n" + arr.tobytes(order="F")
    Path(path).write_bytes(payload)
