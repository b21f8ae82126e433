"""Minimal NRRD volume reader/writer.

Covers exactly the subset the pipeline emits: 3-D grids of uint8, int16
or float32, raw or gzip encoding, little-endian, diagonal space
directions in the left-posterior-superior frame.  Anything else is
rejected with an error naming the offending header field; this is a
deliberate validation boundary, not a general NRRD implementation.

Data is stored with the first axis fastest (Fortran order), the NRRD
convention.
"""

from __future__ import annotations

import gzip
import re
from pathlib import Path

import numpy as np

from .grid import VolumeGrid, _CODE_AXIS, _CODE_SIGN
from .sidecars import atomic_write_bytes

_MAGIC = re.compile(rb"^NRRD000[1-5]$")

_TYPE_TO_DTYPE = {
    "uchar": np.uint8, "unsigned char": np.uint8, "uint8": np.uint8, "uint8_t": np.uint8,
    "short": np.int16, "signed short": np.int16, "int16": np.int16, "int16_t": np.int16,
    "float": np.float32, "float32": np.float32,
}
_DTYPE_TO_TYPE = {np.dtype(np.uint8): "uchar", np.dtype(np.int16): "short",
                  np.dtype(np.float32): "float"}

_LPS = "left-posterior-superior"

_KNOWN_FIELDS = {"type", "dimension", "space", "sizes", "space directions", "kinds",
                 "endian", "encoding", "space origin", "spacings"}


def _parse_vector_list(text: str, where: str) -> list[list[float]]:
    vecs = []
    for token in text.split():
        if not (token.startswith("(") and token.endswith(")")):
            raise ValueError(f"{where}: expected (a,b,c) vectors, got {token!r}")
        vecs.append([float(v) for v in token[1:-1].split(",")])
    return vecs


def read_nrrd(path: str | Path) -> VolumeGrid:
    """Read a supported NRRD file into a VolumeGrid.

    uint8 data is returned as a binary grid when it only holds 0/1; other
    uint8 content is rejected (the pipeline never writes it).
    """
    blob = Path(path).read_bytes()
    try:
        header_end = blob.index(b"\n\n")
    except ValueError:
        raise ValueError(f"{path}: missing blank line after NRRD header") from None
    header_lines = blob[:header_end].split(b"\n")
    payload = blob[header_end + 2:]

    if not _MAGIC.match(header_lines[0].strip()):
        raise ValueError(f"{path}: not an NRRD file (bad magic {header_lines[0][:16]!r})")

    fields: dict[str, str] = {}
    for raw in header_lines[1:]:
        line = raw.decode("ascii", errors="replace").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        if ":=" in line:   # key/value metadata is tolerated and ignored
            continue
        if ": " not in line:
            raise ValueError(f"{path}: malformed header line {line!r}")
        key, value = line.split(": ", 1)
        key = key.strip().lower()
        if key not in _KNOWN_FIELDS:
            raise ValueError(f"{path}: unsupported NRRD field {key!r}")
        fields[key] = value.strip()

    for req in ("type", "dimension", "sizes", "encoding"):
        if req not in fields:
            raise ValueError(f"{path}: missing required NRRD field {req!r}")

    if fields["dimension"] != "3":
        raise ValueError(f"{path}: field 'dimension': only 3 is supported, got {fields['dimension']}")
    tname = fields["type"].lower()
    if tname not in _TYPE_TO_DTYPE:
        raise ValueError(f"{path}: field 'type': unsupported type {fields['type']!r}")
    dtype = np.dtype(_TYPE_TO_DTYPE[tname])
    sizes = tuple(int(v) for v in fields["sizes"].split())
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise ValueError(f"{path}: field 'sizes': expected three positive ints, got {fields['sizes']!r}")
    if dtype.itemsize > 1:
        endian = fields.get("endian", "")
        if endian != "little":
            raise ValueError(f"{path}: field 'endian': only little-endian data is supported")
    space = fields.get("space", _LPS)
    if space != _LPS:
        raise ValueError(f"{path}: field 'space': only {_LPS!r} is supported, got {space!r}")

    if "space directions" in fields:
        vecs = _parse_vector_list(fields["space directions"], f"{path}: field 'space directions'")
        if len(vecs) != 3 or any(len(v) != 3 for v in vecs):
            raise ValueError(f"{path}: field 'space directions': expected three 3-vectors")
        spacing = []
        codes = []
        pos_code = {0: "L", 1: "P", 2: "S"}
        neg_code = {0: "R", 1: "A", 2: "I"}
        for k, v in enumerate(vecs):
            nz = [i for i, x in enumerate(v) if x != 0.0]
            if len(nz) != 1:
                raise ValueError(f"{path}: field 'space directions': axis {k} is not diagonal")
            ax = nz[0]
            spacing.append(abs(v[ax]))
            codes.append(pos_code[ax] if v[ax] > 0 else neg_code[ax])
        orientation = tuple(codes)
    elif "spacings" in fields:
        spacing = [float(v) for v in fields["spacings"].split()]
        orientation = ("L", "P", "S")
    else:
        raise ValueError(f"{path}: missing field 'space directions' (or 'spacings')")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"{path}: non-positive spacing")

    origin = (0.0, 0.0, 0.0)
    if "space origin" in fields:
        vec = _parse_vector_list(fields["space origin"], f"{path}: field 'space origin'")
        if len(vec) != 1 or len(vec[0]) != 3:
            raise ValueError(f"{path}: field 'space origin': expected one 3-vector")
        origin = tuple(vec[0])

    encoding = fields["encoding"].lower()
    if encoding == "raw":
        buf = payload
    elif encoding in ("gzip", "gz"):
        buf = gzip.decompress(payload)
    else:
        raise ValueError(f"{path}: field 'encoding': unsupported encoding {encoding!r}")

    count = sizes[0] * sizes[1] * sizes[2]
    expected = count * dtype.itemsize
    if len(buf) < expected:
        raise ValueError(f"{path}: truncated data ({len(buf)} bytes, expected {expected})")
    arr = np.frombuffer(buf[:expected], dtype=dtype.newbyteorder("<"))
    data = arr.reshape(sizes, order="F").astype(dtype)

    if dtype == np.uint8:
        uniq = np.unique(data)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError(f"{path}: uint8 volume holds values other than 0/1; "
                             "only binary masks use uint8 here")
        data = data.astype(np.bool_)
    return VolumeGrid(data, tuple(spacing), origin, orientation)


def write_nrrd(path: str | Path, grid: VolumeGrid, *, encoding: str = "raw") -> None:
    """Write a VolumeGrid; binary grids are stored as uint8."""
    if encoding not in ("raw", "gzip"):
        raise ValueError(f"unsupported encoding {encoding!r}")
    data = grid.data
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    if np.dtype(data.dtype) not in _DTYPE_TO_TYPE:
        raise ValueError(f"unsupported dtype {data.dtype}")

    dirs = []
    for k, code in enumerate(grid.orientation):
        v = [0.0, 0.0, 0.0]
        v[_CODE_AXIS[code]] = _CODE_SIGN[code] * grid.spacing[k]
        dirs.append("(" + ",".join(repr(float(x)) for x in v) + ")")
    origin = "(" + ",".join(repr(float(x)) for x in grid.origin) + ")"

    header = [
        "NRRD0004",
        f"type: {_DTYPE_TO_TYPE[np.dtype(data.dtype)]}",
        "dimension: 3",
        f"space: {_LPS}",
        "sizes: " + " ".join(str(s) for s in data.shape),
        "space directions: " + " ".join(dirs),
        "kinds: domain domain domain",
        "endian: little",
        f"encoding: {encoding}",
        f"space origin: {origin}",
    ]
    payload = np.ascontiguousarray(data.astype(data.dtype.newbyteorder("<"))).tobytes(order="F")
    if encoding == "gzip":
        payload = gzip.compress(payload, compresslevel=1)
    atomic_write_bytes(path, ("\n".join(header) + "\n\n").encode("ascii") + payload)
