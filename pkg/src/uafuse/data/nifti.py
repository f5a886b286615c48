"""Minimal single-file NIfTI-1 (.nii) reader/writer.

Supported: 3D images, datatypes uint8 (2), int16 (4) and float32 (16), no
extensions, uncompressed. Big-endian files are byte-swapped on read; files are
always written little-endian.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

HDR_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"), ("qoffset_x", "f4"),
    ("qoffset_y", "f4"), ("qoffset_z", "f4"), ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)), ("intent_name", "S16"), ("magic", "S4"),
])
assert HDR_DTYPE.itemsize == HEADER_SIZE

DATATYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
CODES = {v: k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class BadDimensionError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


def make_header(shape, dtype, spacing=(1.0, 1.0, 1.0), descrip: str = "") -> np.ndarray:
    dtype = np.dtype(dtype)
    if dtype not in CODES:
        raise UnsupportedDatatypeError(f"cannot store {dtype}; supported: uint8, int16, float32")
    h = np.zeros((), dtype=HDR_DTYPE.newbyteorder("<"))
    h["sizeof_hdr"] = HEADER_SIZE
    h["regular"] = b"r"
    h["dim"] = [3, *shape, 1, 1, 1, 1]
    h["datatype"] = CODES[dtype]
    h["bitpix"] = dtype.itemsize * 8
    h["pixdim"] = [1.0, *spacing, 0, 0, 0, 0]
    h["vox_offset"] = VOX_OFFSET
    h["scl_slope"] = 1.0
    h["xyzt_units"] = 2  # mm
    h["sform_code"] = 1
    h["srow_x"] = [spacing[0], 0, 0, 0]
    h["srow_y"] = [0, spacing[1], 0, 0]
    h["srow_z"] = [0, 0, spacing[2], 0]
    h["descrip"] = descrip.encode("ascii", "replace")[:79]
    h["magic"] = b"n+1"
    return h


def write_nifti(grid: np.ndarray, spacing, path) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise BadDimensionError(f"only 3D grids are written, got shape {grid.shape}")
    dtype = grid.dtype.newbyteorder("=")
    if dtype not in CODES:
        raise UnsupportedDatatypeError(f"cannot store {grid.dtype}; supported: uint8, int16, float32")
    hdr = make_header(grid.shape, dtype, tuple(float(s) for s in spacing))
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(grid.astype(dtype.newbyteorder("<")).tobytes(order="F"))


def parse_header(raw: bytes) -> tuple[np.ndarray, str]:
    """Decode the 348-byte header; returns (header record, byte order '<' or '>')."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"file is {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header")
    order = "<"
    h = np.frombuffer(raw[:HEADER_SIZE], dtype=HDR_DTYPE.newbyteorder("<"))[0]
    if h["sizeof_hdr"] != HEADER_SIZE:
        h = np.frombuffer(raw[:HEADER_SIZE], dtype=HDR_DTYPE.newbyteorder(">"))[0]
        order = ">"
        if h["sizeof_hdr"] != HEADER_SIZE:
            raise NiftiError(f"sizeof_hdr is not {HEADER_SIZE} in either byte order")
    if h["magic"] != b"n+1":
        raise BadMagicError(f"magic {bytes(h['magic'])!r} is not single-file NIfTI-1 'n+1\\0'")
    return h, order


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Returns (grid indexed [x, y, z], voxel spacing in mm)."""
    raw = Path(path).read_bytes()
    h, order = parse_header(raw)
    code = int(h["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {code} unsupported (need 2, 4 or 16)")
    dim = [int(v) for v in h["dim"]]
    if dim[0] != 3:
        raise BadDimensionError(f"dim[0] = {dim[0]}; only 3D volumes are supported")
    shape = tuple(dim[1:4])
    if min(shape) < 1:
        raise BadDimensionError(f"non-positive extent in {shape}")
    dtype = DATATYPES[code].newbyteorder(order)
    offset = int(h["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) < offset + nbytes:
        raise TruncatedPayloadError(f"{path}: expected {nbytes} data bytes at offset {offset}, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    grid = data.reshape(shape, order="F").astype(DATATYPES[code])
    slope, inter = float(h["scl_slope"]), float(h["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        grid = grid.astype(np.float32) * np.float32(slope) + np.float32(inter)
    spacing = tuple(float(v) for v in h["pixdim"][1:4])
    return np.ascontiguousarray(grid), spacing
