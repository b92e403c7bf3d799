"""Bit-exact reader/writer for a little-endian NIfTI-1 single-file subset.

Supported: 3D volumes, datatypes uint8/int16/uint16/float32, data at
offset 352, optional gzip. ``scl_slope``/``scl_inter`` are honored on
load (slope 0 means "no scaling") and written back as (1, 0).
Orientation fields are carried as opaque bytes, never interpreted.
"""
from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import NiftiError
from .volume import Spacing, Volume

HEADER_SIZE = 348
DATA_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code <-> numpy dtype (little-endian)
_DTYPE_BY_CODE = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    512: np.dtype("<u2"),
    16: np.dtype("<f4"),
}
_CODE_BY_KIND = {np.dtype(k).str: c for c, d in _DTYPE_BY_CODE.items() for k in [d]}

# Opaque header tail: qform/sform/intent fields, byte range [252, 344).
_EXTRA_SLICE = slice(252, 344)

_GZIP_MAGIC = b"\x1f\x8b"


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    raw = head + rest
    if head == _GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes, need {HEADER_SIZE})")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (swapped,) = struct.unpack_from(">i", raw, 0)
        if swapped == HEADER_SIZE:
            raise NiftiError(f"{path}: big-endian NIfTI files are not supported")
        raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = raw[344:348]
    if magic != MAGIC:
        raise NiftiError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"{path}: only 3D volumes supported, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiError(f"{path}: non-positive dimension {(nx, ny, nz)}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _DTYPE_BY_CODE:
        raise NiftiError(
            f"{path}: unsupported datatype code {datatype} "
            f"(supported: {sorted(_DTYPE_BY_CODE)})"
        )
    pixdim = struct.unpack_from("<8f", raw, 76)
    if any(not (np.isfinite(p) and p > 0) for p in pixdim[1:4]):
        raise NiftiError(f"{path}: non-positive pixdim {pixdim[1:4]}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    if vox_offset != DATA_OFFSET:
        raise NiftiError(f"{path}: vox_offset must be {DATA_OFFSET}, got {vox_offset}")
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    return {
        "dims": (nx, ny, nz),
        "dtype": _DTYPE_BY_CODE[datatype],
        "spacing": Spacing(float(pixdim[1]), float(pixdim[2]), float(pixdim[3])),
        "scl": (float(scl_slope), float(scl_inter)),
        "extra": raw[_EXTRA_SLICE],
    }


def peek_nifti(path) -> tuple[tuple[int, int, int], Spacing]:
    """Read dims and spacing without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == _GZIP_MAGIC:
            with gzip.open(fh) as gz:
                raw = gz.read(HEADER_SIZE)
        else:
            raw = fh.read(HEADER_SIZE)
    hdr = _parse_header(raw, path)
    return hdr["dims"], hdr["spacing"]


def load_nifti(path) -> Volume:
    """Load a NIfTI-1 file into a Volume, applying any intensity rescale."""
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    nx, ny, nz = hdr["dims"]
    dtype = hdr["dtype"]
    nbytes = nx * ny * nz * dtype.itemsize
    payload = raw[DATA_OFFSET : DATA_OFFSET + nbytes]
    if len(payload) < nbytes:
        raise NiftiError(
            f"{path}: truncated payload ({len(payload)} bytes, need {nbytes})"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape((nx, ny, nz), order="F")

    slope, inter = hdr["scl"]
    rescale = None
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = (data.astype(np.float32) * np.float32(slope)) + np.float32(inter)
        rescale = (slope, inter)
    else:
        data = data.copy()

    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NiftiError(f"{path}: volume contains NaN or Inf values")
    return Volume(data, hdr["spacing"], rescale=rescale, extra=hdr["extra"])


def _build_header(vol: Volume) -> bytes:
    key = vol.data.dtype.newbyteorder("<").str
    if key not in _CODE_BY_KIND:
        raise NiftiError(f"cannot save dtype {vol.data.dtype}; supported: uint8/int16/uint16/float32")
    code = _CODE_BY_KIND[key]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    nx, ny, nz = vol.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, vol.data.dtype.itemsize * 8)
    s = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, s.dx, s.dy, s.dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # spatial units: millimeters
    if vol.extra is not None:
        hdr[_EXTRA_SLICE] = vol.extra
    hdr[344:348] = MAGIC
    return bytes(hdr)


def save_nifti(vol: Volume, path, compress: bool | None = None) -> None:
    """Write ``vol`` to ``path``; gzip when ``compress`` (default: by extension).

    Output bytes are deterministic: the gzip stream carries no mtime.
    """
    if compress is None:
        compress = str(path).endswith(".gz")
    blob = _build_header(vol) + b"\x00\x00\x00\x00" + vol.data.ravel(order="F").tobytes()
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            if compress:
                with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                    gz.write(blob)
            else:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
