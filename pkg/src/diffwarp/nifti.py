"""Minimal NIfTI-1 reader/writer (.nii and .nii.gz).

Covers what this package needs: single-file NIfTI-1, scalar dtypes,
3D/4D grids, voxel sizes from pixdim, optional intensity scaling on
read. Data is exchanged as numpy arrays indexed ``(x, y, z[, t])``
matching the on-disk dimension order.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

__all__ = ["read_nifti", "write_nifti"]

HEADER_SIZE = 348

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read a NIfTI-1 file; returns (data, voxel sizes per axis).

    Intensity scaling (scl_slope/scl_inter) is applied when set.
    Raises ValueError on anything unreadable.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"not a readable file: {path}")
    try:
        raw = _open_bytes(path)
    except (OSError, EOFError, gzip.BadGzipFile) as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE + 4:
        raise ValueError(f"truncated NIfTI file: {path}")

    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise ValueError(f"not a NIfTI-1 file (bad header size): {path}")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"not a NIfTI-1 file (bad magic {magic!r}): {path}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ValueError(f"invalid dimension count {ndim}: {path}")
    shape = tuple(int(s) for s in dim[1 : 1 + ndim])
    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _DTYPES:
        raise ValueError(f"unsupported NIfTI datatype {datatype}: {path}")
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    zooms = tuple(float(abs(z)) if z != 0 else 1.0 for z in pixdim[1 : 1 + ndim])
    if any(z <= 0 for z in zooms):
        raise ValueError(f"missing or invalid voxel spacing: {path}")
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE + 4

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(shape))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise ValueError(f"truncated NIfTI data ({len(raw)} < {need} bytes): {path}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F")  # x varies fastest on disk
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    return np.ascontiguousarray(data), zooms


def write_nifti(path, data: np.ndarray, zooms=None) -> None:
    """Write an array as single-file NIfTI-1; gzip when the name ends .gz."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise ValueError(f"only 3D/4D volumes supported, got {data.ndim}D")
    if data.dtype not in _CODES:
        data = data.astype(np.float32)
    if zooms is None:
        zooms = (1.0,) * data.ndim

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, _CODES[data.dtype])
    struct.pack_into("<h", header, 72, data.dtype.itemsize * 8)  # bitpix
    pixdim = [1.0] + [float(z) for z in zooms] + [1.0] * (7 - len(zooms))
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<h", header, 252, 0)  # qform_code: unused
    struct.pack_into("<h", header, 254, 1)  # sform_code: scanner
    # affine rows: diagonal voxel sizes
    struct.pack_into("<4f", header, 280, pixdim[1], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, pixdim[2], 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, pixdim[3], 0.0)
    header[344:348] = b"n+1\x00"

    payload = bytes(header) + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(payload))
    else:
        path.write_bytes(payload)
