"""Minimal NIfTI-1 single-file volumes and JSON acquisition sidecars.

Only the subset needed here is supported: 3-D scalar volumes stored as
uint8/int16/int32/float32/float64 in ``.nii`` or ``.nii.gz`` files of either
byte order.  Header bytes that are not interpreted are kept and written back
unchanged.
"""

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward_model import AcquisitionSettings

__all__ = [
    "EchoVolume",
    "NiftiError",
    "BadMagicError",
    "UnsupportedVariantError",
    "UnsupportedDatatypeError",
    "TruncatedDataError",
    "SidecarError",
    "read_volume",
    "write_volume",
    "read_sidecar",
    "write_sidecar",
    "sidecar_path",
]

HDR_SIZE = 348
DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
DTYPE_CODES = {np.dtype(v).str[1:]: k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedVariantError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class SidecarError(ValueError):
    pass


@dataclass
class EchoVolume:
    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    voxel_size: tuple = (1.0, 1.0, 1.0)
    header: bytes | None = None     # original 348-byte header, if read from disk

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3-D volume, got shape {self.data.shape}")
        self.affine = np.asarray(self.affine, dtype=float)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError("voxel sizes must be positive")

    @property
    def dims(self):
        return self.data.shape


def _read_bytes(path):
    path = str(path)
    with (gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")) as f:
        return f.read()


def _write_bytes(path, payload):
    path = str(path)
    with open(path, "wb") as raw:
        if path.endswith(".gz"):
            # no timestamp or file name in the gzip header: same data, same bytes
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
                f.write(payload)
        else:
            raw.write(payload)


def _affine_from_header(hdr, e, pixdim):
    sform_code = struct.unpack_from(e + "h", hdr, 254)[0]
    qform_code = struct.unpack_from(e + "h", hdr, 252)[0]
    if sform_code > 0:
        rows = [struct.unpack_from(e + "4f", hdr, off) for off in (280, 296, 312)]
        return np.vstack([np.array(rows, dtype=float), [0, 0, 0, 1]])
    if qform_code > 0:
        b, c, d, qx, qy, qz = struct.unpack_from(e + "6f", hdr, 256)
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        R = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        aff = np.eye(4)
        aff[:3, :3] = R * scale[None, :]
        aff[:3, 3] = (qx, qy, qz)
        return aff
    return np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])


def read_volume(path):
    """Read a 3-D NIfTI-1 volume as float32."""
    raw = _read_bytes(path)
    if len(raw) < HDR_SIZE:
        raise TruncatedDataError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = raw[:HDR_SIZE]
    if struct.unpack_from("<i", hdr, 0)[0] == HDR_SIZE:
        e = "<"
    elif struct.unpack_from(">i", hdr, 0)[0] == HDR_SIZE:
        e = ">"
    else:
        raise BadMagicError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = hdr[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedVariantError(f"{path}: paired .hdr/.img NIfTI is not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(e + "8h", hdr, 40)
    ndim = dim[0]
    if ndim < 1 or ndim > 7 or any(d > 1 for d in dim[4:ndim + 1]):
        raise NiftiError(f"{path}: only 3-D volumes are supported (dim={dim})")
    shape = tuple(max(int(d), 1) for d in dim[1:4])
    datatype = struct.unpack_from(e + "h", hdr, 70)[0]
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(e + "8f", hdr, 76)
    vox_offset = int(struct.unpack_from(e + "f", hdr, 108)[0])
    slope, inter = struct.unpack_from(e + "2f", hdr, 112)
    dt = np.dtype(e + DATATYPES[datatype])
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(raw) < vox_offset + nbytes:
        raise TruncatedDataError(f"{path}: expected {nbytes} data bytes at offset {vox_offset}")
    arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=vox_offset)
    arr = arr.reshape(shape, order="F")
    data = arr.astype(np.float32)
    if slope not in (0.0, 1.0) and np.isfinite(slope) or (inter != 0.0 and np.isfinite(inter)):
        s = slope if (slope != 0.0 and np.isfinite(slope)) else 1.0
        data = (arr.astype(np.float64) * s + inter).astype(np.float32)
    vs = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    aff = _affine_from_header(hdr, e, pixdim)
    if e == ">":
        hdr = _swap_header(hdr)
    return EchoVolume(np.ascontiguousarray(data), aff, vs, hdr)


# (offset, count, struct code) for every numeric header field, used to byte-swap
_FIELDS = [
    (0, 1, "i"), (32, 1, "i"), (36, 1, "h"), (40, 8, "h"), (56, 3, "f"), (68, 1, "h"),
    (70, 1, "h"), (72, 1, "h"), (74, 1, "h"), (76, 8, "f"), (108, 3, "f"), (120, 1, "h"),
    (124, 4, "f"), (140, 2, "i"), (252, 2, "h"), (256, 6, "f"), (280, 12, "f"),
]


def _swap_header(hdr):
    out = bytearray(hdr)
    for off, n, code in _FIELDS:
        vals = struct.unpack_from(">" + str(n) + code, hdr, off)
        struct.pack_into("<" + str(n) + code, out, off, *vals)
    return bytes(out)


def write_volume(vol, path):
    """Write ``vol`` as a little-endian single-file NIfTI-1 volume."""
    data = np.asarray(vol.data)
    if data.dtype.str[1:] not in DTYPE_CODES:
        data = data.astype(np.float32)
    data = data.astype(data.dtype.newbyteorder("<"))
    code = DTYPE_CODES[data.dtype.str[1:]]
    hdr = bytearray(vol.header if vol.header is not None else bytes(HDR_SIZE))
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, data.dtype.itemsize * 8)
    qfac = struct.unpack_from("<f", hdr, 76)[0] if vol.header is not None else 1.0
    qfac = -1.0 if qfac < 0 else 1.0
    struct.pack_into("<8f", hdr, 76, qfac, *vol.voxel_size, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)
    struct.pack_into("<h", hdr, 254, 1)
    aff = np.asarray(vol.affine, dtype=float)
    for i, off in enumerate((280, 296, 312)):
        struct.pack_into("<4f", hdr, off, *aff[i])
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
    try:
        _write_bytes(path, payload)
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


_REQUIRED = ("tr_s", "te_s", "flip_deg")


def read_sidecar(path):
    """Acquisition settings from a JSON sidecar (flip angle in degrees)."""
    with open(path) as f:
        d = json.load(f)
    return settings_from_dict(d, path)


def settings_from_dict(d, where="sidecar"):
    for key in _REQUIRED:
        if key not in d:
            raise SidecarError(f"{where}: missing key {key!r}")
    vals = {}
    for key in _REQUIRED + ("mt_pulse", "tr2_s"):
        v = d.get(key, 0)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SidecarError(f"{where}: {key!r} must be numeric, got {v!r}")
        vals[key] = v
    if vals["mt_pulse"] not in (0, 1):
        raise SidecarError(f"{where}: mt_pulse must be 0 or 1, got {vals['mt_pulse']!r}")
    try:
        return AcquisitionSettings.from_degrees(vals["tr_s"], vals["te_s"], vals["flip_deg"],
                                                int(vals["mt_pulse"]), vals["tr2_s"])
    except ValueError as err:
        raise SidecarError(f"{where}: {err}") from err


def write_sidecar(settings, path, **extra):
    d = {"tr_s": settings.tr, "te_s": settings.te, "flip_deg": settings.flip_deg,
         "mt_pulse": settings.mt, "tr2_s": settings.tr2}
    d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f, indent=2, sort_keys=True)


def sidecar_path(volume_path):
    """``echo.nii`` / ``echo.nii.gz`` -> ``echo.json``."""
    p = str(volume_path)
    for ext in (".nii.gz", ".nii"):
        if p.endswith(ext):
            return Path(p[: -len(ext)] + ".json")
    return Path(os.path.splitext(p)[0] + ".json")
