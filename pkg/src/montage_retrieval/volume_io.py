"""NIfTI-1 single-file reading/writing and in-plane resampling of CT volumes.

Voxel arrays are held as ``float64`` numpy arrays indexed ``data[x, y, z]``;
on disk the x index varies fastest, which is Fortran order for that shape.
"""
from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, IoFailure, NonVolumetric, TruncatedFile, UnsupportedDatatype

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352

HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    fields = []
    for f in HEADER_FIELDS:
        code = f[1] if f[1].startswith("S") else byteorder + f[1]
        fields.append((f[0], code) + tuple(f[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


# NIfTI datatype code -> numpy element kind
DATATYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
}
DATATYPE_CODES = {np.dtype(v).name: k for k, v in DATATYPES.items()}


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    pixdim: tuple
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    byteorder: str = "<"

    @classmethod
    def from_record(cls, rec, byteorder):
        return cls(
            sizeof_hdr=int(rec["sizeof_hdr"]),
            dim=tuple(int(d) for d in rec["dim"]),
            datatype=int(rec["datatype"]),
            pixdim=tuple(float(p) for p in rec["pixdim"]),
            scl_slope=float(rec["scl_slope"]),
            scl_inter=float(rec["scl_inter"]),
            vox_offset=float(rec["vox_offset"]),
            magic=bytes(rec["magic"]).ljust(4, b"\0"),
            byteorder=byteorder,
        )


@dataclass
class Volume3D:
    """A 3D scalar grid with voxel spacing in millimetres."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    intensity_scaling: tuple = (1.0, 0.0)
    header: NiftiHeader | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise NonVolumetric(f"expected a non-empty 3D array, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    if int.from_bytes(raw[:4], "little") == HEADER_SIZE:
        byteorder = "<"
    elif int.from_bytes(raw[:4], "big") == HEADER_SIZE:
        byteorder = ">"
    else:
        raise BadMagic("sizeof_hdr is not 348 in either byte order")
    rec = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(byteorder))[0]
    hdr = NiftiHeader.from_record(rec, byteorder)
    if hdr.magic == b"ni1\0":
        raise BadMagic("header/data pairs ('ni1') are not supported, only single .nii files")
    if hdr.magic != b"n+1\0":
        raise BadMagic(f"bad magic {hdr.magic!r}")
    ndim = hdr.dim[0]
    if ndim not in (3, 4) or (ndim == 4 and hdr.dim[4] != 1):
        raise NonVolumetric(f"dim={hdr.dim} does not describe a single 3D volume")
    if min(hdr.dim[1:4]) < 1:
        raise NonVolumetric(f"non-positive spatial dims {hdr.dim[1:4]}")
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype}")
    return hdr


def _read_bytes(path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(str(e)) from e
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise TruncatedFile(f"{path}: corrupt gzip stream ({e})") from e
    return raw


def parse_nifti(raw: bytes) -> Volume3D:
    hdr = parse_header(raw)
    x, y, z = hdr.dim[1:4]
    elem = np.dtype(hdr.byteorder + DATATYPES[hdr.datatype])
    offset = int(hdr.vox_offset)
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET
    nbytes = x * y * z * elem.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedFile(f"need {offset + nbytes} bytes, have {len(raw)}")
    values = np.frombuffer(raw, dtype=elem, count=x * y * z, offset=offset)
    slope = hdr.scl_slope
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    inter = hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0
    data = values.astype(np.float64).reshape((x, y, z), order="F")
    if (slope, inter) != (1.0, 0.0):
        data = data * slope + inter
    bad = ~np.isfinite(data)
    if bad.any():
        log.warning("replacing %d non-finite voxels with 0", int(bad.sum()))
        data[bad] = 0.0
    voxel_size = tuple(abs(p) if p else 1.0 for p in hdr.pixdim[1:4])
    return Volume3D(data, voxel_size, (slope, inter), header=hdr)


def read_nifti(path) -> Volume3D:
    """Read a ``.nii`` or ``.nii.gz`` single-file NIfTI-1 volume."""
    return parse_nifti(_read_bytes(path))


def encode_nifti(vol: Volume3D, dtype="float32", byteorder="<") -> bytes:
    dt = np.dtype(dtype)
    if dt.name not in DATATYPE_CODES:
        raise UnsupportedDatatype(f"cannot write {dt.name}")
    x, y, z = vol.dims
    rec = np.zeros(1, dtype=_header_dtype(byteorder))[0]
    rec["sizeof_hdr"] = HEADER_SIZE
    rec["regular"] = b"r"
    rec["dim"] = [3, x, y, z, 1, 1, 1, 1]
    rec["datatype"] = DATATYPE_CODES[dt.name]
    rec["bitpix"] = dt.itemsize * 8
    rec["pixdim"] = [1.0, *vol.voxel_size, 1.0, 1.0, 1.0, 1.0]
    rec["vox_offset"] = VOX_OFFSET
    rec["scl_slope"] = 1.0
    rec["scl_inter"] = 0.0
    rec["xyzt_units"] = 2  # millimetres
    rec["sform_code"] = 1
    rec["srow_x"] = [vol.voxel_size[0], 0, 0, 0]
    rec["srow_y"] = [0, vol.voxel_size[1], 0, 0]
    rec["srow_z"] = [0, 0, vol.voxel_size[2], 0]
    rec["magic"] = b"n+1\0"
    if dt.kind in "iu":
        info = np.iinfo(dt)
        values = np.rint(vol.data)
        if values.min() < info.min or values.max() > info.max:
            raise ValueError(f"voxel values do not fit {dt.name}")
    else:
        values = vol.data
    body = values.astype(dt.newbyteorder(byteorder)).tobytes(order="F")
    return rec.tobytes() + b"\0" * (VOX_OFFSET - HEADER_SIZE) + body


def write_nifti(vol: Volume3D, path, dtype="float32", byteorder="<") -> None:
    """Write ``vol`` as a single-file NIfTI-1 (``vox_offset`` 352, unit scaling).

    The default output is little-endian float32; other supported datatypes and
    big-endian output exist mainly for round-trip testing.
    """
    payload = encode_nifti(vol, dtype, byteorder)
    path = Path(path)
    try:
        if path.name.endswith(".gz"):
            payload = gzip.compress(payload, mtime=0)
        path.write_bytes(payload)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _axis_weights(n: int, target: int):
    # pixel-centre alignment, clamped at the edges
    coords = (np.arange(target) + 0.5) * (n / target) - 0.5
    coords = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, coords - i0


def _lerp_axis(a: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = a.shape[axis]
    if n == target:
        return a
    i0, i1, w = _axis_weights(n, target)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = target
    out = np.subtract(hi, lo)
    out *= w.reshape(shape)
    out += lo
    # rounding in the lerp must not leave the [lo, hi] bracket
    bound = np.maximum(lo, hi)
    np.minimum(out, bound, out=out)
    np.minimum(lo, hi, out=bound)
    np.maximum(out, bound, out=out)
    return out


def resample_inplane(vol: Volume3D, target: int = 512) -> Volume3D:
    """Bilinearly resample every axial slice to ``target`` x ``target``."""
    if target < 1:
        raise ValueError("target must be >= 1")
    x, y, _ = vol.dims
    data = _lerp_axis(_lerp_axis(vol.data, 0, target), 1, target)
    if data is vol.data:
        data = data.copy()
    dx, dy, dz = vol.voxel_size
    return Volume3D(data, (dx * x / target, dy * y / target, dz), vol.intensity_scaling)
