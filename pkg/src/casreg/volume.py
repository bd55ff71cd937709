"""Volume containers, file I/O and preprocessing (crop, resize, normalize).

Algorithms throughout the package work on plain numpy arrays in voxel units:
intensity volumes are float arrays of shape ``(H, W, L)``, label volumes are
integer arrays of the same shape. :class:`Volume` only exists to carry voxel
spacing and the original NIfTI header through a load/save round trip.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from casreg import _kernels


class VolumeFormatError(ValueError):
    """Raised for unreadable or unsupported volume files."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    header: bytes | None = field(default=None, repr=False, compare=False)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)

    @property
    def dims(self):
        return self.data.shape

    @property
    def is_labels(self):
        return np.issubdtype(self.data.dtype, np.integer)


@dataclass(frozen=True)
class BoundingBox:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty bounding box {self.lo} -> {self.hi}")

    @property
    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self):
        return tuple(b - a for a, b in zip(self.lo, self.hi))


# --------------------------------------------------------------------------
# NIfTI-1 (single file) and raw .f32 + .dims
# --------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16),
                np.dtype(np.float32): (16, 32)}
_HDR_SIZE = 348
_VOX_OFFSET = 352


def _is_gzip(raw):
    return raw[:2] == b"\x1f\x8b"


def _read_nifti(raw):
    if _is_gzip(raw):
        raw = gzip.decompress(raw)
    if len(raw) < _HDR_SIZE:
        raise VolumeFormatError("truncated payload: header shorter than 348 bytes")
    if struct.unpack("<i", raw[:4])[0] == _HDR_SIZE:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == _HDR_SIZE:
        end = ">"
    else:
        raise VolumeFormatError("unsupported format: bad sizeof_hdr")
    if raw[344:347] != b"n+1":
        raise VolumeFormatError("unsupported format: magic is not n+1")
    dim = struct.unpack(end + "8h", raw[40:56])
    if dim[0] != 3:
        raise VolumeFormatError(f"non-3D image (dim[0]={dim[0]})")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise VolumeFormatError(f"non-3D image (dims {shape})")
    code = struct.unpack(end + "h", raw[70:72])[0]
    if code not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported format: datatype code {code}")
    pixdim = struct.unpack(end + "8f", raw[76:108])
    offset = int(struct.unpack(end + "f", raw[108:112])[0])
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    dtype = np.dtype(_NIFTI_DTYPES[code]).newbyteorder(end)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset + nbytes > len(raw):
        raise VolumeFormatError(
            f"truncated payload: need {offset + nbytes} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    # nibabel and others store NaN for "no scaling"
    inter = inter if np.isfinite(inter) else 0.0
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data * np.float64(slope) + np.float64(inter)
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    header = raw[:_HDR_SIZE] if end == "<" else None
    return data, spacing, header


def _nifti_bytes(data, spacing, header):
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        lo, hi = int(data.min()), int(data.max())
        out_dtype = np.uint8 if lo >= 0 and hi <= 255 else np.int16
        if lo < -32768 or hi > 32767:
            raise VolumeFormatError("label values do not fit int16")
    else:
        out_dtype = np.float32
    out_dtype = np.dtype(out_dtype)
    code, bitpix = _NIFTI_CODES[out_dtype]
    hdr = bytearray(header if header is not None else bytes(_HDR_SIZE))
    if header is None:
        struct.pack_into("<i", hdr, 0, _HDR_SIZE)
        struct.pack_into("<c", hdr, 38, b"r")
        struct.pack_into("<h", hdr, 252, 0)
        struct.pack_into("<h", hdr, 254, 0)
        hdr[344:348] = b"n+1\x00"
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    payload = np.ascontiguousarray(data.astype(out_dtype.newbyteorder("<")).ravel(order="F"))
    return bytes(hdr) + b"\x00" * 4 + payload.tobytes()


def _dims_path(path):
    return path.with_suffix(".dims")


def read_raw(path):
    """Read a ``.f32`` payload and its ``.dims`` sidecar.

    Returns ``(array, kind)`` where kind is ``"scalar"``, ``"labels"`` or
    ``"field"``. Fields come back with shape ``(3, H, W, L)``.
    """
    path = Path(path)
    try:
        tokens = _dims_path(path).read_text().split()
    except FileNotFoundError:
        raise VolumeFormatError(f"unsupported format: missing sidecar {_dims_path(path)}") from None
    if len(tokens) < 3:
        raise VolumeFormatError(f"non-3D image: sidecar has {len(tokens)} dims")
    try:
        shape = tuple(int(t) for t in tokens[:3])
    except ValueError:
        raise VolumeFormatError(f"unsupported format: bad sidecar {tokens}") from None
    extra = tokens[3:]
    if any(t.lstrip("-").isdigit() for t in extra):
        raise VolumeFormatError(f"non-3D image: sidecar declares {tokens}")
    kind = extra[0] if extra else "scalar"
    if kind not in ("scalar", "labels", "field"):
        raise VolumeFormatError(f"unsupported format: sidecar token {kind!r}")
    ncomp = 3 if kind == "field" else 1
    raw = path.read_bytes()
    count = int(np.prod(shape)) * ncomp
    if count * 4 > len(raw):
        raise VolumeFormatError(
            f"truncated payload: need {count * 4} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count).astype(np.float32)
    if kind == "field":
        return np.moveaxis(data.reshape(shape + (3,)), -1, 0).copy(), kind
    data = data.reshape(shape)
    if kind == "labels":
        return data.astype(np.int64), kind
    return data, kind


def write_raw(path, data, kind="scalar"):
    path = Path(path)
    data = np.asarray(data)
    if kind == "field":
        shape = data.shape[1:]
        payload = np.moveaxis(data, 0, -1)
    else:
        shape = data.shape
        payload = data
    line = " ".join(str(s) for s in shape)
    if kind != "scalar":
        line += " " + kind
    path.write_bytes(np.ascontiguousarray(payload, dtype="<f4").tobytes())
    _dims_path(path).write_text(line + "\n")


def _is_nifti(path):
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".f32":
        data, kind = read_raw(path)
        if kind == "field":
            raise VolumeFormatError("non-3D image: file holds a displacement field")
        return data, (1.0, 1.0, 1.0), None
    if _is_nifti(path):
        return _read_nifti(path.read_bytes())
    raise VolumeFormatError(f"unsupported format: {path.name}")


def load_volume(path) -> Volume:
    """Load an intensity volume (NIfTI-1 or raw ``.f32``) as float64."""
    data, spacing, header = _load(path)
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite values in {path}")
    return Volume(data, spacing, header)


def load_labels(path) -> Volume:
    """Load a label volume; values must be non-negative integers."""
    data, spacing, header = _load(path)
    labels = np.rint(data).astype(np.int64)
    if np.any(labels != data) or labels.min() < 0:
        raise VolumeFormatError(f"{path} does not hold non-negative integer labels")
    return Volume(labels, spacing, header)


def save_volume(v, path):
    """Write a volume; integer arrays are stored with an integer datatype."""
    path = Path(path)
    if isinstance(v, Volume):
        data, spacing, header = v.data, v.spacing, v.header
    else:
        data, spacing, header = np.asarray(v), (1.0, 1.0, 1.0), None
    if data.ndim != 3:
        raise VolumeFormatError(f"non-3D image: shape {data.shape}")
    if path.suffix == ".f32":
        write_raw(path, data, "labels" if np.issubdtype(data.dtype, np.integer) else "scalar")
        return
    if not _is_nifti(path):
        raise VolumeFormatError(f"unsupported format: {path.name}")
    blob = _nifti_bytes(data, spacing, header)
    if path.name.lower().endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def normalize(v):
    """Min-max rescale to [0, 1]; a constant volume maps to zeros."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def sample_coords(n_in, n_out):
    """Endpoint-aligned input coordinates for each output index along one axis."""
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize(v, out_dims, mode="trilinear"):
    """Resample to ``out_dims`` with endpoint-aligned voxel centres.

    ``mode`` is ``"trilinear"`` for intensities or ``"nearest"`` for labels.
    """
    v = np.asarray(v)
    out_dims = tuple(int(d) for d in out_dims)
    if len(out_dims) != 3 or min(out_dims) < 1:
        raise ValueError(f"invalid output dims {out_dims}")
    if out_dims == v.shape:
        return v.copy()
    axes = [sample_coords(n, m) for n, m in zip(v.shape, out_dims)]
    c0, c1, c2 = np.meshgrid(*axes, indexing="ij")
    if mode == "trilinear":
        return _kernels.trilinear_sample(np.ascontiguousarray(v, dtype=np.float64), c0, c1, c2)
    if mode == "nearest":
        return _kernels.nearest_sample(np.ascontiguousarray(v), c0, c1, c2)
    raise ValueError(f"unknown resize mode {mode!r}")


def crop_to_foreground(v, threshold=0.01, margin=2):
    """Crop to the bounding box of voxels >= threshold, dilated by margin."""
    v = np.asarray(v)
    mask = v >= threshold
    if not mask.any():
        raise ValueError(f"no voxel >= {threshold}; nothing to crop to")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        lo.append(max(0, int(idx[0]) - margin))
        hi.append(min(v.shape[axis], int(idx[-1]) + 1 + margin))
    box = BoundingBox(tuple(lo), tuple(hi))
    return v[box.slices].copy(), box


def preprocess(v, out_dims=(128, 128, 128), threshold=0.01, margin=2):
    """Crop, resize and normalize a raw scan the way the atlases were prepared."""
    v = normalize(v)
    cropped, box = crop_to_foreground(v, threshold, margin)
    return normalize(resize(cropped, out_dims)), box
