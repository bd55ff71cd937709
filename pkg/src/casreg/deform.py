"""Displacement-field algebra: warping, accumulation, resampling, Jacobians.

A displacement field is a float array of shape ``(3, H, W, L)`` holding
``u(p)`` in voxels; the transformation it encodes is ``phi(p) = p + u(p)``.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from casreg import _kernels
from casreg.volume import read_raw, resize, write_raw


@dataclass(frozen=True)
class JacobianReport:
    det_map: np.ndarray  # interior voxels only, shape (H-2, W-2, L-2)
    folding_fraction: float
    min_det: float
    mean_det: float


def _check_pair(vol, field):
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"displacement field must have shape (3, H, W, L), got {field.shape}")
    if vol.shape != field.shape[1:]:
        raise ValueError(f"dims mismatch: volume {vol.shape} vs field {field.shape[1:]}")


def _as_field(field):
    return np.ascontiguousarray(field, dtype=np.float64)


def zero_field(dims):
    return np.zeros((3,) + tuple(dims))


def warp_scalar(mv, field):
    """Trilinear pull-back ``mv(p + u(p))`` with edge-clamped coordinates."""
    mv = np.ascontiguousarray(mv, dtype=np.float64)
    field = _as_field(field)
    _check_pair(mv, field)
    return _kernels.trilinear_warp(mv, field)


def warp_scalar_grad(mv, field):
    """Warp and the derivative of each warped sample w.r.t. its displacement."""
    mv = np.ascontiguousarray(mv, dtype=np.float64)
    field = _as_field(field)
    _check_pair(mv, field)
    return _kernels.trilinear_warp_grad(mv, field)


def warp_labels(labels, field):
    """Nearest-neighbour pull-back of a label volume (round half up, clamped)."""
    labels = np.ascontiguousarray(labels)
    field = _as_field(field)
    _check_pair(labels, field)
    return _kernels.nearest_warp(labels, field)


def add_fields(a, b):
    """Accumulate two displacement fields (component-wise sum, not composition)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    return a + b


def resize_field(field, out_dims):
    """Resample a field to ``out_dims``, rescaling vectors into output-voxel units."""
    field = np.asarray(field, dtype=np.float64)
    out_dims = tuple(int(d) for d in out_dims)
    in_dims = field.shape[1:]
    if out_dims == in_dims:
        return field.copy()
    out = np.empty((3,) + out_dims)
    for c in range(3):
        n_in, n_out = in_dims[c], out_dims[c]
        scale = (n_out - 1) / (n_in - 1) if n_in > 1 and n_out > 1 else 1.0
        out[c] = resize(field[c], out_dims) * scale
    return out


def upsample_field(field, out_dims):
    return resize_field(field, out_dims)


def jacobian_determinant(field):
    """det(I + du/dp) by central differences on interior voxels."""
    field = np.asarray(field, dtype=np.float64)
    if min(field.shape[1:]) < 3:
        raise ValueError(f"Jacobian needs >= 3 voxels per axis, got {field.shape[1:]}")
    inner = (slice(1, -1),) * 3
    # jac[a][b] = d u_a / d x_b
    jac = [[None] * 3 for _ in range(3)]
    for a in range(3):
        grads = np.gradient(field[a], axis=(0, 1, 2))
        for b in range(3):
            jac[a][b] = grads[b][inner] + (1.0 if a == b else 0.0)
    return (jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]))


def jacobian_report(field):
    det = jacobian_determinant(field)
    return JacobianReport(
        det_map=det,
        folding_fraction=float(np.count_nonzero(det <= 0) / det.size),
        min_det=float(det.min()),
        mean_det=float(det.mean()),
    )


def random_smooth_field(seed, dims, amplitude, smoothness):
    """Gaussian-smoothed white noise scaled so the largest vector norm is ``amplitude``."""
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    if smoothness < 1:
        raise ValueError("smoothness must be >= 1")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3,) + dims)
    field = np.stack([ndimage.gaussian_filter(noise[c], smoothness, mode="reflect")
                      for c in range(3)])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    if amplitude == 0 or peak == 0:
        return np.zeros_like(field)
    return field * (amplitude / peak)


def max_norm(field):
    return float(np.sqrt((np.asarray(field) ** 2).sum(axis=0)).max())


def save_field(field, path):
    write_raw(Path(path), np.asarray(field), kind="field")


def load_field(path):
    data, kind = read_raw(Path(path))
    if kind != "field":
        raise ValueError(f"{path} does not hold a displacement field")
    return data.astype(np.float64)
