"""Cascaded deformable registration with additive field accumulation.

Each cascade is a variational stage that optimizes an incremental field at
one pyramid scale with Adam. Under the ``accumulate`` strategy the original
moving image is always warped once, by the running sum of all stage fields;
``successive`` re-warps the previous stage's output instead (the ablation
that suffers from repeated interpolation).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from casreg import _kernels
from casreg.deform import (
    JacobianReport,
    jacobian_report,
    resize_field,
    warp_labels,
    warp_scalar,
    zero_field,
)
from casreg.similarity import DEFAULT_WINDOW, RegistrationLoss, global_ncc
from casreg.volume import resize

log = logging.getLogger(__name__)

STRATEGIES = ("accumulate", "successive")
DEFAULT_SCALES = (8, 4, 2, 1, 1)
NORMALIZED_TOL = 1e-6


def default_scales(n_cascades):
    """[8, 4, 2, 1, 1] for five cascades, truncated from the right otherwise."""
    if n_cascades >= len(DEFAULT_SCALES):
        return list(DEFAULT_SCALES) + [1] * (n_cascades - len(DEFAULT_SCALES))
    return list(DEFAULT_SCALES[: n_cascades - 1]) + [1]


@dataclass(frozen=True)
class RegistrationConfig:
    n_cascades: int = 5
    scales: tuple | None = None
    lam: float = 1.0
    window: int = DEFAULT_WINDOW
    iters_per_stage: int = 100
    step_size: float = 0.5
    strategy: str = "accumulate"
    seed: int = 0

    def __post_init__(self):
        if self.n_cascades < 1:
            raise ValueError("n_cascades must be >= 1")
        scales = tuple(default_scales(self.n_cascades) if self.scales is None else self.scales)
        object.__setattr__(self, "scales", scales)
        if len(scales) != self.n_cascades:
            raise ValueError(f"{len(scales)} scales given for {self.n_cascades} cascades")
        if any(s <= 0 for s in scales) or scales[-1] != 1:
            raise ValueError(f"scales must be positive and end at 1, got {scales}")
        if any(b > a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be non-increasing, got {scales}")
        if self.iters_per_stage < 1:
            raise ValueError("iters_per_stage must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class RegistrationResult:
    total_field: np.ndarray
    stage_fields: list
    warped: np.ndarray
    loss_trace: list
    jacobian: JacobianReport
    strategy: str = "accumulate"
    status: str = "ok"

    def warp_labels(self, labels):
        """Propagate labels the way the image was propagated.

        ``accumulate`` resamples once through the summed field; ``successive``
        chains nearest-neighbour resampling through every stage field.
        """
        if self.strategy == "accumulate":
            return warp_labels(labels, self.total_field)
        out = np.asarray(labels)
        for f in self.stage_fields:
            out = warp_labels(out, f)
        return out

    def warp_image(self, image):
        if self.strategy == "accumulate":
            return warp_scalar(image, self.total_field)
        out = np.asarray(image, dtype=np.float64)
        for f in self.stage_fields:
            out = warp_scalar(out, f)
        return out


class Adam:
    """Adam update on a numpy array, in place."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        _kernels.adam_step(params, np.ascontiguousarray(grad), self.m, self.v, self.lr,
                           self.beta1, self.beta2, self.eps, self.t)
        return params


def _level_dims(dims, scale):
    return tuple(max(2, int(round(n / scale))) for n in dims)


def downsample(v, dims, scale):
    """Gaussian anti-aliasing followed by endpoint-aligned trilinear resampling."""
    v = np.asarray(v, dtype=np.float64)
    if scale > 1:
        v = ndimage.gaussian_filter(v, scale / 2.0, mode="nearest")
    return resize(v, dims)


def _check_inputs(mv, fx):
    if mv.shape != fx.shape:
        raise ValueError(f"dims mismatch: moving {mv.shape} vs fixed {fx.shape}")
    for name, v in (("moving", mv), ("fixed", fx)):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} image has non-finite values")
        if v.min() < -NORMALIZED_TOL or v.max() > 1 + NORMALIZED_TOL:
            raise ValueError(f"{name} image is not normalized to [0, 1]")


def _optimize_stage(fx_s, mv_s, base, cfg):
    """Adam on an incremental field ``psi`` so that ``base + psi`` aligns the images.

    ``base`` is None for the successive strategy, where ``psi`` alone warps
    (and is regularized on) the already-warped moving image.
    """
    psi = np.zeros((3,) + fx_s.shape)
    opt = Adam(psi.shape, cfg.step_size)
    objective = RegistrationLoss(fx_s, cfg.lam, cfg.window)
    trace = []
    for it in range(cfg.iters_per_stage + 1):
        full = psi if base is None else base + psi
        loss, grad = objective.value_and_grad(mv_s, full)
        if not math.isfinite(loss.total):
            raise FloatingPointError("non-finite loss during registration")
        trace.append(loss.total)
        if it < cfg.iters_per_stage:
            opt.step(psi, grad)
    return psi, np.array(trace)


def cascade_register(mv, fx, cfg: RegistrationConfig | None = None):
    """Register moving ``mv`` onto fixed ``fx`` with ``cfg.n_cascades`` stages."""
    cfg = cfg or RegistrationConfig()
    mv = np.asarray(mv, dtype=np.float64)
    fx = np.asarray(fx, dtype=np.float64)
    _check_inputs(mv, fx)
    dims = fx.shape

    if np.ptp(mv) == 0 or np.ptp(fx) == 0:
        log.warning("constant input image; returning the identity transform")
        zero = zero_field(dims)
        return RegistrationResult(zero, [zero.copy() for _ in cfg.scales], mv.copy(), [],
                                  jacobian_report(zero), cfg.strategy, "constant-input")

    total = zero_field(dims)
    stage_fields, traces = [], []
    current = mv
    for scale in cfg.scales:
        level = _level_dims(dims, scale)
        fx_s = downsample(fx, level, scale)
        if cfg.strategy == "accumulate":
            mv_s = downsample(mv, level, scale)
            psi, trace = _optimize_stage(fx_s, mv_s, resize_field(total, level), cfg)
        else:
            mv_s = downsample(current, level, scale)
            psi, trace = _optimize_stage(fx_s, mv_s, None, cfg)
        up = resize_field(psi, dims)
        total = total + up
        stage_fields.append(up)
        traces.append(trace)
        if cfg.strategy == "successive":
            current = warp_scalar(current, up)
        log.debug("scale %s: loss %.5f -> %.5f", scale, trace[0], trace[-1])

    warped = warp_scalar(mv, total) if cfg.strategy == "accumulate" else current
    return RegistrationResult(total, stage_fields, warped, traces,
                              jacobian_report(total), cfg.strategy)


# --------------------------------------------------------------------------
# rigid baseline
# --------------------------------------------------------------------------

def _wrap_angle(a):
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class RigidTransform:
    """Pull-back rigid map ``q = R (p - c) + c + t`` in voxel units."""

    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    center: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(_wrap_angle(float(a)) for a in self.rotation))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @property
    def params(self):
        return np.array(self.rotation + self.translation)

    @classmethod
    def from_params(cls, p, center=None):
        return cls(tuple(p[:3]), tuple(p[3:]), center)

    def matrix(self):
        ax, ay, az = self.rotation
        rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
        ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
        rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
        return rz @ ry @ rx

    def inverse(self):
        """Exact inverse map, expressed about the same centre."""
        r = self.matrix()
        # p = R^T (q - c - t) + c  =>  rotation R^T, translation -R^T t
        t = -r.T @ np.array(self.translation)
        return _from_matrix(r.T, t, self.center)


def _from_matrix(r, t, center):
    ay = math.asin(-max(-1.0, min(1.0, r[2, 0])))
    ax = math.atan2(r[2, 1], r[2, 2])
    az = math.atan2(r[1, 0], r[0, 0])
    return RigidTransform((ax, ay, az), tuple(t), center)


def _rigid_coords(t, full_dims, out_dims):
    """Sample coordinates (in a grid of ``out_dims``) of the rigid pull-back."""
    full = np.array(full_dims, dtype=np.float64)
    out = np.array(out_dims, dtype=np.float64)
    f = np.where(out > 1, (full - 1) / np.maximum(out - 1, 1), 1.0)
    centre = (full - 1) / 2.0 if t.center is None else np.asarray(t.center, dtype=np.float64)
    axes = [np.arange(n) * f[i] for i, n in enumerate(out_dims)]
    p = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)
    q = t.matrix() @ (p - centre[:, None]) + centre[:, None] + np.array(t.translation)[:, None]
    q /= f[:, None]
    return [np.ascontiguousarray(q[i].reshape(out_dims)) for i in range(3)]


def apply_rigid(v, t: RigidTransform):
    """Resample through a rigid map; nearest for integer labels, trilinear otherwise."""
    v = np.asarray(v)
    if not np.any(t.params):
        return v.copy()
    c = _rigid_coords(t, v.shape, v.shape)
    if np.issubdtype(v.dtype, np.integer):
        return _kernels.nearest_sample(np.ascontiguousarray(v), *c)
    return _kernels.trilinear_sample(np.ascontiguousarray(v, dtype=np.float64), *c)


def _rigid_score(mv_l, fx_l, params, full_dims):
    t = RigidTransform.from_params(params)
    c = _rigid_coords(t, full_dims, mv_l.shape)
    warped = _kernels.trilinear_sample(mv_l, *c)
    if np.ptp(warped) == 0:
        return -1.0
    return global_ncc(fx_l, warped)


def _coordinate_search(mv_l, fx_l, start, steps, full_dims, rounds, min_steps):
    params = np.array(start, dtype=np.float64)
    steps = np.array(steps, dtype=np.float64)
    best = _rigid_score(mv_l, fx_l, params, full_dims)
    for _ in range(rounds):
        improved = False
        for i in range(6):
            for sign in (1.0, -1.0):
                trial = params.copy()
                trial[i] += sign * steps[i]
                score = _rigid_score(mv_l, fx_l, trial, full_dims)
                if score > best:
                    best, params, improved = score, trial, True
                    break
        if not improved:
            steps *= 0.5
            if np.all(steps < min_steps):
                break
    return params, best


def rigid_register(mv, fx, iters=40, seed=0, n_starts=4):
    """Six-parameter rigid alignment maximizing global NCC.

    Gradient-free coordinate search over three pyramid levels, started from
    the identity and ``n_starts - 1`` small random perturbations of it.
    """
    mv = np.asarray(mv, dtype=np.float64)
    fx = np.asarray(fx, dtype=np.float64)
    if mv.shape != fx.shape:
        raise ValueError(f"dims mismatch: moving {mv.shape} vs fixed {fx.shape}")
    if np.ptp(mv) == 0 or np.ptp(fx) == 0:
        raise ValueError("rigid registration is undefined for a constant volume")
    dims = fx.shape
    rng = np.random.default_rng(seed)
    starts = [np.zeros(6)] + [np.concatenate([rng.uniform(-0.05, 0.05, 3), rng.uniform(-1, 1, 3)])
                              for _ in range(n_starts - 1)]
    min_steps = np.array([0.002] * 3 + [0.02] * 3)
    steps = np.array([0.08] * 3 + [2.0] * 3)

    params = None
    for level, scale in enumerate((4, 2, 1)):
        ldims = _level_dims(dims, scale)
        mv_l, fx_l = downsample(mv, ldims, scale), downsample(fx, ldims, scale)
        candidates = starts if level == 0 else [params]
        results = [_coordinate_search(mv_l, fx_l, s, steps, dims, iters, min_steps)
                   for s in candidates]
        params = max(results, key=lambda r: r[1])[0]
        steps = steps * 0.5

    identity = global_ncc(fx, mv)
    found = RigidTransform.from_params(params)
    if global_ncc(fx, apply_rigid(mv, found)) < identity:
        return RigidTransform()
    return found
