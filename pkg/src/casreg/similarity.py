"""Similarity metrics, the smoothness regularizer and the registration loss.

The registration loss is ``-LNCC(fixed, warped) + lambda * smooth(u)`` where
LNCC is the mean squared local correlation over cube windows (edge-clamped)
and ``smooth`` is the mean squared forward-difference gradient of ``u``.
Both terms are means, so ``lambda`` transfers between pyramid levels.
"""

from dataclasses import dataclass

import numpy as np

from casreg import _kernels
from casreg.deform import warp_scalar, warp_scalar_grad

# windows whose standard deviation is at or below this count as flat (correlation 0)
FLAT_STD = 1e-5
FLAT_VARIANCE = FLAT_STD ** 2
DEFAULT_WINDOW = 9
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossBreakdown:
    similarity_term: float
    smoothness_term: float
    lam: float
    total: float


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")


def _check_window(window):
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")


def _box(stack, window, adjoint=False):
    return _kernels.box_filter(np.ascontiguousarray(stack, dtype=np.float64), window // 2, adjoint)


def box_mean(x, window):
    """Cube-window mean with edge replication."""
    return _box(np.asarray(x)[None], window)[0]


def box_mean_adjoint(g, window):
    """Adjoint of :func:`box_mean` (it is not self-adjoint at the borders)."""
    return _box(np.asarray(g)[None], window, adjoint=True)[0]


class _LocalStats:
    """Window statistics shared by the local correlation and its gradient."""

    def __init__(self, a, b, window):
        m = _box(np.stack([a, b, a * a, b * b, a * b]), window)
        self.mu_a, self.mu_b = m[0], m[1]
        self.var_a = m[2] - self.mu_a ** 2
        self.var_b = m[3] - self.mu_b ** 2
        self.cross = m[4] - self.mu_a * self.mu_b
        self.valid = (self.var_a > FLAT_VARIANCE) & (self.var_b > FLAT_VARIANCE)
        self.denom = np.where(self.valid, self.var_a * self.var_b, 1.0)

    def squared(self):
        return np.where(self.valid, self.cross ** 2 / self.denom, 0.0)

    def signed(self):
        return np.where(self.valid, self.cross / np.sqrt(self.denom), 0.0)


def local_correlation(a, b, window=DEFAULT_WINDOW):
    """Per-voxel Pearson correlation over the cube window; flat windows give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    _check_window(window)
    return _LocalStats(a, b, window).signed()


def local_ncc(a, b, window=DEFAULT_WINDOW):
    """Mean over voxels of the squared local correlation, in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    _check_window(window)
    return float(_LocalStats(a, b, window).squared().mean())


def global_ncc(a, b):
    """Pearson correlation of the two voxel populations."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    _check_dims(a, b)
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.dot(da, da))
    nb = np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise ValueError("global NCC is undefined for a constant volume")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    return float(np.mean((a - b) ** 2))


def ssim(a, b, window=7):
    """Mean SSIM with uniform cube windows, dynamic range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    _check_window(window)
    mu_a = box_mean(a, window)
    mu_b = box_mean(b, window)
    var_a = box_mean(a * a, window) - mu_a ** 2
    var_b = box_mean(b * b, window) - mu_b ** 2
    cov = box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _smoothness(field):
    field = np.ascontiguousarray(field, dtype=np.float64)
    sums, counts, grad = _kernels.smoothness_terms(field)
    value = sum(s / c for s, c in zip(sums, counts) if c > 0)
    return float(value), grad


def smoothness_penalty(field):
    """Sum over the three axes of the mean squared forward difference of ``u``.

    Each axis is averaged over the positions where a forward difference
    exists, so ``u_x = x`` scores exactly 1.
    """
    return _smoothness(field)[0]


def smoothness_gradient(field):
    return _smoothness(field)[1]


def total_loss(fx, wp, field, lam=1.0, window=DEFAULT_WINDOW):
    sim = -local_ncc(fx, wp, window)
    smooth = smoothness_penalty(field)
    return LossBreakdown(sim, smooth, lam, sim + lam * smooth)


class RegistrationLoss:
    """The registration loss against one fixed image.

    Window moments of the fixed image are computed once, so repeated
    evaluations during optimization only filter the moving-side moments.
    """

    def __init__(self, fixed, lam=1.0, window=DEFAULT_WINDOW):
        _check_window(window)
        self.fixed = np.ascontiguousarray(fixed, dtype=np.float64)
        self.lam = float(lam)
        self.window = window
        self._fixed_means = _box(np.stack([self.fixed, self.fixed * self.fixed]), window)

    def _lncc(self, warped):
        mm = _box(_kernels.moment_stack(self.fixed, warped), self.window)
        cc, terms = _kernels.lncc_terms(self._fixed_means, mm, FLAT_VARIANCE)
        return float(cc.mean()), terms

    def lncc_gradient(self, warped):
        warped = np.ascontiguousarray(warped, dtype=np.float64)
        _check_dims(self.fixed, warped)
        ncc, terms = self._lncc(warped)
        adj = _box(terms, self.window, adjoint=True)
        f = self.fixed
        grad = ((f * adj[0] - adj[1]) + 2.0 * (warped * adj[2] - adj[3])) / f.size
        return ncc, grad

    def value_and_grad(self, mv, field):
        """Loss of ``field`` and its exact gradient, chained through trilinear warping.

        At cell boundaries the warp derivative is the forward one-sided slope
        (a subgradient).
        """
        warped, dwarp = warp_scalar_grad(mv, field)
        _check_dims(self.fixed, warped)
        ncc, terms = self._lncc(warped)
        adj = _box(terms, self.window, adjoint=True)
        smooth, dsmooth = _smoothness(field)
        grad = _kernels.combine_gradient(self.fixed, warped, adj, dwarp, dsmooth,
                                         self.lam, 1.0 / self.fixed.size)
        return LossBreakdown(-ncc, smooth, self.lam, -ncc + self.lam * smooth), grad


def lncc_gradient(fixed, warped, window=DEFAULT_WINDOW):
    """Value of the mean squared local correlation and its gradient w.r.t. ``warped``."""
    return RegistrationLoss(fixed, 0.0, window).lncc_gradient(warped)


def loss_and_gradient(fx, mv, field, lam=1.0, window=DEFAULT_WINDOW):
    """Return ``(LossBreakdown, gradient)``, the gradient shaped like ``field``."""
    return RegistrationLoss(fx, lam, window).value_and_grad(mv, field)


def loss_gradient(fx, mv, field, lam=1.0, window=DEFAULT_WINDOW):
    """Gradient of ``total_loss(fx, warp_scalar(mv, field), field)`` w.r.t. ``field``."""
    return loss_and_gradient(fx, mv, field, lam, window)[1]


def registration_loss(fx, mv, field, lam=1.0, window=DEFAULT_WINDOW):
    return total_loss(fx, warp_scalar(mv, field), field, lam, window)
