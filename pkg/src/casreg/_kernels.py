"""numba kernels for trilinear / nearest-neighbour sampling of 3D grids.

Every output voxel is written by exactly one iteration and no kernel does a
cross-voxel reduction, so results do not depend on the thread count.
"""

import math

import numba
import numpy as np
from numba import njit, prange


def set_threads(n):
    """Set the numba thread count, capped to the pool size fixed at import."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def get_threads():
    return numba.get_num_threads()


@njit(inline="always")
def _cell(x, n):
    # clamp to [0, n-1]; returns lower corner, fraction, and whether clamped
    if n == 1:
        return 0, 0.0, True
    clamped = False
    if x < 0.0:
        x = 0.0
        clamped = True
    elif x > n - 1:
        x = float(n - 1)
        clamped = True
    i0 = int(math.floor(x))
    if i0 > n - 2:
        i0 = n - 2
    return i0, x - i0, clamped


@njit(inline="always")
def _lerp(a, b, f):
    # exact at both ends, so a zero field reproduces every voxel, including
    # the last one along each axis where the fraction is 1
    if f < 0.5:
        return a + (b - a) * f
    return b - (b - a) * (1.0 - f)


@njit(parallel=True, cache=True)
def trilinear_warp(vol, field):
    n0, n1, n2 = vol.shape
    out = np.empty((n0, n1, n2), dtype=np.float64)
    for i in prange(n0):
        for j in range(n1):
            for k in range(n2):
                i0, fx, _ = _cell(i + field[0, i, j, k], n0)
                j0, fy, _ = _cell(j + field[1, i, j, k], n1)
                k0, fz, _ = _cell(k + field[2, i, j, k], n2)
                i1 = min(i0 + 1, n0 - 1)
                j1 = min(j0 + 1, n1 - 1)
                k1 = min(k0 + 1, n2 - 1)
                c00 = _lerp(vol[i0, j0, k0], vol[i1, j0, k0], fx)
                c01 = _lerp(vol[i0, j0, k1], vol[i1, j0, k1], fx)
                c10 = _lerp(vol[i0, j1, k0], vol[i1, j1, k0], fx)
                c11 = _lerp(vol[i0, j1, k1], vol[i1, j1, k1], fx)
                c0 = _lerp(c00, c10, fy)
                c1 = _lerp(c01, c11, fy)
                out[i, j, k] = _lerp(c0, c1, fz)
    return out


@njit(parallel=True, cache=True)
def trilinear_warp_grad(vol, field):
    """Warp plus the partial derivatives of each sample w.r.t. its coordinate.

    Derivatives along a clamped axis are zero.
    """
    n0, n1, n2 = vol.shape
    out = np.empty((n0, n1, n2), dtype=np.float64)
    grad = np.zeros((3, n0, n1, n2), dtype=np.float64)
    for i in prange(n0):
        for j in range(n1):
            for k in range(n2):
                i0, fx, cx = _cell(i + field[0, i, j, k], n0)
                j0, fy, cy = _cell(j + field[1, i, j, k], n1)
                k0, fz, cz = _cell(k + field[2, i, j, k], n2)
                i1 = min(i0 + 1, n0 - 1)
                j1 = min(j0 + 1, n1 - 1)
                k1 = min(k0 + 1, n2 - 1)
                v000 = vol[i0, j0, k0]
                v100 = vol[i1, j0, k0]
                v010 = vol[i0, j1, k0]
                v110 = vol[i1, j1, k0]
                v001 = vol[i0, j0, k1]
                v101 = vol[i1, j0, k1]
                v011 = vol[i0, j1, k1]
                v111 = vol[i1, j1, k1]
                c00 = _lerp(v000, v100, fx)
                c01 = _lerp(v001, v101, fx)
                c10 = _lerp(v010, v110, fx)
                c11 = _lerp(v011, v111, fx)
                c0 = _lerp(c00, c10, fy)
                c1 = _lerp(c01, c11, fy)
                out[i, j, k] = _lerp(c0, c1, fz)
                if not cz:
                    grad[2, i, j, k] = c1 - c0
                if not cy:
                    grad[1, i, j, k] = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz
                if not cx:
                    d00 = v100 - v000
                    d01 = v101 - v001
                    d10 = v110 - v010
                    d11 = v111 - v011
                    d0 = _lerp(d00, d10, fy)
                    d1 = _lerp(d01, d11, fy)
                    grad[0, i, j, k] = _lerp(d0, d1, fz)
    return out, grad


@njit(inline="always")
def _nearest(x, n):
    r = int(math.floor(x + 0.5))
    if r < 0:
        return 0
    if r > n - 1:
        return n - 1
    return r


@njit(parallel=True, cache=True)
def nearest_warp(vol, field):
    n0, n1, n2 = vol.shape
    out = np.empty_like(vol)
    for i in prange(n0):
        for j in range(n1):
            for k in range(n2):
                a = _nearest(i + field[0, i, j, k], n0)
                b = _nearest(j + field[1, i, j, k], n1)
                c = _nearest(k + field[2, i, j, k], n2)
                out[i, j, k] = vol[a, b, c]
    return out


@njit(parallel=True, cache=True)
def trilinear_sample(vol, c0, c1, c2):
    """Sample ``vol`` at absolute coordinates with edge clamping."""
    n0, n1, n2 = vol.shape
    m0, m1, m2 = c0.shape
    out = np.empty((m0, m1, m2), dtype=np.float64)
    for i in prange(m0):
        for j in range(m1):
            for k in range(m2):
                i0, fx, _ = _cell(c0[i, j, k], n0)
                j0, fy, _ = _cell(c1[i, j, k], n1)
                k0, fz, _ = _cell(c2[i, j, k], n2)
                i1 = min(i0 + 1, n0 - 1)
                j1 = min(j0 + 1, n1 - 1)
                k1 = min(k0 + 1, n2 - 1)
                a00 = _lerp(vol[i0, j0, k0], vol[i1, j0, k0], fx)
                a01 = _lerp(vol[i0, j0, k1], vol[i1, j0, k1], fx)
                a10 = _lerp(vol[i0, j1, k0], vol[i1, j1, k0], fx)
                a11 = _lerp(vol[i0, j1, k1], vol[i1, j1, k1], fx)
                b0 = _lerp(a00, a10, fy)
                b1 = _lerp(a01, a11, fy)
                out[i, j, k] = _lerp(b0, b1, fz)
    return out


@njit(parallel=True, cache=True)
def nearest_sample(vol, c0, c1, c2):
    n0, n1, n2 = vol.shape
    m0, m1, m2 = c0.shape
    out = np.empty((m0, m1, m2), dtype=vol.dtype)
    for i in prange(m0):
        for j in range(m1):
            for k in range(m2):
                out[i, j, k] = vol[_nearest(c0[i, j, k], n0),
                                   _nearest(c1[i, j, k], n1),
                                   _nearest(c2[i, j, k], n2)]
    return out


@njit(inline="always")
def _box_line(src, dst, r, adjoint):
    # src/dst are 1D views of one line; window 2r+1, edge-clamped
    n = src.shape[0]
    inv = 1.0 / (2 * r + 1)
    if n == 1:
        dst[0] = src[0]
        return
    if not adjoint:
        s = 0.0
        for k in range(-r, r + 1):
            s += src[min(max(k, 0), n - 1)]
        dst[0] = s * inv
        for q in range(1, n):
            s += src[min(q + r, n - 1)] - src[max(q - r - 1, 0)]
            dst[q] = s * inv
        return
    # adjoint: interior positions gather g over |p - q| <= r; the two edge
    # positions also collect every read that was clamped onto them
    s = 0.0
    for p in range(0, min(r, n - 1) + 1):
        s += src[p]
    for q in range(1, n - 1):
        if q + r <= n - 1:
            s += src[q + r]
        if q - r - 1 >= 0:
            s -= src[q - r - 1]
        dst[q] = s * inv
    e = 0.0
    for p in range(0, min(r, n - 1) + 1):
        e += (r - p + 1) * src[p]
    dst[0] = e * inv
    e = 0.0
    for p in range(max(n - 1 - r, 0), n):
        e += (r - (n - 1 - p) + 1) * src[p]
    dst[n - 1] = e * inv


@njit(inline="always")
def _box_rows(src, dst, r, adjoint, s):
    # same as _box_line along axis 0 of a 2D view, vectorized over axis 1;
    # ``s`` is a scratch row
    n, m = src.shape
    inv = 1.0 / (2 * r + 1)
    if n == 1:
        for k in range(m):
            dst[0, k] = src[0, k]
        return
    s[:] = 0.0
    if not adjoint:
        for t in range(-r, r + 1):
            row = min(max(t, 0), n - 1)
            for k in range(m):
                s[k] += src[row, k]
        for k in range(m):
            dst[0, k] = s[k] * inv
        for q in range(1, n):
            hi = min(q + r, n - 1)
            lo = max(q - r - 1, 0)
            for k in range(m):
                s[k] += src[hi, k] - src[lo, k]
                dst[q, k] = s[k] * inv
        return
    for p in range(0, min(r, n - 1) + 1):
        for k in range(m):
            s[k] += src[p, k]
    for q in range(1, n - 1):
        hi = q + r
        lo = q - r - 1
        for k in range(m):
            if hi <= n - 1:
                s[k] += src[hi, k]
            if lo >= 0:
                s[k] -= src[lo, k]
            dst[q, k] = s[k] * inv
    s[:] = 0.0
    for p in range(0, min(r, n - 1) + 1):
        for k in range(m):
            s[k] += (r - p + 1) * src[p, k]
    for k in range(m):
        dst[0, k] = s[k] * inv
    s[:] = 0.0
    for p in range(max(n - 1 - r, 0), n):
        for k in range(m):
            s[k] += (r - (n - 1 - p) + 1) * src[p, k]
    for k in range(m):
        dst[n - 1, k] = s[k] * inv


@njit(parallel=True, cache=True)
def box_filter(x, r, adjoint):
    """Separable cube box mean (or its adjoint) over the last three axes of (C, n0, n1, n2)."""
    nc, n0, n1, n2 = x.shape
    a = np.empty_like(x)
    b = np.empty_like(x)
    # axis 0: filter (n0, n1*n2) slabs in column blocks
    cols = n1 * n2
    nblk = (cols + 511) // 512
    for t in prange(nc * nblk):
        c = t // nblk
        lo = (t % nblk) * 512
        hi = min(lo + 512, cols)
        xs = x[c].reshape((n0, cols))
        as_ = a[c].reshape((n0, cols))
        _box_rows(xs[:, lo:hi], as_[:, lo:hi], r, adjoint, np.empty(hi - lo))
    for t in prange(nc * n0):
        c = t // n0
        i = t % n0
        _box_rows(a[c, i, :, :], b[c, i, :, :], r, adjoint, np.empty(n2))
        for j in range(n1):
            _box_line(b[c, i, j, :], a[c, i, j, :], r, adjoint)
    return a


@njit(parallel=True, cache=True)
def lncc_terms(fm, mm, flat):
    """Squared local correlation and the adjoint inputs of its gradient.

    ``fm`` holds the window means of (a, a*a), ``mm`` those of (b, b*b, a*b).
    Returns the cc map and a (4, ...) stack of alpha, alpha*mu_a, beta,
    beta*mu_b.
    """
    _, n0, n1, n2 = mm.shape
    cc = np.empty((n0, n1, n2))
    out = np.empty((4, n0, n1, n2))
    for i in prange(n0):
        for j in range(n1):
            for k in range(n2):
                mu_a = fm[0, i, j, k]
                mu_b = mm[0, i, j, k]
                var_a = fm[1, i, j, k] - mu_a * mu_a
                var_b = mm[1, i, j, k] - mu_b * mu_b
                cross = mm[2, i, j, k] - mu_a * mu_b
                if var_a > flat and var_b > flat:
                    denom = var_a * var_b
                    alpha = 2.0 * cross / denom
                    # written so that beta = -alpha / 2 exactly when a == b,
                    # which makes the gradient vanish exactly at alignment
                    beta = -0.5 * alpha * (cross / var_b)
                    cc[i, j, k] = cross * cross / denom
                else:
                    alpha = 0.0
                    beta = 0.0
                    cc[i, j, k] = 0.0
                out[0, i, j, k] = alpha
                out[1, i, j, k] = alpha * mu_a
                out[2, i, j, k] = beta
                out[3, i, j, k] = beta * mu_b
    return cc, out


@njit(parallel=True, cache=True)
def combine_gradient(fixed, warped, adj, dwarp, dsmooth, lam, inv_n):
    _, n0, n1, n2 = dwarp.shape
    grad = np.empty((3, n0, n1, n2))
    for i in prange(n0):
        for j in range(n1):
            for k in range(n2):
                # grouped so each half rounds identically with or without FMA
                # contraction; at alignment the halves cancel exactly
                dsim = ((fixed[i, j, k] * adj[0, i, j, k] - adj[1, i, j, k])
                        + 2.0 * (warped[i, j, k] * adj[2, i, j, k] - adj[3, i, j, k])) * inv_n
                for c in range(3):
                    grad[c, i, j, k] = -dsim * dwarp[c, i, j, k] + lam * dsmooth[c, i, j, k]
    return grad


@njit(parallel=True, cache=True)
def smoothness_terms(u):
    """Per-axis sums of squared forward differences and the penalty gradient.

    Returns ``(sums[3], grad)`` where ``grad`` already carries the per-axis
    normalization by the number of difference positions.
    """
    nc, n0, n1, n2 = u.shape
    counts = np.array([(n0 - 1) * n1 * n2, n0 * (n1 - 1) * n2, n0 * n1 * (n2 - 1)], dtype=np.float64)
    scale = np.zeros(3)
    for a in range(3):
        if counts[a] > 0:
            scale[a] = 2.0 / counts[a]
    grad = np.zeros_like(u)
    partial = np.zeros((n0, 3))
    for i in prange(n0):
        for c in range(nc):
            for j in range(n1):
                for k in range(n2):
                    v = u[c, i, j, k]
                    g = 0.0
                    if i + 1 < n0:
                        d = u[c, i + 1, j, k] - v
                        partial[i, 0] += d * d
                        g -= scale[0] * d
                    if i > 0:
                        g += scale[0] * (v - u[c, i - 1, j, k])
                    if j + 1 < n1:
                        d = u[c, i, j + 1, k] - v
                        partial[i, 1] += d * d
                        g -= scale[1] * d
                    if j > 0:
                        g += scale[1] * (v - u[c, i, j - 1, k])
                    if k + 1 < n2:
                        d = u[c, i, j, k + 1] - v
                        partial[i, 2] += d * d
                        g -= scale[2] * d
                    if k > 0:
                        g += scale[2] * (v - u[c, i, j, k - 1])
                    grad[c, i, j, k] = g
    # fixed-order reduction over slabs keeps the sum thread-count independent
    sums = np.zeros(3)
    for i in range(n0):
        for a in range(3):
            sums[a] += partial[i, a]
    return sums, counts, grad


@njit(parallel=True, cache=True)
def adam_step(params, grad, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam update of ``params`` (flattened over the leading axis)."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    p = params.reshape(params.shape[0], -1)
    g = grad.reshape(grad.shape[0], -1)
    mm = m.reshape(m.shape[0], -1)
    vv = v.reshape(v.shape[0], -1)
    n = p.shape[1]
    for c in range(p.shape[0]):
        for i in prange(n):
            gi = g[c, i]
            mi = beta1 * mm[c, i] + (1.0 - beta1) * gi
            vi = beta2 * vv[c, i] + (1.0 - beta2) * gi * gi
            mm[c, i] = mi
            vv[c, i] = vi
            p[c, i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


@njit(parallel=True, cache=True)
def moment_stack(a, b):
    """Stack of (b, b*b, a*b) for the moving-side window moments."""
    n0, n1, n2 = a.shape
    out = np.empty((3, n0, n1, n2))
    for i in prange(n0):
        for j in range(n1):
            for k in range(n2):
                bv = b[i, j, k]
                out[0, i, j, k] = bv
                out[1, i, j, k] = bv * bv
                out[2, i, j, k] = a[i, j, k] * bv
    return out
