"""Synthetic brain-like phantoms with known labels."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from casreg.deform import random_smooth_field, warp_labels, warp_scalar
from casreg.volume import normalize

# gestational-week range the synthetic "age" is mapped from
AGE_RANGE = (20.0, 37.0)
# std of the independent acquisition noise added to both images of a pair
PAIR_NOISE = 0.03


def _age_fraction(age):
    lo, hi = AGE_RANGE
    return float(np.clip((age - lo) / (hi - lo), 0.0, 1.0))


def _smooth_noise(rng, shape, sigma):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return noise / (np.abs(noise).max() + 1e-12)


def make_phantom(seed, dims=(64, 64, 64), n_labels=7, age=None):
    """Nested, smoothly deformed ellipsoidal shells, one label per shell.

    Label 1 is the outermost shell and ``n_labels`` the innermost core; 0 is
    background. ``age`` (synthetic gestational weeks) controls overall size
    and shell proportions, so phantoms of similar age look alike; when it is
    omitted it is drawn from ``seed``. The result is a pure function of
    ``(seed, dims, n_labels, age)``.

    Returns ``(image, labels)`` with the image normalized to [0, 1].
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    if not 2 <= n_labels <= 8:
        raise ValueError(f"n_labels must be in [2, 8], got {n_labels}")
    rng = np.random.default_rng(seed)
    if age is None:
        age = rng.uniform(*AGE_RANGE)
    t = _age_fraction(age)

    axes = [(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in dims]
    x = np.stack(np.meshgrid(*axes, indexing="ij"))

    # older phantoms are larger and more elongated
    size = 0.66 + 0.22 * t
    elong = np.array([1.0 + 0.10 * t, 1.0, 1.0 - 0.08 * t])
    semi = size * elong * (1.0 + 0.06 * rng.uniform(-1, 1, 3))
    centre = 0.04 * rng.uniform(-1, 1, 3)

    # low-frequency warp of the coordinate space
    warp = np.zeros_like(x)
    for c in range(3):
        for _ in range(3):
            freq = rng.uniform(-1.2, 1.2, 3)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.02, 0.05)
            warp[c] += amp * np.cos(np.pi * np.tensordot(freq, x, axes=1) + phase)
    q = (x - warp - centre[:, None, None, None]) / semi[:, None, None, None]
    rho = np.sqrt((q ** 2).sum(axis=0))

    core = 0.34 + 0.04 * rng.uniform(-1, 1)
    power = 0.85 + 0.3 * t
    k = np.arange(1, n_labels)
    bounds = 1.0 - (k / (n_labels - 1)) ** power * (1.0 - core)

    labels = np.zeros(dims, dtype=np.int64)
    labels[rho < 1.0] = 1
    for lab, r in enumerate(bounds, start=2):
        labels[rho < r] = lab

    # alternate bright/dark tissue so neighbouring shells contrast
    levels = np.linspace(0.3, 1.0, n_labels)
    order = np.empty(n_labels, dtype=int)
    order[0::2] = np.arange(n_labels - 1, n_labels - 1 - len(order[0::2]), -1)
    order[1::2] = np.arange(len(order[1::2]))
    base = np.concatenate([[0.0], levels[order]])

    image = base[labels]
    image += 0.06 * _smooth_noise(rng, dims, max(dims) / 10.0)
    image = ndimage.gaussian_filter(image, 0.7, mode="nearest")
    return normalize(image), labels


@dataclass(frozen=True)
class PhantomPair:
    moving: np.ndarray
    moving_labels: np.ndarray
    fixed: np.ndarray
    fixed_labels: np.ndarray
    gt_field: np.ndarray


def phantom_pair(seed, dims=(64, 64, 64), amplitude=6.0, smoothness=8.0, n_labels=7,
                 noise=PAIR_NOISE):
    """A registration problem with a known answer.

    The fixed image is the phantom pulled back through a random smooth field;
    both images then get independent white noise of std ``noise`` (as two
    acquisitions would) and are renormalized. Fixed labels are the phantom
    labels warped by the same field.
    """
    image, labels = make_phantom(seed, dims, n_labels)
    gt = random_smooth_field([seed, 1], dims, amplitude, smoothness)
    fixed = warp_scalar(image, gt)
    fixed_labels = warp_labels(labels, gt)
    if noise > 0:
        rng = np.random.default_rng([seed, 2])
        image = normalize(image + noise * rng.standard_normal(dims))
        fixed = normalize(fixed + noise * rng.standard_normal(dims))
    return PhantomPair(image, labels, fixed, fixed_labels, gt)


@dataclass(frozen=True)
class PhantomBank:
    images: list
    labels: list
    ages: list
    target: np.ndarray
    target_labels: np.ndarray
    target_age: float


def phantom_bank(seed, dims=(64, 64, 64), n_atlases=10, n_labels=7, noise=PAIR_NOISE):
    """A multi-atlas problem: ``n_atlases`` phantoms of random age plus an unseen target.

    Every subject (atlas or target) is its own phantom with an age drawn
    uniformly from ``AGE_RANGE``. The target gets acquisition noise of std
    ``noise``; atlas images stay clean.
    """
    rng = np.random.default_rng([seed, 100])
    ages = rng.uniform(*AGE_RANGE, n_atlases + 1)
    images, labels = [], []
    for i in range(n_atlases):
        img, lab = make_phantom([seed, i], dims, n_labels, age=float(ages[i]))
        images.append(img)
        labels.append(lab)
    target, target_labels = make_phantom([seed, n_atlases], dims, n_labels,
                                         age=float(ages[-1]))
    if noise > 0:
        target = normalize(target + noise * rng.standard_normal(dims))
    return PhantomBank(images, labels, [float(a) for a in ages[:-1]], target, target_labels,
                       float(ages[-1]))
