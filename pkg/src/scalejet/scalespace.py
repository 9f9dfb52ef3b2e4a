"""Discrete scale-space primitives.

Smoothing uses the discrete analogue of the Gaussian kernel, whose taps are
scaled modified Bessel values T(n; sigma) = e^(-s) I_n(s) with s = sigma^2.
That kernel satisfies the semigroup property exactly on the integer grid, so
taps are truncated at a requested tail mass but never renormalised.

Derivatives are central differences applied to the smoothed data:
delta = (-1/2, 0, 1/2) and delta2 = (1, -2, 1), composed per derivative
order.  Composition is carried out on the tap masks themselves (correlation
of correlations is correlation with the convolved mask), so each axis needs
a single pass regardless of order.

Axis convention throughout the package: x1 runs along array axis 0 (image
rows), x2 along array axis 1 (image columns).  Image data is float64 in
row-major (height, width, channel) layout with the channel index innermost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .backend import correlate_axis
from .bessel import scaled_bessel_i_all

MIRROR = "mirror"
ZERO = "zero"
_BOUNDARIES = (MIRROR, ZERO)


@dataclass(frozen=True)
class MultiIndex:
    """2-D derivative order alpha = (a1, a2)."""

    a1: int
    a2: int

    def __post_init__(self):
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError("derivative orders must be non-negative")

    @property
    def total_order(self) -> int:
        return self.a1 + self.a2

    @property
    def multinomial(self) -> int:
        """|alpha|! / (a1! a2!), the Taylor-style normalisation factor."""
        return math.comb(self.total_order, self.a1)


@dataclass
class Tensor:
    """Dense height x width x channels map of float64 samples."""

    data: np.ndarray
    boundary: str = MIRROR

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected 2-D or 3-D data, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        if self.boundary not in _BOUNDARIES:
            raise ValueError(f"boundary must be one of {_BOUNDARIES}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "Tensor":
        return Tensor(data, self.boundary)


@dataclass(frozen=True)
class DiscreteKernel1D:
    """Symmetric 1-D kernel with taps indexed -radius..radius."""

    taps: np.ndarray = field(repr=False)
    radius: int
    sigma: float
    tail_mass: float

    def tap(self, n: int) -> float:
        if abs(n) > self.radius:
            return 0.0
        return float(self.taps[n + self.radius])

    @property
    def mass(self) -> float:
        return float(self.taps.sum())


@lru_cache(maxsize=512)
def _disc_gauss_cached(sigma: float, epsilon: float) -> DiscreteKernel1D:
    if sigma == 0.0:
        taps = np.ones(1)
        taps.setflags(write=False)
        return DiscreteKernel1D(taps=taps, radius=0, sigma=0.0, tail_mass=0.0)
    s = sigma * sigma
    # generous initial guess for the support, extended if the tail bound misses
    n_max = int(math.ceil(sigma * (math.sqrt(2.0 * math.log(1.0 / epsilon)) + 2.0))) + 8
    while True:
        half = scaled_bessel_i_all(n_max, s)
        cum = half[0] + 2.0 * np.cumsum(half[1:])
        inside = np.concatenate(([half[0]], cum))  # mass within radius 0..n_max
        tails = 1.0 - inside
        hits = np.nonzero(tails < epsilon)[0]
        if hits.size:
            radius = int(hits[0])
            break
        n_max *= 2
    taps = np.concatenate((half[radius:0:-1], half[: radius + 1]))
    taps.setflags(write=False)
    return DiscreteKernel1D(
        taps=taps, radius=radius, sigma=sigma, tail_mass=float(tails[radius])
    )


def disc_gauss_kernel(sigma: float, epsilon: float) -> DiscreteKernel1D:
    """Discrete analogue of the Gaussian at scale sigma, truncated where the
    discarded two-sided tail mass drops below epsilon.

    Taps are not renormalised; the retained mass is 1 - tail_mass, which keeps
    the semigroup identity kernel(s1) * kernel(s2) = kernel(sqrt(s1^2 + s2^2))
    exact up to the truncated tails.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return _disc_gauss_cached(float(sigma), float(epsilon))


def smooth_separable(image: Tensor, sigma: float, epsilon: float = 0.005) -> Tensor:
    """Smooth every channel along rows then columns with the discrete kernel."""
    kern = disc_gauss_kernel(sigma, epsilon)
    out = smooth_array(image.data, kern, image.boundary, axes=(0, 1))
    return image.with_data(out)


def smooth_array(
    x: np.ndarray, kern: DiscreteKernel1D, boundary: str, axes: tuple[int, int]
) -> np.ndarray:
    """Separable smoothing of a raw array along the two spatial axes."""
    if kern.radius == 0:
        return x.copy()
    out = correlate_axis(x, kern.taps, axes[0], boundary)
    return correlate_axis(out, kern.taps, axes[1], boundary)


_DELTA1 = np.array([-0.5, 0.0, 0.5])
_DELTA2 = np.array([1.0, -2.0, 1.0])


@lru_cache(maxsize=64)
def diff_taps(order: int) -> np.ndarray:
    """Tap mask of the composed central difference operator of a given order:
    (delta2)^j for order 2j, delta followed by (delta2)^j for order 2j + 1.
    """
    if order < 0:
        raise ValueError("order must be non-negative")
    taps = np.array([1.0])
    for _ in range(order // 2):
        taps = np.convolve(taps, _DELTA2)
    if order % 2:
        taps = np.convolve(taps, _DELTA1)
    taps.setflags(write=False)
    return taps


def central_diff(image: Tensor, axis: str, order: int) -> Tensor:
    """Composed central difference of `order` along axis "x1" or "x2"."""
    if order < 1:
        raise ValueError("order must be at least 1")
    ax = {"x1": 0, "x2": 1}.get(axis)
    if ax is None:
        raise ValueError("axis must be 'x1' or 'x2'")
    out = correlate_axis(image.data, diff_taps(order), ax, image.boundary)
    return image.with_data(out)


def gauss_der_response(
    image: Tensor,
    alpha: MultiIndex,
    sigma: float,
    epsilon: float = 0.005,
    normalized: bool = True,
) -> Tensor:
    """Gaussian derivative response of order alpha at scale sigma: smoothing
    with the discrete kernel followed by the composed central differences,
    multiplied by sigma^|alpha| when scale-normalised.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = smooth_separable(image, sigma, epsilon)
    if alpha.a1:
        out = central_diff(out, "x1", alpha.a1)
    if alpha.a2:
        out = central_diff(out, "x2", alpha.a2)
    if normalized and alpha.total_order:
        out = out.with_data(out.data * sigma**alpha.total_order)
    return out
