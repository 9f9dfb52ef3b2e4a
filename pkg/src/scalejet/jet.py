"""Gaussian derivative (N-jet) layers.

A layer output channel is a learned linear combination over input channels
and derivative orders alpha:

    out[c_out] = sum_{c_in} sum_alpha m(alpha) C[c_out, c_in, alpha]
                 * sigma^|alpha| * (g_{x^alpha} * in[c_in])

Smoothing happens once per input channel at the layer scale; the per-alpha
central-difference stacks then run on that shared smoothed map.  The
depthwise-separable variant first forms one jet combination per input
channel and then mixes channels with plain scalars, so each spatial response
is computed exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .backend import correlate_axis
from .scalespace import (
    MIRROR,
    ZERO,
    DiscreteKernel1D,
    MultiIndex,
    Tensor,
    diff_taps,
    disc_gauss_kernel,
    smooth_array,
)

MAX_SUPPORTED_ORDER = 3


@lru_cache(maxsize=16)
def jet_index_set(max_order: int, include_zero_order: bool) -> tuple[MultiIndex, ...]:
    """Ordered derivative index set: increasing |alpha|, decreasing a1 inside
    each order, with (0, 0) first when the zero-order term is included.

    This ordering is fixed; serialized coefficients rely on it.
    """
    if not 1 <= max_order <= MAX_SUPPORTED_ORDER:
        raise ValueError(f"max_order must be in 1..{MAX_SUPPORTED_ORDER}")
    indices = []
    if include_zero_order:
        indices.append(MultiIndex(0, 0))
    for total in range(1, max_order + 1):
        for a1 in range(total, -1, -1):
            indices.append(MultiIndex(a1, total - a1))
    return tuple(indices)


def multinomial_factor(alpha: MultiIndex) -> int:
    """|alpha|! / (a1! a2!)."""
    return alpha.multinomial


@dataclass(frozen=True)
class JetSpec:
    """Shape of one jet layer: derivative orders and the smoothing scale."""

    max_order: int
    include_zero_order: bool
    sigma: float
    epsilon: float = 0.005

    def __post_init__(self):
        if not 1 <= self.max_order <= MAX_SUPPORTED_ORDER:
            raise ValueError(f"max_order must be in 1..{MAX_SUPPORTED_ORDER}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def indices(self) -> tuple[MultiIndex, ...]:
        return jet_index_set(self.max_order, self.include_zero_order)

    @property
    def num_basis(self) -> int:
        return len(self.indices)

    def basis_factors(self) -> np.ndarray:
        """m(alpha) * sigma^|alpha| per index, folded into weights at apply time."""
        return np.array(
            [a.multinomial * self.sigma**a.total_order for a in self.indices]
        )


@dataclass
class JetLayerWeights:
    """Dense jet coefficients C[c_out, c_in, alpha-index] plus an optional
    bias, present only when no batch norm follows the layer."""

    coeffs: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3:
            raise ValueError("coeffs must have shape (c_out, c_in, num_basis)")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.coeffs.shape[0],):
                raise ValueError("bias must have one entry per output channel")

    @property
    def c_out(self) -> int:
        return self.coeffs.shape[0]

    @property
    def c_in(self) -> int:
        return self.coeffs.shape[1]


@dataclass
class DepthSepWeights:
    """Depthwise-separable split: one jet combination per input channel
    (depth_coeffs) mixed across channels by scalars (point_weights)."""

    depth_coeffs: np.ndarray
    point_weights: np.ndarray

    def __post_init__(self):
        self.depth_coeffs = np.asarray(self.depth_coeffs, dtype=np.float64)
        self.point_weights = np.asarray(self.point_weights, dtype=np.float64)
        if self.depth_coeffs.ndim != 2:
            raise ValueError("depth_coeffs must have shape (c_in, num_basis)")
        if self.point_weights.ndim != 2:
            raise ValueError("point_weights must have shape (c_out, c_in)")
        if self.point_weights.shape[1] != self.depth_coeffs.shape[0]:
            raise ValueError("point_weights and depth_coeffs disagree on c_in")

    @property
    def c_out(self) -> int:
        return self.point_weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.depth_coeffs.shape[0]


def basis_responses(
    x: np.ndarray, spec: JetSpec, boundary: str, axes: tuple[int, int] = (0, 1)
) -> list[np.ndarray]:
    """Per-alpha derivative responses of one channel map, sharing a single
    smoothing pass.  Responses are unnormalised; the sigma^|alpha| and
    m(alpha) factors are folded into the coefficients by the callers.
    """
    kern = disc_gauss_kernel(spec.sigma, spec.epsilon)
    smoothed = smooth_array(x, kern, boundary, axes)
    out = []
    for alpha in spec.indices:
        r = smoothed
        if alpha.a1:
            r = correlate_axis(r, diff_taps(alpha.a1), axes[0], boundary)
        if alpha.a2:
            r = correlate_axis(r, diff_taps(alpha.a2), axes[1], boundary)
        out.append(r)
    return out


def jet_layer_forward(image: Tensor, weights: JetLayerWeights, spec: JetSpec) -> Tensor:
    """Standard jet layer: combine all (c_in, alpha) responses per output channel."""
    if weights.c_in != image.channels:
        raise ValueError(
            f"weights expect {weights.c_in} input channels, image has {image.channels}"
        )
    if weights.coeffs.shape[2] != spec.num_basis:
        raise ValueError("coefficient count does not match the jet index set")
    resp = np.stack(
        [
            np.stack(basis_responses(image.data[:, :, c], spec, image.boundary), axis=-1)
            for c in range(image.channels)
        ],
        axis=-2,
    )  # (H, W, c_in, A)
    eff = weights.coeffs * spec.basis_factors()  # (c_out, c_in, A)
    out = np.einsum("hwca,oca->hwo", resp, eff)
    if weights.bias is not None:
        out = out + weights.bias
    return image.with_data(out)


def ds_jet_layer_forward(image: Tensor, weights: DepthSepWeights, spec: JetSpec) -> Tensor:
    """Depthwise-separable jet layer: per-channel jet combination, then
    pointwise mixing.  Each spatial response is computed once per input
    channel and reused for every output channel.
    """
    if weights.c_in != image.channels:
        raise ValueError(
            f"weights expect {weights.c_in} input channels, image has {image.channels}"
        )
    if weights.depth_coeffs.shape[1] != spec.num_basis:
        raise ValueError("depth coefficient count does not match the jet index set")
    factors = spec.basis_factors()
    h = np.empty(image.data.shape[:2] + (image.channels,))
    for c in range(image.channels):
        resp = basis_responses(image.data[:, :, c], spec, image.boundary)
        acc = np.zeros(image.data.shape[:2])
        for a, r in enumerate(resp):
            acc += weights.depth_coeffs[c, a] * factors[a] * r
        h[:, :, c] = acc
    out = np.einsum("hwc,oc->hwo", h, weights.point_weights)
    return image.with_data(out)


def effective_kernel(
    weights: JetLayerWeights, spec: JetSpec, c_out: int, c_in: int
) -> Tensor:
    """Render the effective spatial filter of one (c_out, c_in) pair as the
    layer response to a centred impulse, on a grid of radius ceil(4 sigma) + 2.

    The rendering uses a zero boundary so the kernel values are untouched by
    any reflection; filter export runs through this.
    """
    if not 0 <= c_out < weights.c_out:
        raise IndexError("c_out out of range")
    if not 0 <= c_in < weights.c_in:
        raise IndexError("c_in out of range")
    radius = int(math.ceil(4.0 * spec.sigma)) + 2
    size = 2 * radius + 1
    impulse = np.zeros((size, size))
    impulse[radius, radius] = 1.0
    resp = basis_responses(impulse, spec, ZERO)
    factors = spec.basis_factors()
    acc = np.zeros((size, size))
    for a in range(spec.num_basis):
        acc += weights.coeffs[c_out, c_in, a] * factors[a] * resp[a]
    return Tensor(acc[:, :, None], boundary=ZERO)
