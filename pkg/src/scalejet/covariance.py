"""Executable covariance and invariance checks.

The continuous claim: rescaling the input by S while moving every scale
parameter from sigma to S*sigma reproduces the same values at matched grid
points, layer by layer, through ReLU, batch norm (eval mode) and whole
channels.  Here S = 2 relates two samplings of one analytic scene, so pixel
(c + j) of the coarse grid matches pixel (c' + 2 j) of the fine one.

Each section reports its worst relative error (L-infinity of the difference
over L-infinity of the reference, on matched interior windows).  The
discrete kernels approximate the continuous theory better at coarser
scales, so the test scenes are band-limited and the finest checked sigma
carries a wider tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .data import render_shape
from .jet import JetLayerWeights, JetSpec, jet_index_set, jet_layer_forward
from .net import (
    MultiNetConfig,
    NetworkParams,
    ScaleChannelConfig,
    channel_initial_scales,
    init_params,
    pool_values,
)
from .scalespace import Tensor, disc_gauss_kernel, gauss_der_response


@dataclass
class SectionResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


def rel_linf(values: np.ndarray, reference: np.ndarray) -> float:
    """max |values - reference| / max |reference|."""
    denom = np.abs(reference).max()
    if denom == 0.0:
        return float(np.abs(values).max())
    return float(np.abs(values - reference).max() / denom)


def render_blob(sigma_b: float, radius: int) -> np.ndarray:
    """Unit-amplitude Gaussian blob exp(-|x|^2 / (2 sigma_b^2)) on a
    (2 radius + 1)^2 grid; amplitude 1 makes a rescaled pair pointwise equal."""
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    r2 = coords[:, None] ** 2 + coords[None, :] ** 2
    return np.exp(-r2 / (2.0 * sigma_b * sigma_b))


def blob_pair(sigma_b: float, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """The blob and its exact 2x enlargement on a grid with matched centre."""
    return render_blob(sigma_b, radius), render_blob(2.0 * sigma_b, 2 * radius)


def matched_windows(
    fine: np.ndarray, coarse: np.ndarray, window: int, factor: int = 2
):
    """Values of both maps at matched points |j| <= window around the centres,
    with the fine map sampled every `factor` pixels."""
    cc = (coarse.shape[0] - 1) // 2
    cf = (fine.shape[0] - 1) // 2
    sl_c = slice(cc - window, cc + window + 1)
    sl_f = slice(cf - factor * window, cf + factor * window + 1, factor)
    return fine[sl_f, sl_f], coarse[sl_c, sl_c]


def scene_pair(radius: int = 32, aa: float = 3.4) -> tuple[np.ndarray, np.ndarray]:
    """A band-limited analytic scene sampled at two grids related by S = 2;
    shape sizes, offsets and the anti-aliasing width all scale along, so the
    pair is an exact rescale with a matched centre pixel."""
    n = 2 * radius + 1

    def render(scale: int) -> np.ndarray:
        size = n * scale - (scale - 1)  # keeps the centre on a pixel
        cc = radius * scale
        img = render_shape("annulus", (cc, cc), 11.0 * scale, (size, size), aa * scale)
        img += 0.6 * render_shape(
            "disc", (cc - 11.5 * scale, cc + 10.5 * scale), 5.0 * scale,
            (size, size), aa * scale,
        )
        return img

    return render(1), render(2)


# ---------------------------------------------------------------------------
# sections


def check_kernel_semigroup(
    sigmas=(0.5, 1.0, 1.5, 2.0), epsilon: float = 1e-10
) -> SectionResult:
    """Convolving kernels at s1 and s2 reproduces the kernel at
    sqrt(s1^2 + s2^2) tap by tap."""
    worst = 0.0
    for s1 in sigmas:
        for s2 in sigmas:
            k1 = disc_gauss_kernel(s1, epsilon)
            k2 = disc_gauss_kernel(s2, epsilon)
            k3 = disc_gauss_kernel(float(np.hypot(s1, s2)), epsilon)
            conv = np.convolve(k1.taps, k2.taps)
            radius = k1.radius + k2.radius
            width = max(radius, k3.radius)
            a = np.zeros(2 * width + 1)
            a[width - radius : width + radius + 1] = conv
            b = np.zeros_like(a)
            b[width - k3.radius : width + k3.radius + 1] = k3.taps
            worst = max(worst, float(np.abs(a - b).max()))
    return SectionResult("kernel-semigroup", worst, 1e-10)


def check_response_covariance(
    sigma: float, tolerance: float, sigma_b: float = 5.0, window: int = 14
) -> SectionResult:
    """Scale-normalised derivative responses of the blob pair (S = 2) match
    at matched points for sigma' = 2 sigma, over the full second-order jet."""
    radius = int(5 * sigma_b) + 12
    coarse, fine = blob_pair(sigma_b, radius)
    coarse_img, fine_img = Tensor(coarse), Tensor(fine)
    worst = 0.0
    for alpha in jet_index_set(2, include_zero_order=False):
        rc = gauss_der_response(coarse_img, alpha, sigma, epsilon=1e-8).data[:, :, 0]
        rf = gauss_der_response(fine_img, alpha, 2.0 * sigma, epsilon=1e-8).data[:, :, 0]
        f, c = matched_windows(rf, rc, window)
        worst = max(worst, rel_linf(f, c))
    return SectionResult(f"response-covariance-sigma-{sigma:g}", worst, tolerance)


def check_jet_layer_covariance(
    seed: int = 0, sigma: float = 1.5, tolerance: float = 0.02
) -> SectionResult:
    """A jet layer with identical coefficients at sigma and 2 sigma maps the
    blob pair to matched outputs (pre-ReLU form)."""
    rng = np.random.default_rng(seed)
    weights = JetLayerWeights(rng.standard_normal((3, 1, 5)))
    coarse, fine = blob_pair(5.0, 37)
    out_c = jet_layer_forward(Tensor(coarse), weights, JetSpec(2, False, sigma))
    out_f = jet_layer_forward(Tensor(fine), weights, JetSpec(2, False, 2.0 * sigma))
    worst = 0.0
    for c in range(3):
        f, ref = matched_windows(out_f.data[:, :, c], out_c.data[:, :, c], 14)
        worst = max(worst, rel_linf(f, ref))
    return SectionResult("jet-layer-covariance", worst, tolerance)


def _random_eval_params(cfg: ScaleChannelConfig, seed: int) -> NetworkParams:
    """He-initialised weights with randomised batch-norm affines and neutral
    running statistics, frozen in eval mode."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for st in params.all_bn_states():
        st.scale[:] = rng.uniform(0.6, 1.4, size=st.channels)
        st.shift[:] = rng.uniform(-0.15, 0.15, size=st.channels)
    params.set_mode("eval")
    return params


_CHANNEL_TEMPLATE = dict(
    relative_ratio=1.35,
    num_layers=6,
    feature_widths=(1, 6, 6, 6, 3),
    spatial_selection="spatmax",
)


def _covariant_input_pair(num_channels: int, sigma_pre: float = 3.0):
    """A multi-channel covariant input pair: normalised derivative responses
    of the scene pair, one jet order per channel, shifted positive."""
    coarse, fine = scene_pair()
    orders = jet_index_set(2, include_zero_order=True)
    chans_c = []
    chans_f = []
    for i in range(num_channels):
        alpha = orders[i % len(orders)]
        rc = gauss_der_response(Tensor(coarse), alpha, sigma_pre).data[:, :, 0]
        rf = gauss_der_response(Tensor(fine), alpha, 2.0 * sigma_pre).data[:, :, 0]
        chans_c.append(np.maximum(rc + 0.1, 0.0))
        chans_f.append(np.maximum(rf + 0.1, 0.0))
    return np.stack(chans_c)[:, None], np.stack(chans_f)[:, None]


def check_block_covariance(
    seed: int = 0, sigma: float = 2.0, tolerance: float = 0.02
) -> SectionResult:
    """A single residual block (two jet layers, eval-mode BN, skip, ReLU) at
    sigma on the coarse input matches the block at 2 sigma on the fine one."""
    cfg = ScaleChannelConfig(sigma0=1.0, **_CHANNEL_TEMPLATE)
    params = _random_eval_params(cfg, seed)
    bp = params.blocks[0]
    x_c, x_f = _covariant_input_pair(cfg.feature_widths[1])

    def block(x, sig):
        spec = JetSpec(2, False, sig)
        u, _ = E._unit_forward(x, bp.layer1, spec, "mirror", False, True, [])
        v, _ = E._unit_forward(u, bp.layer2, spec, "mirror", False, False, [])
        return np.maximum(x + v, 0.0)

    out_c = block(x_c, sigma)
    out_f = block(x_f, 2.0 * sigma)
    worst = 0.0
    for c in range(out_c.shape[0]):
        f, ref = matched_windows(out_f[c, 0], out_c[c, 0], 24)
        worst = max(worst, rel_linf(f, ref))
    return SectionResult("block-covariance", worst, tolerance)


def check_channel_covariance(
    seed: int = 0, sigma0: float = 1.5, tolerance: float = 0.03
) -> SectionResult:
    """A whole 6-layer channel with shared random weights, run at sigma_0 on
    the coarse scene and at 2 sigma_0 on the fine scene (batch norm in eval
    mode), matches within tolerance and picks the same spatial-max class."""
    cfg = ScaleChannelConfig(sigma0=sigma0, **_CHANNEL_TEMPLATE)
    params = _random_eval_params(cfg, seed)
    coarse, fine = scene_pair()
    window = 24

    maps_c = E.forward_channel(coarse[None, None], cfg, params).maps[:, 0]
    maps_f = E.forward_channel(
        fine[None, None], cfg.with_sigma0(2.0 * sigma0), params
    ).maps[:, 0]
    worst = 0.0
    scores_c = np.empty(3)
    scores_f = np.empty(3)
    for c in range(3):
        f, ref = matched_windows(maps_f[c], maps_c[c], window)
        worst = max(worst, rel_linf(f, ref))
        scores_c[c] = ref.max()
        scores_f[c] = f.max()
    argmax_match = int(scores_c.argmax()) == int(scores_f.argmax())
    detail = "argmax class matched" if argmax_match else "spatial-max argmax class changed"
    err = worst if argmax_match else float("inf")
    return SectionResult("channel-covariance", err, tolerance, detail)


def check_channel_shift(seed: int = 0, tolerance: float = 0.03) -> SectionResult:
    """Discrete scale invariance: with lambda = sqrt(2) channels, per-channel
    class scores (spatial max over matched interior support) of the coarse
    scene at channel i match the 2x scene at channel i + 2, the predicted
    class is unchanged, and the winning channel index shifts by two."""
    channel = ScaleChannelConfig(sigma0=1.0, **_CHANNEL_TEMPLATE)
    params = _random_eval_params(channel, seed)
    n_pairs = 4
    sig_c = channel_initial_scales(1.0, np.sqrt(2.0), n_pairs)
    sig_f = channel_initial_scales(1.0, np.sqrt(2.0), n_pairs + 2)  # extended by two
    coarse, fine = scene_pair()
    window = 24

    def interior_scores(img: np.ndarray, sigmas, factor: int) -> np.ndarray:
        out = np.empty((len(sigmas), channel.num_classes))
        c0 = (img.shape[0] - 1) // 2
        half = window * factor
        for i, s in enumerate(sigmas):
            maps = E.forward_channel(
                img[None, None], channel.with_sigma0(s), params
            ).maps[:, 0]
            out[i] = maps[:, c0 - half : c0 + half + 1, c0 - half : c0 + half + 1].max(
                axis=(1, 2)
            )
        return out

    sc = interior_scores(coarse, sig_c, 1)
    sf = interior_scores(fine, sig_f, 2)
    worst = max(rel_linf(sf[i + 2], sc[i]) for i in range(n_pairs))
    pooled_c = pool_values(sc, "max")
    pooled_f = pool_values(sf, "max")
    cls_c = int(pooled_c.argmax())
    cls_f = int(pooled_f.argmax())
    win_c = int(sc[:, cls_c].argmax())
    win_f = int(sf[:, cls_f].argmax())
    ok = cls_c == cls_f and win_f == win_c + 2
    detail = f"class {cls_c}->{cls_f}, winning channel {win_c}->{win_f}"
    return SectionResult(
        "multi-channel-shift", worst if ok else float("inf"), tolerance, detail
    )


def run_all(seed: int = 0) -> list[SectionResult]:
    return [
        check_kernel_semigroup(),
        check_response_covariance(1.0, 0.05),
        check_response_covariance(1.5, 0.02),
        check_response_covariance(2.0, 0.02),
        check_response_covariance(3.0, 0.02),
        check_jet_layer_covariance(seed),
        check_block_covariance(seed),
        check_channel_covariance(seed),
        check_channel_shift(seed),
    ]
