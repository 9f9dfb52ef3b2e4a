"""Batched forward/backward engine for scale channels.

Activations are laid out channel-major as (C, B, H, W): correlations run on
(C*B, H, W) views without copies and the channel-mixing contractions become
single BLAS matmuls on (C, B*H*W) views.

The backward pass stores the per-layer smoothed maps instead of the full
per-order response stacks: coefficient gradients contract the adjoint
difference of the upstream gradient against the smoothed map, which is
algebraically identical and several times smaller.  A tape is valid for one
backward call on the forward pass that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import correlate_axis, correlate_axis_adjoint
from .jet import DepthSepWeights, JetSpec
from .net import (
    CENTRE,
    SPATMAX,
    BatchNormState,
    LayerParams,
    NetworkParams,
    ScaleChannelConfig,
    _centre_slices,
)
from .scalespace import diff_taps, disc_gauss_kernel

_H_AXIS, _W_AXIS = 1, 2  # spatial axes of the (rows, H, W) views


def _smooth(x3: np.ndarray, taps: np.ndarray, boundary: str) -> np.ndarray:
    out = correlate_axis(x3, taps, _H_AXIS, boundary)
    return correlate_axis(out, taps, _W_AXIS, boundary)


def _smooth_adjoint(g3: np.ndarray, taps: np.ndarray, boundary: str) -> np.ndarray:
    out = correlate_axis_adjoint(g3, taps, _W_AXIS, boundary)
    return correlate_axis_adjoint(out, taps, _H_AXIS, boundary)


def _diff(x3: np.ndarray, a1: int, a2: int, boundary: str) -> np.ndarray:
    out = x3
    if a1:
        out = correlate_axis(out, diff_taps(a1), _H_AXIS, boundary)
    if a2:
        out = correlate_axis(out, diff_taps(a2), _W_AXIS, boundary)
    return out


def _diff_adjoint(g3: np.ndarray, a1: int, a2: int, boundary: str) -> np.ndarray:
    out = g3
    if a2:
        out = correlate_axis_adjoint(out, diff_taps(a2), _W_AXIS, boundary)
    if a1:
        out = correlate_axis_adjoint(out, diff_taps(a1), _H_AXIS, boundary)
    return out


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BNCache:
    xhat: np.ndarray
    inv: np.ndarray
    train: bool


@dataclass
class BNUpdate:
    state: BatchNormState
    mean: np.ndarray
    var: np.ndarray

    def commit(self):
        m = self.state.momentum
        self.state.running_mean += m * (self.mean - self.state.running_mean)
        self.state.running_var += m * (self.var - self.state.running_var)


def _bn_forward(x: np.ndarray, st: BatchNormState, train: bool):
    """(C, B, H, W) batch norm; returns output, cache, pending stat update."""
    if train:
        mean = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        update = BNUpdate(st, mean, var)
    else:
        mean, var = st.running_mean, st.running_var
        update = None
    inv = 1.0 / np.sqrt(var + st.eps)
    xhat = (x - mean[:, None, None, None]) * inv[:, None, None, None]
    y = st.scale[:, None, None, None] * xhat + st.shift[:, None, None, None]
    return y, BNCache(xhat, inv, train), update


def _bn_backward(g: np.ndarray, cache: BNCache, st: BatchNormState):
    """Returns (dx, dscale, dshift); no gradient flows to running stats."""
    dshift = g.sum(axis=(1, 2, 3))
    dscale = (g * cache.xhat).sum(axis=(1, 2, 3))
    coef = (st.scale * cache.inv)[:, None, None, None]
    if not cache.train:
        return g * coef, dscale, dshift
    m = g[0].size
    gmean = (dshift / m)[:, None, None, None]
    pmean = (dscale / m)[:, None, None, None]
    dx = coef * (g - gmean - cache.xhat * pmean)
    return dx, dscale, dshift


# ---------------------------------------------------------------------------
# jet layers


@dataclass
class JetCache:
    smoothed: np.ndarray  # (C_in, B, H, W)
    h: np.ndarray | None  # depthwise intermediate, (C_in, B, H, W)


def _jet_forward(x: np.ndarray, layer: LayerParams, spec: JetSpec, boundary: str):
    c_in, b, hh, ww = x.shape
    kern = disc_gauss_kernel(spec.sigma, spec.epsilon)
    sm = _smooth(x.reshape(c_in * b, hh, ww), kern.taps, boundary).reshape(x.shape)
    factors = spec.basis_factors()
    a_count = spec.num_basis
    sm3 = sm.reshape(c_in * b, hh, ww)
    resp = np.empty((c_in, a_count, b * hh * ww))
    for a, alpha in enumerate(spec.indices):
        resp[:, a] = _diff(sm3, alpha.a1, alpha.a2, boundary).reshape(c_in, -1)
    w = layer.weights
    if isinstance(w, DepthSepWeights):
        effd = w.depth_coeffs * factors  # (C_in, A)
        hmid = np.einsum("ca,cap->cp", effd, resp)
        z = (w.point_weights @ hmid).reshape(-1, b, hh, ww)
        cache = JetCache(sm, hmid.reshape(c_in, b, hh, ww))
    else:
        eff = (w.coeffs * factors).reshape(w.c_out, c_in * a_count)
        z = (eff @ resp.reshape(c_in * a_count, -1)).reshape(w.c_out, b, hh, ww)
        if w.bias is not None:
            z += w.bias[:, None, None, None]
        cache = JetCache(sm, None)
    return z, cache


def _jet_backward(
    g: np.ndarray,
    cache: JetCache,
    layer: LayerParams,
    spec: JetSpec,
    boundary: str,
    grads: dict,
    prefix: str,
    need_input_grad: bool = True,
):
    c_out, b, hh, ww = g.shape
    w = layer.weights
    c_in = cache.smoothed.shape[0]
    factors = spec.basis_factors()
    kern = disc_gauss_kernel(spec.sigma, spec.epsilon)
    sm2 = cache.smoothed.reshape(c_in, -1)
    if isinstance(w, DepthSepWeights):
        g2 = g.reshape(c_out, -1)
        h2 = cache.h.reshape(c_in, -1)
        grads[f"{prefix}.pw"] += g2 @ h2.T
        dh = (w.point_weights.T @ g2).reshape(c_in, b, hh, ww)
        dh3 = dh.reshape(c_in * b, hh, ww)
        dsm2 = np.zeros((c_in, b * hh * ww))
        effd = w.depth_coeffs * factors
        ddepth = grads[f"{prefix}.dw"]
        for a, alpha in enumerate(spec.indices):
            t = _diff_adjoint(dh3, alpha.a1, alpha.a2, boundary).reshape(c_in, -1)
            ddepth[:, a] += factors[a] * (t * sm2).sum(axis=1)
            dsm2 += effd[:, a, None] * t
    else:
        g3 = g.reshape(c_out * b, hh, ww)
        g2 = g.reshape(c_out, -1)
        if w.bias is not None:
            grads[f"{prefix}.b"] += g.sum(axis=(1, 2, 3))
        eff = (w.coeffs * factors).reshape(c_out, c_in * spec.num_basis)
        deff = np.empty((c_out, c_in, spec.num_basis))
        dsm2 = np.zeros((c_in, b * hh * ww))
        for a, alpha in enumerate(spec.indices):
            t = _diff_adjoint(g3, alpha.a1, alpha.a2, boundary).reshape(c_out, -1)
            deff[:, :, a] = t @ sm2.T
            dsm2 += (w.coeffs[:, :, a] * factors[a]).T @ t
        grads[f"{prefix}.w"] += deff * factors
    if not need_input_grad:
        return None
    dsm3 = dsm2.reshape(c_in * b, hh, ww)
    return _smooth_adjoint(dsm3, kern.taps, boundary).reshape(c_in, b, hh, ww)


# ---------------------------------------------------------------------------
# conv unit = jet layer + optional batch norm + optional ReLU


@dataclass
class UnitCache:
    jet: JetCache
    bn: BNCache | None
    mask: np.ndarray | None


def _unit_forward(x, layer: LayerParams, spec, boundary, train, relu, updates):
    z, jet_cache = _jet_forward(x, layer, spec, boundary)
    bn_cache = None
    if layer.bn is not None:
        z, bn_cache, upd = _bn_forward(z, layer.bn, train)
        if upd is not None:
            updates.append(upd)
    mask = None
    if relu:
        mask = z > 0.0
        z = np.where(mask, z, 0.0)
    return z, UnitCache(jet_cache, bn_cache, mask)


def _unit_backward(g, cache: UnitCache, layer: LayerParams, spec, boundary,
                   grads, prefix, need_input_grad=True):
    if cache.mask is not None:
        g = g * cache.mask
    if cache.bn is not None:
        g, dscale, dshift = _bn_backward(g, cache.bn, layer.bn)
        grads[f"{prefix}.bn.g"] += dscale
        grads[f"{prefix}.bn.b"] += dshift
    return _jet_backward(g, cache.jet, layer, spec, boundary, grads, prefix,
                         need_input_grad)


# ---------------------------------------------------------------------------
# scale channel


@dataclass
class BlockCache:
    x: np.ndarray
    unit1: UnitCache
    unit2: UnitCache
    proj_bn: BNCache | None
    out_mask: np.ndarray


@dataclass
class ChannelTape:
    first: UnitCache = None
    blocks: list[BlockCache] = field(default_factory=list)
    final: UnitCache = None
    consumed: bool = False


@dataclass
class ForwardResult:
    maps: np.ndarray  # (num_classes, B, H, W)
    tape: ChannelTape | None
    bn_updates: list[BNUpdate]


def forward_channel(
    x: np.ndarray,
    cfg: ScaleChannelConfig,
    params: NetworkParams,
    train: bool = False,
    need_tape: bool = False,
) -> ForwardResult:
    """Run one scale channel on a (C, B, H, W) batch."""
    if x.shape[0] != cfg.input_channels:
        raise ValueError("input channel count does not match the config")
    updates: list[BNUpdate] = []
    tape = ChannelTape() if need_tape else None
    boundary = cfg.boundary

    out, cache = _unit_forward(
        x, params.first, cfg.jet_spec(1, first_layer=True), boundary, train, True, updates
    )
    if tape:
        tape.first = cache

    for blk, bp in zip(cfg.blocks, params.blocks):
        spec = cfg.jet_spec(blk.effective_index)
        u, c1 = _unit_forward(out, bp.layer1, spec, boundary, train, True, updates)
        v, c2 = _unit_forward(u, bp.layer2, spec, boundary, train, False, updates)
        if blk.uses_projection:
            skip = (bp.proj @ out.reshape(blk.width_in, -1)).reshape(v.shape)
            skip, pbn, upd = _bn_forward(skip, bp.proj_bn, train)
            if upd is not None:
                updates.append(upd)
        else:
            skip, pbn = out, None
        pre = skip + v
        mask = pre > 0.0
        new_out = np.where(mask, pre, 0.0)
        if tape:
            tape.blocks.append(BlockCache(out, c1, c2, pbn, mask))
        out = new_out

    final_layer = LayerParams(params.final, bn=None)
    spec = cfg.jet_spec(cfg.num_effective)
    maps, cache = _unit_forward(out, final_layer, spec, boundary, train, True, updates)
    if tape:
        tape.final = cache
    return ForwardResult(maps=maps, tape=tape, bn_updates=updates)


def backward_channel(
    dmaps: np.ndarray,
    tape: ChannelTape,
    cfg: ScaleChannelConfig,
    params: NetworkParams,
    grads: dict,
) -> None:
    """Accumulate parameter gradients for one channel into `grads`."""
    if tape.consumed:
        raise RuntimeError("tape has already been consumed by a backward pass")
    tape.consumed = True
    boundary = cfg.boundary

    final_layer = LayerParams(params.final, bn=None)
    g = _unit_backward(
        dmaps, tape.final, final_layer, cfg.jet_spec(cfg.num_effective), boundary,
        grads, "final",
    )

    for blk, bp, cache in zip(
        reversed(cfg.blocks), reversed(params.blocks), reversed(tape.blocks)
    ):
        spec = cfg.jet_spec(blk.effective_index)
        k = blk.effective_index
        g = g * cache.out_mask
        if blk.uses_projection:
            dskip, dscale, dshift = _bn_backward(g, cache.proj_bn, bp.proj_bn)
            grads[f"block{k}.proj.bn.g"] += dscale
            grads[f"block{k}.proj.bn.b"] += dshift
            d2 = dskip.reshape(dskip.shape[0], -1)
            grads[f"block{k}.proj.w"] += d2 @ cache.x.reshape(blk.width_in, -1).T
            dx_skip = (bp.proj.T @ d2).reshape(cache.x.shape)
        else:
            dx_skip = g
        du = _unit_backward(g, cache.unit2, bp.layer2, spec, boundary,
                            grads, f"block{k}.l2")
        dx_main = _unit_backward(du, cache.unit1, bp.layer1, spec, boundary,
                                 grads, f"block{k}.l1")
        g = dx_main + dx_skip

    _unit_backward(
        g, tape.first, params.first, cfg.jet_spec(1, first_layer=True), boundary,
        grads, "first", need_input_grad=False,
    )


def zero_grads(params: NetworkParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.learnables()}


# ---------------------------------------------------------------------------
# spatial selection on batched maps


@dataclass
class SelectCache:
    method: str
    shape: tuple
    argmax: np.ndarray | None


def select_forward(maps: np.ndarray, method: str):
    """(C, B, H, W) class maps -> (C, B) scores plus routing cache."""
    c, b, h, w = maps.shape
    if method == CENTRE:
        region = maps[:, :, _centre_slices(h), _centre_slices(w)]
        return region.mean(axis=(2, 3)), SelectCache(method, maps.shape, None)
    if method == SPATMAX:
        flat = maps.reshape(c, b, h * w)
        idx = flat.argmax(axis=2)
        scores = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
        return scores, SelectCache(method, maps.shape, idx)
    raise ValueError(f"unknown spatial selection {method!r}")


def select_backward(dscores: np.ndarray, cache: SelectCache) -> np.ndarray:
    c, b, h, w = cache.shape
    out = np.zeros(cache.shape)
    if cache.method == CENTRE:
        hs, ws = _centre_slices(h), _centre_slices(w)
        count = (hs.stop - hs.start) * (ws.stop - ws.start)
        out[:, :, hs, ws] = (dscores / count)[:, :, None, None]
        return out
    flat = out.reshape(c, b, h * w)
    np.put_along_axis(flat, cache.argmax[:, :, None], dscores[:, :, None], axis=2)
    return out


def channel_scores(
    x: np.ndarray,
    cfg: ScaleChannelConfig,
    params: NetworkParams,
    train: bool = False,
) -> tuple[np.ndarray, list[BNUpdate]]:
    """Forward one channel and spatially select: (num_classes, B) scores."""
    res = forward_channel(x, cfg, params, train=train)
    scores, _ = select_forward(res.maps, cfg.spatial_selection)
    return scores, res.bn_updates


def batch_to_engine(batch: np.ndarray) -> np.ndarray:
    """(B, H, W, C) image batch -> engine layout (C, B, H, W)."""
    return np.ascontiguousarray(batch.transpose(3, 0, 1, 2))
