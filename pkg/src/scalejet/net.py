"""Network assembly: residual scale channels built from jet layers.

A scale channel is a fixed cascade: one plain jet layer, a run of residual
blocks, and a final jet layer that emits one map per class.  Layer kappa
1..K carries the scale sigma_k = r^(k-1) sigma_0 of its effective layer
k = floor(kappa/2) + 1; both layers of a residual block share one sigma.
There is no spatial subsampling anywhere, so every intermediate map keeps
the input's spatial size.

A multi-scale-channel network runs several copies of the same channel with
shared parameters at geometrically spaced initial scales and aggregates the
spatially selected class scores with a permutation-invariant pooling over
the channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .jet import DepthSepWeights, JetLayerWeights, JetSpec
from .scalespace import MIRROR, Tensor

CENTRE = "centre"
SPATMAX = "spatmax"
_SELECTIONS = (CENTRE, SPATMAX)

POOL_MAX = "max"
POOL_LOGSUMEXP = "logsumexp"
POOL_AVERAGE = "average"
_POOLINGS = (POOL_MAX, POOL_LOGSUMEXP, POOL_AVERAGE)


def effective_layer_index(kappa: int, num_layers: int | None = None) -> int:
    """Effective layer number k = floor(kappa/2) + 1 of layer kappa."""
    if kappa < 1:
        raise ValueError("layer index starts at 1")
    if num_layers is not None and kappa > num_layers:
        raise ValueError(f"layer index {kappa} exceeds K={num_layers}")
    return kappa // 2 + 1


def layer_scale(k: int, sigma0: float, r: float) -> float:
    """Geometric scale schedule sigma_k = r^(k-1) sigma_0."""
    if k < 1:
        raise ValueError("effective layer index starts at 1")
    return r ** (k - 1) * sigma0


def channel_initial_scales(sigma_base: float, lam: float, count: int) -> list[float]:
    """Initial scales of the channels: sigma_{n,0} = lam^(n-1) sigma_base."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if lam <= 1:
        raise ValueError("lam must exceed 1")
    return [lam ** (n - 1) * sigma_base for n in range(1, count + 1)]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BlockConfig:
    """One residual block: two jet layers at a shared scale plus a skip."""

    effective_index: int
    width_in: int
    width_mid: int
    width_out: int
    depthwise: bool = False
    include_zero_order: bool = False

    @property
    def uses_projection(self) -> bool:
        return self.width_in != self.width_out


@dataclass(frozen=True)
class ScaleChannelConfig:
    """One scale channel.

    feature_widths has Z + 1 entries for Z = K/2 + 1 effective layers:
    input channels, the first layer's output, the output of each residual
    block in order, and the class count.
    """

    sigma0: float
    relative_ratio: float
    feature_widths: tuple[int, ...]
    num_layers: int = 18
    jet_order: int = 2
    spatial_selection: str = CENTRE
    include_zero_order: bool = False
    depthwise_blocks: tuple[int, ...] = ()
    epsilon: float = 0.005
    boundary: str = MIRROR

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.relative_ratio <= 1:
            raise ValueError("relative_ratio must exceed 1")
        if self.num_layers < 4 or self.num_layers % 2:
            raise ValueError("num_layers must be an even count >= 4")
        if self.spatial_selection not in _SELECTIONS:
            raise ValueError(f"spatial_selection must be one of {_SELECTIONS}")
        if len(self.feature_widths) != self.num_effective + 1:
            raise ValueError(
                f"feature_widths needs {self.num_effective + 1} entries "
                f"for K={self.num_layers}, got {len(self.feature_widths)}"
            )
        for k in self.depthwise_blocks:
            if not 2 <= k <= self.num_effective - 1:
                raise ValueError(f"depthwise block index {k} is not a block")

    @property
    def num_effective(self) -> int:
        """Z such that K = 2 (Z - 1)."""
        return effective_layer_index(self.num_layers)

    @property
    def num_classes(self) -> int:
        return self.feature_widths[-1]

    @property
    def input_channels(self) -> int:
        return self.feature_widths[0]

    def sigma_of(self, k: int) -> float:
        return layer_scale(k, self.sigma0, self.relative_ratio)

    @property
    def blocks(self) -> tuple[BlockConfig, ...]:
        out = []
        for k in range(2, self.num_effective):
            out.append(
                BlockConfig(
                    effective_index=k,
                    width_in=self.feature_widths[k - 1],
                    width_mid=self.feature_widths[k - 1],
                    width_out=self.feature_widths[k],
                    depthwise=k in self.depthwise_blocks,
                    include_zero_order=self.include_zero_order,
                )
            )
        return tuple(out)

    def jet_spec(self, k: int, first_layer: bool = False) -> JetSpec:
        # the first layer never carries a zero-order term, whatever the variant
        include_zero = self.include_zero_order and not first_layer
        return JetSpec(
            max_order=self.jet_order,
            include_zero_order=include_zero,
            sigma=self.sigma_of(k),
            epsilon=self.epsilon,
        )

    def with_sigma0(self, sigma0: float) -> "ScaleChannelConfig":
        return replace(self, sigma0=sigma0)

    def to_dict(self) -> dict:
        return {
            "sigma0": self.sigma0,
            "relative_ratio": self.relative_ratio,
            "feature_widths": list(self.feature_widths),
            "num_layers": self.num_layers,
            "jet_order": self.jet_order,
            "spatial_selection": self.spatial_selection,
            "include_zero_order": self.include_zero_order,
            "depthwise_blocks": list(self.depthwise_blocks),
            "epsilon": self.epsilon,
            "boundary": self.boundary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleChannelConfig":
        return cls(
            sigma0=float(d["sigma0"]),
            relative_ratio=float(d["relative_ratio"]),
            feature_widths=tuple(int(w) for w in d["feature_widths"]),
            num_layers=int(d["num_layers"]),
            jet_order=int(d["jet_order"]),
            spatial_selection=str(d["spatial_selection"]),
            include_zero_order=bool(d["include_zero_order"]),
            depthwise_blocks=tuple(int(k) for k in d.get("depthwise_blocks", ())),
            epsilon=float(d["epsilon"]),
            boundary=str(d.get("boundary", MIRROR)),
        )


@dataclass(frozen=True)
class MultiNetConfig:
    """Multi-scale-channel network: shared weights, one channel per sigma."""

    channel_sigmas: tuple[float, ...]
    channel: ScaleChannelConfig
    scale_pooling: str = POOL_MAX

    def __post_init__(self):
        if not self.channel_sigmas:
            raise ValueError("at least one scale channel is required")
        sig = self.channel_sigmas
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError("channel sigmas must be strictly increasing")
        if len(sig) > 2:
            ratios = [b / a for a, b in zip(sig, sig[1:])]
            if max(ratios) - min(ratios) > 1e-12:
                raise ValueError("adjacent channel sigma ratio must be constant")
        if self.scale_pooling not in _POOLINGS:
            raise ValueError(f"scale_pooling must be one of {_POOLINGS}")

    @property
    def lam(self) -> float:
        if len(self.channel_sigmas) < 2:
            return 1.0
        return self.channel_sigmas[1] / self.channel_sigmas[0]

    @property
    def num_classes(self) -> int:
        return self.channel.num_classes

    def channel_config(self, i: int) -> ScaleChannelConfig:
        return self.channel.with_sigma0(self.channel_sigmas[i])

    def to_dict(self) -> dict:
        return {
            "channel_sigmas": list(self.channel_sigmas),
            "scale_pooling": self.scale_pooling,
            "channel": self.channel.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiNetConfig":
        return cls(
            channel_sigmas=tuple(float(s) for s in d["channel_sigmas"]),
            channel=ScaleChannelConfig.from_dict(d["channel"]),
            scale_pooling=str(d["scale_pooling"]),
        )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class BatchNormState:
    """Per-channel affine plus running statistics.

    Normalisation uses the biased batch variance; running statistics store
    the same quantity so that momentum 1 reproduces train-mode outputs
    exactly in eval mode.  Train-mode updates mutate the state in place
    (single writer; see the concurrency notes in the README).
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "eval"

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        return cls(
            scale=np.ones(channels),
            shift=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.scale.copy(),
            self.shift.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.eps,
            self.momentum,
            self.mode,
        )


def batch_norm_forward(batch: np.ndarray, state: BatchNormState) -> np.ndarray:
    """Batch normalisation over a (batch, height, width, channel) array.

    Train mode normalises by the batch statistics over (batch, height,
    width) and updates the running statistics in place with the configured
    momentum; eval mode normalises by the stored running statistics.
    """
    if batch.ndim != 4:
        raise ValueError("expected a (B, H, W, C) batch")
    if batch.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if batch.shape[3] != state.channels:
        raise ValueError("channel count mismatch")
    if state.mode == "train":
        mean = batch.mean(axis=(0, 1, 2))
        var = batch.var(axis=(0, 1, 2))
        state.running_mean += state.momentum * (mean - state.running_mean)
        state.running_var += state.momentum * (var - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    return (batch - mean) * (inv * state.scale) + state.shift


@dataclass
class LayerParams:
    """One jet layer: its weights and the batch norm that follows, if any."""

    weights: JetLayerWeights | DepthSepWeights
    bn: BatchNormState | None = None

    @property
    def depthwise(self) -> bool:
        return isinstance(self.weights, DepthSepWeights)


@dataclass
class BlockParams:
    layer1: LayerParams
    layer2: LayerParams
    proj: np.ndarray | None = None  # (width_out, width_in) 1x1 mixing
    proj_bn: BatchNormState | None = None


@dataclass
class NetworkParams:
    """Learnable state of one channel, shared across all scale channels."""

    first: LayerParams
    final: JetLayerWeights
    blocks: list[BlockParams] = field(default_factory=list)

    def learnables(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) listing of every trainable array."""
        out: list[tuple[str, np.ndarray]] = []

        def layer_entries(prefix: str, layer: LayerParams):
            if layer.depthwise:
                out.append((f"{prefix}.dw", layer.weights.depth_coeffs))
                out.append((f"{prefix}.pw", layer.weights.point_weights))
            else:
                out.append((f"{prefix}.w", layer.weights.coeffs))
                if layer.weights.bias is not None:
                    out.append((f"{prefix}.b", layer.weights.bias))
            if layer.bn is not None:
                out.append((f"{prefix}.bn.g", layer.bn.scale))
                out.append((f"{prefix}.bn.b", layer.bn.shift))

        layer_entries("first", self.first)
        for i, bp in enumerate(self.blocks):
            k = 2 + i
            layer_entries(f"block{k}.l1", bp.layer1)
            layer_entries(f"block{k}.l2", bp.layer2)
            if bp.proj is not None:
                out.append((f"block{k}.proj.w", bp.proj))
                out.append((f"block{k}.proj.bn.g", bp.proj_bn.scale))
                out.append((f"block{k}.proj.bn.b", bp.proj_bn.shift))
        out.append(("final.w", self.final.coeffs))
        if self.final.bias is not None:
            out.append(("final.b", self.final.bias))
        return out

    def running_stats(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []

        def bn_entries(prefix: str, bn: BatchNormState | None):
            if bn is not None:
                out.append((f"{prefix}.mean", bn.running_mean))
                out.append((f"{prefix}.var", bn.running_var))

        bn_entries("first.bn", self.first.bn)
        for i, bp in enumerate(self.blocks):
            k = 2 + i
            bn_entries(f"block{k}.l1.bn", bp.layer1.bn)
            bn_entries(f"block{k}.l2.bn", bp.layer2.bn)
            bn_entries(f"block{k}.proj.bn", bp.proj_bn)
        return out

    def all_bn_states(self) -> list[BatchNormState]:
        out = [self.first.bn]
        for bp in self.blocks:
            out.extend([bp.layer1.bn, bp.layer2.bn])
            if bp.proj_bn is not None:
                out.append(bp.proj_bn)
        return [s for s in out if s is not None]

    def set_mode(self, mode: str):
        for s in self.all_bn_states():
            s.mode = mode

    def copy(self) -> "NetworkParams":
        def copy_layer(layer: LayerParams) -> LayerParams:
            if layer.depthwise:
                w = DepthSepWeights(
                    layer.weights.depth_coeffs.copy(), layer.weights.point_weights.copy()
                )
            else:
                w = JetLayerWeights(
                    layer.weights.coeffs.copy(),
                    None if layer.weights.bias is None else layer.weights.bias.copy(),
                )
            return LayerParams(w, None if layer.bn is None else layer.bn.copy())

        return NetworkParams(
            first=copy_layer(self.first),
            blocks=[
                BlockParams(
                    copy_layer(bp.layer1),
                    copy_layer(bp.layer2),
                    None if bp.proj is None else bp.proj.copy(),
                    None if bp.proj_bn is None else bp.proj_bn.copy(),
                )
                for bp in self.blocks
            ],
            final=JetLayerWeights(
                self.final.coeffs.copy(),
                None if self.final.bias is None else self.final.bias.copy(),
            ),
        )


def init_params(cfg: ScaleChannelConfig, rng: np.random.Generator) -> NetworkParams:
    """Uniform He initialisation.

    Fan-in of a jet layer counts its independent multipliers: number of
    basis indices times input channels (the basis takes the role a spatial
    kernel extent has in an ordinary convolution).  Batch norm starts at
    identity, biases at zero.
    """

    def he(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def jet_weights(c_out, c_in, spec: JetSpec, bias: bool) -> JetLayerWeights:
        coeffs = he((c_out, c_in, spec.num_basis), spec.num_basis * c_in)
        return JetLayerWeights(coeffs, np.zeros(c_out) if bias else None)

    def ds_weights(c_out, c_in, spec: JetSpec) -> DepthSepWeights:
        depth = he((c_in, spec.num_basis), spec.num_basis)
        point = he((c_out, c_in), c_in)
        return DepthSepWeights(depth, point)

    fw = cfg.feature_widths
    first_spec = cfg.jet_spec(1, first_layer=True)
    first = LayerParams(
        jet_weights(fw[1], fw[0], first_spec, bias=False),
        BatchNormState.identity(fw[1]),
    )
    blocks = []
    for blk in cfg.blocks:
        spec = cfg.jet_spec(blk.effective_index)
        if blk.depthwise:
            l1 = LayerParams(
                ds_weights(blk.width_mid, blk.width_in, spec),
                BatchNormState.identity(blk.width_mid),
            )
            l2 = LayerParams(
                ds_weights(blk.width_out, blk.width_mid, spec),
                BatchNormState.identity(blk.width_out),
            )
        else:
            l1 = LayerParams(
                jet_weights(blk.width_mid, blk.width_in, spec, bias=False),
                BatchNormState.identity(blk.width_mid),
            )
            l2 = LayerParams(
                jet_weights(blk.width_out, blk.width_mid, spec, bias=False),
                BatchNormState.identity(blk.width_out),
            )
        proj = proj_bn = None
        if blk.uses_projection:
            proj = he((blk.width_out, blk.width_in), blk.width_in)
            proj_bn = BatchNormState.identity(blk.width_out)
        blocks.append(BlockParams(l1, l2, proj, proj_bn))
    final_spec = cfg.jet_spec(cfg.num_effective)
    final = jet_weights(fw[-1], fw[-2], final_spec, bias=True)
    return NetworkParams(first=first, blocks=blocks, final=final)


# ---------------------------------------------------------------------------
# selection and pooling


def spatial_select(map_stack: Tensor, method: str) -> np.ndarray:
    """Reduce each class map to a single score.

    Centre reads the central pixel, averaging the central pair along any
    even-sized axis; spatial max takes the global maximum per class.
    """
    data = map_stack.data
    if data.shape[0] == 0 or data.shape[1] == 0:
        raise ValueError("empty map")
    if method == CENTRE:
        return _centre_read(np.moveaxis(data, 2, 0)[:, None])[:, 0]
    if method == SPATMAX:
        return data.max(axis=(0, 1))
    raise ValueError(f"unknown spatial selection {method!r}")


def _centre_slices(n: int) -> slice:
    return slice((n - 1) // 2, (n - 1) // 2 + (1 if n % 2 else 2))


def _centre_read(maps: np.ndarray) -> np.ndarray:
    """Central value of (C, B, H, W) maps; even axes average the middle two."""
    h, w = maps.shape[2], maps.shape[3]
    region = maps[:, :, _centre_slices(h), _centre_slices(w)]
    return region.mean(axis=(2, 3))


def pool_values(stack: np.ndarray, method: str) -> np.ndarray:
    """Pool over axis 0 of a channel stack.  Sums run over channel values in
    sorted order, which makes the output bit-identical under any channel
    permutation (max is exact either way)."""
    if method == POOL_MAX:
        return stack.max(axis=0)
    canon = np.sort(stack, axis=0)
    if method == POOL_LOGSUMEXP:
        m = canon[-1]
        return m + np.log1p(np.exp(canon[:-1] - m).sum(axis=0))
    if method == POOL_AVERAGE:
        return canon.sum(axis=0) / canon.shape[0]
    raise ValueError(f"unknown scale pooling {method!r}")


def scale_pool(channel_outputs: list[np.ndarray], method: str) -> np.ndarray:
    """Permutation-invariant pooling of per-channel class vectors."""
    if not channel_outputs:
        raise ValueError("no channel outputs to pool")
    return pool_values(np.stack(channel_outputs, axis=0), method)


# ---------------------------------------------------------------------------
# forward passes (Tensor-level reference; the batched engine lives in engine.py)


def residual_block_forward(
    image: Tensor, block: BlockConfig, params: BlockParams, sigma_k: float, *,
    jet_order: int = 2, epsilon: float = 0.005,
) -> Tensor:
    """out = ReLU(skip(x) + BN(J2(ReLU(BN(J1(x)))))), both layers at sigma_k."""
    from .jet import ds_jet_layer_forward, jet_layer_forward

    if image.channels != block.width_in:
        raise ValueError("input width does not match the block")
    spec = JetSpec(jet_order, block.include_zero_order, sigma_k, epsilon)

    def apply_layer(t: Tensor, layer: LayerParams) -> Tensor:
        if layer.depthwise:
            out = ds_jet_layer_forward(t, layer.weights, spec)
        else:
            out = jet_layer_forward(t, layer.weights, spec)
        if layer.bn is not None:
            out = t.with_data(
                batch_norm_forward(out.data[None], layer.bn)[0]
            )
        return out

    u = apply_layer(image, params.layer1)
    u = u.with_data(np.maximum(u.data, 0.0))
    v = apply_layer(u, params.layer2)
    if block.uses_projection:
        skip = np.einsum("hwc,oc->hwo", image.data, params.proj)
        skip = batch_norm_forward(skip[None], params.proj_bn)[0]
    else:
        skip = image.data
    return image.with_data(np.maximum(skip + v.data, 0.0))


def scale_channel_forward(
    image: Tensor, cfg: ScaleChannelConfig, params: NetworkParams
) -> Tensor:
    """Class maps of one scale channel; spatial size equals the input's."""
    from .engine import forward_channel

    if image.channels != cfg.input_channels:
        raise ValueError("image channels do not match the config")
    x = np.ascontiguousarray(image.data.transpose(2, 0, 1))[:, None]  # (C,1,H,W)
    maps = forward_channel(x, cfg, params, train=False).maps
    out = np.ascontiguousarray(maps[:, 0].transpose(1, 2, 0))
    if out.shape[:2] != image.data.shape[:2]:
        raise AssertionError("spatial size changed inside a scale channel")
    return image.with_data(out)


@dataclass
class PredictResult:
    scores: np.ndarray  # pooled class vector
    predicted: int
    channel_scores: np.ndarray  # (num_channels, num_classes) pre-pooling


def multi_channel_predict(
    image: Tensor, cfg: MultiNetConfig, params: NetworkParams
) -> PredictResult:
    """Run every scale channel with the shared parameters, select over
    space, pool over scales, and take the lowest-index argmax."""
    per_channel = []
    for i in range(len(cfg.channel_sigmas)):
        ccfg = cfg.channel_config(i)
        maps = scale_channel_forward(image, ccfg, params)
        per_channel.append(spatial_select(maps, ccfg.spatial_selection))
    pooled = scale_pool(per_channel, cfg.scale_pooling)
    return PredictResult(
        scores=pooled,
        predicted=int(np.argmax(pooled)),
        channel_scores=np.stack(per_channel, axis=0),
    )


@dataclass(frozen=True)
class BoundEvaluator:
    """Inference configuration bound to a fixed parameter set."""

    cfg: MultiNetConfig
    params: NetworkParams

    def predict(self, image: Tensor) -> PredictResult:
        return multi_channel_predict(image, self.cfg, self.params)


def densify_channels(
    params: NetworkParams, cfg_coarse: MultiNetConfig, cfg_dense: MultiNetConfig
) -> BoundEvaluator:
    """Re-bind shared weights to a refined channel set.

    The dense sigma set must contain every coarse sigma; weights transfer
    unchanged because they are scale-independent.
    """
    for s in cfg_coarse.channel_sigmas:
        if not any(math.isclose(s, d, rel_tol=1e-9) for d in cfg_dense.channel_sigmas):
            raise ValueError(f"dense channel set does not contain sigma={s}")
    return BoundEvaluator(cfg_dense, params)
