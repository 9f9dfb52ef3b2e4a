"""Training: smoothed cross-entropy, AdamW, warmup+cosine schedule,
scale-channel dropout, and the one- and two-stage training loops.

Everything is driven by a single seeded generator, so a fixed seed with
sequential execution reproduces parameter trajectories bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E
from .net import (
    POOL_AVERAGE,
    POOL_LOGSUMEXP,
    POOL_MAX,
    MultiNetConfig,
    NetworkParams,
    init_params,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr_init: float
    weight_decay: float = 0.025
    label_smoothing: float = 0.1
    channel_dropout_q: float = 0.0
    warmup_epochs: int = 0
    warmup_start_fraction: float = 0.1
    lr_floor: float = 1e-5
    seed: int = 0
    hflip: bool = True
    crop_pad: int = 0
    color_jitter: bool = False  # hook for RGB data; off for the toy harness

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.channel_dropout_q < 1.0:
            raise ValueError("channel_dropout_q must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch or batch size")


# ---------------------------------------------------------------------------
# loss


def loss_ce_smoothed(
    logits: np.ndarray, target: int, eps_ls: float, num_classes: int
) -> tuple[float, np.ndarray]:
    """Label-smoothed cross entropy of one class vector.

    Soft target is (1 - eps) one-hot + eps/K; the loss uses max-subtracted
    softmax and the gradient is softmax minus the soft target.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (num_classes,):
        raise ValueError("logit vector length must equal num_classes")
    soft = np.full(num_classes, eps_ls / num_classes)
    soft[target] += 1.0 - eps_ls
    shifted = logits - logits.max()
    logz = math.log(np.exp(shifted).sum())
    log_probs = shifted - logz
    loss = float(-(soft * log_probs).sum())
    grad = np.exp(log_probs) - soft
    return loss, grad


def loss_ce_smoothed_batch(
    logits: np.ndarray, targets: np.ndarray, eps_ls: float
) -> tuple[float, np.ndarray]:
    """Mean smoothed cross entropy over a (B, K) batch; grad is (B, K)."""
    b, k = logits.shape
    soft = np.full((b, k), eps_ls / k)
    soft[np.arange(b), targets] += 1.0 - eps_ls
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logz
    loss = float(-(soft * log_probs).sum() / b)
    grad = (np.exp(log_probs) - soft) / b
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: NetworkParams) -> "AdamWState":
        st = cls()
        for name, arr in params.learnables():
            st.m[name] = np.zeros_like(arr)
            st.v[name] = np.zeros_like(arr)
        return st


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One AdamW update, in place.  Weight decay is decoupled: applied as a
    plain shrink, separate from the adaptive moment update."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from warmup_start_fraction * lr_init over the first
    warmup_epochs worth of steps, then cosine decay from lr_init down to
    lr_floor at the final step."""
    warmup_steps = (
        round(total_steps * cfg.warmup_epochs / cfg.epochs) if cfg.epochs else 0
    )
    return lr_at(step, total_steps, warmup_steps, cfg)


def lr_at(step: int, total_steps: int, warmup_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step outside the schedule")
    if warmup_steps > 0 and step < warmup_steps:
        frac = cfg.warmup_start_fraction
        return cfg.lr_init * (frac + (1.0 - frac) * step / warmup_steps)
    span = max(1, total_steps - warmup_steps)
    u = (step - warmup_steps) / span
    return cfg.lr_floor + (cfg.lr_init - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * u))


# ---------------------------------------------------------------------------
# scale-channel dropout


def dropout_mask(
    num_channels: int, batch: int, q: float, rng: np.random.Generator
) -> np.ndarray:
    """(num_channels, batch) inverted-dropout multiplier.  Whole channels are
    zeroed per sample with probability q, survivors scaled by 1/(1-q); when
    every channel of a sample drops, one survives uniformly at random."""
    keep = rng.random((num_channels, batch)) >= q
    dead = ~keep.any(axis=0)
    if dead.any():
        lucky = rng.integers(0, num_channels, size=int(dead.sum()))
        keep[lucky, np.nonzero(dead)[0]] = True
    return keep / (1.0 - q)


def scale_channel_dropout(
    channel_outputs: np.ndarray,
    q: float,
    rng: np.random.Generator,
    training: bool = True,
) -> np.ndarray:
    """Apply scale-channel dropout to stacked (num_channels, classes, batch)
    class vectors.  Identity when q == 0 or outside training."""
    if not training or q == 0.0:
        return channel_outputs
    mask = dropout_mask(channel_outputs.shape[0], channel_outputs.shape[2], q, rng)
    return channel_outputs * mask[:, None, :]


# ---------------------------------------------------------------------------
# pooling with routing (training needs the backward route)


def pool_forward(stack: np.ndarray, method: str):
    """Pool a (num_channels, classes, batch) stack; returns scores plus the
    routing needed by the backward pass.  Values come from net.pool_values,
    so inference and training see bit-identical pooled scores."""
    from .net import pool_values

    pooled = pool_values(stack, method)
    if method == POOL_MAX:
        return pooled, stack.argmax(axis=0)
    if method == POOL_LOGSUMEXP:
        e = np.exp(stack - stack.max(axis=0))
        return pooled, e / e.sum(axis=0)
    if method == POOL_AVERAGE:
        return pooled, None
    raise ValueError(f"unknown scale pooling {method!r}")


def pool_backward(dpooled: np.ndarray, route, method: str, num_channels: int):
    if method == POOL_MAX:
        out = np.zeros((num_channels,) + dpooled.shape)
        np.put_along_axis(out, route[None], dpooled[None], axis=0)
        return out
    if method == POOL_LOGSUMEXP:
        return route * dpooled[None]
    if method == POOL_AVERAGE:
        return np.broadcast_to(dpooled / num_channels, (num_channels,) + dpooled.shape).copy()
    raise ValueError(f"unknown scale pooling {method!r}")


# ---------------------------------------------------------------------------
# training loops


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float  # nan when no validation split

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
        }


def _augment(
    xb: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> np.ndarray:
    if cfg.hflip:
        flips = rng.random(xb.shape[0]) < 0.5
        xb = xb.copy()
        xb[flips] = xb[flips, :, ::-1, :]
    if cfg.crop_pad > 0:
        p = cfg.crop_pad
        xb = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect")
        h = xb.shape[1] - 2 * p
        w = xb.shape[2] - 2 * p
        oy = rng.integers(0, 2 * p + 1)
        ox = rng.integers(0, 2 * p + 1)
        xb = xb[:, oy : oy + h, ox : ox + w, :]
    return np.ascontiguousarray(xb)


def forward_scores(
    xe: np.ndarray,
    net_cfg: MultiNetConfig,
    params: NetworkParams,
    train: bool,
) -> tuple[np.ndarray, list]:
    """Per-channel selected scores (num_channels, classes, batch)."""
    outs = []
    updates = []
    for i in range(len(net_cfg.channel_sigmas)):
        s, upd = E.channel_scores(xe, net_cfg.channel_config(i), params, train=train)
        outs.append(s)
        updates.extend(upd)
    return np.stack(outs, axis=0), updates


def predict_batch(
    batch: np.ndarray, net_cfg: MultiNetConfig, params: NetworkParams
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode pooled logits (B, classes) and per-channel stack."""
    xe = E.batch_to_engine(batch)
    stack, _ = forward_scores(xe, net_cfg, params, train=False)
    pooled, _ = pool_forward(stack, net_cfg.scale_pooling)
    return pooled.T, stack


def _train_step(
    xb: np.ndarray,
    yb: np.ndarray,
    net_cfg: MultiNetConfig,
    params: NetworkParams,
    opt: AdamWState,
    lr: float,
    tcfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, int]:
    xe = E.batch_to_engine(xb)
    n_ch = len(net_cfg.channel_sigmas)
    b = xb.shape[0]

    scores = []
    caches = []
    bn_updates = []
    for i in range(n_ch):
        ccfg = net_cfg.channel_config(i)
        res = E.forward_channel(xe, ccfg, params, train=True, need_tape=True)
        s, sel_cache = E.select_forward(res.maps, ccfg.spatial_selection)
        scores.append(s)
        caches.append((res.tape, sel_cache))
        bn_updates.extend(res.bn_updates)
    stack = np.stack(scores, axis=0)

    if tcfg.channel_dropout_q > 0.0:
        mask = dropout_mask(n_ch, b, tcfg.channel_dropout_q, rng)
        dropped = stack * mask[:, None, :]
    else:
        mask = None
        dropped = stack
    pooled, route = pool_forward(dropped, net_cfg.scale_pooling)
    loss, dlogits = loss_ce_smoothed_batch(pooled.T, yb, tcfg.label_smoothing)
    correct = int((pooled.argmax(axis=0) == yb).sum())

    dstack = pool_backward(dlogits.T, route, net_cfg.scale_pooling, n_ch)
    if mask is not None:
        dstack = dstack * mask[:, None, :]

    grads = E.zero_grads(params)
    for i in range(n_ch):
        tape, sel_cache = caches[i]
        if not dstack[i].any():
            continue
        ccfg = net_cfg.channel_config(i)
        dmaps = E.select_backward(dstack[i], sel_cache)
        E.backward_channel(dmaps, tape, ccfg, params, grads)

    adamw_step(dict(params.learnables()), grads, opt, lr, tcfg.weight_decay)
    for upd in bn_updates:
        upd.commit()
    return loss, correct


def evaluate_accuracy(
    images: np.ndarray,
    labels: np.ndarray,
    net_cfg: MultiNetConfig,
    params: NetworkParams,
    batch_size: int = 64,
) -> float:
    hits = 0
    for lo in range(0, images.shape[0], batch_size):
        xb = images[lo : lo + batch_size]
        logits, _ = predict_batch(xb, net_cfg, params)
        hits += int((logits.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
    return hits / images.shape[0]


def train_loop(
    dataset,
    net_cfg: MultiNetConfig,
    train_cfg: TrainConfig,
    initial_params: NetworkParams | None = None,
) -> tuple[NetworkParams, list[MetricsRow]]:
    """Seeded, single-worker training; returns the parameters and the
    per-epoch metrics log.

    `dataset` needs `images` (N, H, W, C) and `labels` (N,) attributes, plus
    optional `val_images`/`val_labels`.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    val_images = getattr(dataset, "val_images", None)
    val_labels = getattr(dataset, "val_labels", None)

    rng = np.random.default_rng(train_cfg.seed)
    params = (
        initial_params.copy()
        if initial_params is not None
        else init_params(net_cfg.channel, rng)
    )
    params.set_mode("train")
    opt = AdamWState.for_params(params)

    n = images.shape[0]
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = max(1, train_cfg.epochs * steps_per_epoch)
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch

    log: list[MetricsRow] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_hits = 0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            xb = _augment(images[idx], train_cfg, rng)
            lr = lr_at(step, total_steps, warmup_steps, train_cfg)
            loss, hits = _train_step(
                xb, labels[idx], net_cfg, params, opt, lr, train_cfg, rng
            )
            epoch_loss += loss * idx.size
            epoch_hits += hits
            step += 1
        val_acc = float("nan")
        if val_images is not None:
            val_acc = evaluate_accuracy(val_images, val_labels, net_cfg, params)
        log.append(
            MetricsRow(
                epoch=epoch,
                step=step,
                lr=lr_at(step, total_steps, warmup_steps, train_cfg),
                train_loss=epoch_loss / n,
                train_acc=epoch_hits / n,
                val_acc=val_acc,
            )
        )
    params.set_mode("eval")
    return params, log


def pretrain_then_transfer(
    dataset,
    net_cfg_single: MultiNetConfig,
    net_cfg_multi: MultiNetConfig,
    stage1: TrainConfig,
    stage2: TrainConfig,
) -> tuple[NetworkParams, list[MetricsRow]]:
    """Two-stage training: a single-scale-channel phase, then genuine
    multi-scale-channel training warm-started with the learned weights
    (no replication needed, the weights are scale-independent)."""
    if len(net_cfg_single.channel_sigmas) != 1:
        raise ValueError("stage-1 config must have exactly one scale channel")
    s0 = net_cfg_single.channel_sigmas[0]
    if not any(math.isclose(s0, s, rel_tol=1e-9) for s in net_cfg_multi.channel_sigmas):
        raise ValueError("stage-1 sigma must be one of the multi-channel sigmas")
    if net_cfg_single.channel.feature_widths != net_cfg_multi.channel.feature_widths:
        raise ValueError("stage configs must share the channel architecture")
    params, log1 = train_loop(dataset, net_cfg_single, stage1)
    params, log2 = train_loop(dataset, net_cfg_multi, stage2, initial_params=params)
    offset = log1[-1].epoch + 1 if log1 else 0
    merged = log1 + [replace(r, epoch=r.epoch + offset) for r in log2]
    return params, merged
