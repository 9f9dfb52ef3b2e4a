"""Evaluation harness: per-size-factor accuracy, scale-selection histograms,
and the experiment report carrier.

The histogram estimator is an artifact definition (the underlying notion is
"relative contribution of each scale channel to the classification"):

  * max / logsumexp pooling: per sample, the softmax over channels of the
    winning class's per-channel scores;
  * average pooling: the winning class's per-channel scores normalised to
    sum one (they are non-negative after the final ReLU), uniform when all
    scores vanish.

Rows accumulate per size factor and are normalised to sum one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .net import POOL_AVERAGE, MultiNetConfig, NetworkParams
from .train import predict_batch


@dataclass
class ScaleSelectionHistogram:
    """Rows: size factors; columns: scale channels (ascending sigma).
    Each row sums to one."""

    factors: list[float]
    bins: np.ndarray

    def row(self, factor: float) -> np.ndarray:
        return self.bins[self.factors.index(factor)]

    def mean_channel_index(self) -> np.ndarray:
        """Expected selected channel index per size factor."""
        idx = np.arange(self.bins.shape[1])
        return self.bins @ idx


@dataclass
class ExperimentReport:
    accuracies: dict[float, float]
    histogram: ScaleSelectionHistogram
    config_echo: dict
    seed: int
    runtime_seconds: float
    schema_version: int = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "runtime_seconds": self.runtime_seconds,
            "config": self.config_echo,
            "size_factors": list(self.accuracies.keys()),
            "accuracy_per_factor": {str(k): v for k, v in self.accuracies.items()},
            "histogram": {
                "factors": self.histogram.factors,
                "bins": self.histogram.bins.tolist(),
            },
            "mean_channel_index": self.histogram.mean_channel_index().tolist(),
        }


def channel_contributions(stack: np.ndarray, pooling: str) -> np.ndarray:
    """Per-sample channel contributions, (B, num_channels), rows sum to 1.

    `stack` holds per-channel class scores shaped (num_channels, classes, B).
    """
    from .train import pool_forward

    pooled, _ = pool_forward(stack, pooling)
    winners = pooled.argmax(axis=0)  # (B,)
    b = stack.shape[2]
    per_channel = stack[:, winners, np.arange(b)]  # (num_channels, B)
    if pooling == POOL_AVERAGE:
        w = np.maximum(per_channel, 0.0)
        total = w.sum(axis=0)
        flat = total <= 0
        w[:, flat] = 1.0
        return (w / w.sum(axis=0)).T
    e = np.exp(per_channel - per_channel.max(axis=0))
    return (e / e.sum(axis=0)).T


def evaluate_factor(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: MultiNetConfig,
    params: NetworkParams,
    batch_size: int = 64,
) -> tuple[float, np.ndarray]:
    """Accuracy plus the accumulated channel-contribution row for one test set."""
    out = evaluate_factor_poolings(
        images, labels, cfg, params, (cfg.scale_pooling,), batch_size
    )
    return out[cfg.scale_pooling]


def evaluate_factor_poolings(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: MultiNetConfig,
    params: NetworkParams,
    poolings: tuple[str, ...],
    batch_size: int = 64,
) -> dict[str, tuple[float, np.ndarray]]:
    """Accuracy and contribution row per pooling mode, from one forward pass
    per batch (the per-channel score stacks are pooling-independent)."""
    from .net import pool_values

    hits = {p: 0 for p in poolings}
    contrib = {p: np.zeros(len(cfg.channel_sigmas)) for p in poolings}
    for lo in range(0, images.shape[0], batch_size):
        xb = images[lo : lo + batch_size]
        yb = labels[lo : lo + batch_size]
        _, stack = predict_batch(xb, cfg, params)
        for p in poolings:
            pooled = pool_values(stack, p)
            hits[p] += int((pooled.argmax(axis=0) == yb).sum())
            contrib[p] += channel_contributions(stack, p).sum(axis=0)
    n = images.shape[0]
    return {p: (hits[p] / n, contrib[p] / n) for p in poolings}


def run_report(
    testsets: dict[float, tuple[np.ndarray, np.ndarray]],
    cfg: MultiNetConfig,
    params: NetworkParams,
    seed: int = 0,
    batch_size: int = 64,
) -> ExperimentReport:
    """Evaluate one parameter set over per-factor test sets."""
    t0 = time.time()
    factors = sorted(testsets.keys())
    accs: dict[float, float] = {}
    rows = []
    for f in factors:
        images, labels = testsets[f]
        acc, row = evaluate_factor(images, labels, cfg, params, batch_size)
        accs[f] = acc
        rows.append(row)
    hist = ScaleSelectionHistogram(factors=list(factors), bins=np.stack(rows, axis=0))
    return ExperimentReport(
        accuracies=accs,
        histogram=hist,
        config_echo=cfg.to_dict(),
        seed=seed,
        runtime_seconds=time.time() - t0,
    )


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation with average ranks for ties."""

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        sv = v[order]
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and sv[j + 1] == sv[i]:
                j += 1
            r[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    rx = ranks(np.asarray(x, dtype=np.float64))
    ry = ranks(np.asarray(y, dtype=np.float64))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)
