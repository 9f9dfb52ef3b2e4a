"""Histogram estimator and report plumbing."""

import numpy as np
import pytest

from scalejet.data import gen_toy_dataset
from scalejet.evaluate import (
    ScaleSelectionHistogram,
    channel_contributions,
    run_report,
    spearman,
)
from scalejet.net import MultiNetConfig, ScaleChannelConfig, channel_initial_scales, init_params


def test_contribution_rows_sum_to_one():
    rng = np.random.default_rng(0)
    stack = rng.standard_normal((5, 4, 7))
    for pooling in ("max", "logsumexp", "average"):
        rows = channel_contributions(np.abs(stack), pooling)
        assert rows.shape == (7, 5)
        assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(rows >= 0)


def test_average_contribution_handles_all_zero_scores():
    stack = np.zeros((3, 2, 4))
    rows = channel_contributions(stack, "average")
    assert np.allclose(rows, 1.0 / 3.0)


def test_histogram_mean_channel_index():
    hist = ScaleSelectionHistogram(
        factors=[0.5, 1.0],
        bins=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
    )
    assert hist.mean_channel_index().tolist() == [0.0, 2.0]
    assert hist.row(0.5).tolist() == [1.0, 0.0, 0.0]


def test_run_report_schema_and_normalisation():
    rng = np.random.default_rng(1)
    channel = ScaleChannelConfig(
        sigma0=1.0, relative_ratio=1.4, num_layers=4,
        feature_widths=(1, 4, 4, 3), spatial_selection="centre",
    )
    cfg = MultiNetConfig(tuple(channel_initial_scales(0.7, 2**0.5, 3)), channel, "max")
    params = init_params(channel, rng)
    params.set_mode("eval")
    testsets = {}
    for f in (0.5, 1.0):
        d = gen_toy_dataset(3, 4, 4.0, (19, 19), seed=3, size_factor=f)
        testsets[f] = (d.images, d.labels)
    report = run_report(testsets, cfg, params, seed=9)
    doc = report.to_dict()
    assert doc["schema_version"] == 1
    assert doc["seed"] == 9
    assert set(doc["accuracy_per_factor"]) == {"0.5", "1.0"}
    bins = np.array(doc["histogram"]["bins"])
    assert bins.shape == (2, 3)
    assert np.allclose(bins.sum(axis=1), 1.0, atol=1e-9)


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman(np.arange(9.0), np.arange(9.0) ** 3) == pytest.approx(1.0)
        assert spearman(np.arange(9.0), -np.arange(9.0)) == pytest.approx(-1.0)

    def test_ties_use_average_ranks(self):
        rho = spearman(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.0, 1.0, 2.0, 2.0]))
        assert rho == pytest.approx(0.894, abs=1e-3)

    def test_constant_input(self):
        assert spearman(np.ones(5), np.arange(5.0)) == 0.0
