"""Correlation backend: adjoint exactness, reflection indexing, env-flag
selection, numba/numpy agreement."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalejet import backend as B


def test_reflect_indices_small():
    assert B.reflect_indices(3, 2).tolist() == [2, 1, 0, 1, 2, 1, 0]
    assert B.reflect_indices(1, 3).tolist() == [0] * 7
    assert B.reflect_indices(4, 0).tolist() == [0, 1, 2, 3]


def test_reflect_indices_multiwrap():
    # radius larger than the axis keeps bouncing between the ends:
    # walking left from [a b c]: b c b a b; walking right: b a b c b
    idx = B.reflect_indices(3, 5)
    assert idx.tolist() == [1, 0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1]


def test_pad_fold_are_adjoint():
    rng = np.random.default_rng(0)
    for boundary in ("mirror", "zero"):
        for n, radius in [(9, 3), (5, 4), (4, 7), (1, 2)]:
            x = rng.standard_normal((3, n))
            g = rng.standard_normal((3, n + 2 * radius))
            lhs = np.vdot(B.pad_axis(x, radius, 1, boundary), g)
            rhs = np.vdot(x, B.fold_axis(g, radius, 1, boundary))
            assert abs(lhs - rhs) < 1e-12, (boundary, n, radius)


@pytest.mark.parametrize("boundary", ["mirror", "zero"])
@pytest.mark.parametrize("axis", [0, 1, 2])
@pytest.mark.parametrize("taps_len", [3, 9, 31])
def test_correlate_adjoint_dot_product(boundary, axis, taps_len):
    rng = np.random.default_rng(taps_len + axis)
    x = rng.standard_normal((4, 11, 13))
    g = rng.standard_normal((4, 11, 13))
    taps = rng.standard_normal(taps_len)
    Ax = B.correlate_axis(x, taps, axis, boundary)
    Atg = B.correlate_axis_adjoint(g, taps, axis, boundary)
    lhs = float(np.vdot(Ax, g))
    rhs = float(np.vdot(x, Atg))
    assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-11)


def test_correlation_matches_manual_interior():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 20))
    taps = np.array([-0.5, 0.0, 0.5])
    out = B.correlate_axis(x, taps, 2, "mirror")
    want = 0.5 * (x[:, :, 2:] - x[:, :, :-2])
    assert np.allclose(out[:, :, 1:-1], want, atol=1e-14)


def test_single_tap_scales():
    x = np.ones((2, 3, 4))
    out = B.correlate_axis(x, np.array([2.5]), 1, "mirror")
    assert np.allclose(out, 2.5)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=12),
    radius=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_adjoint_property_hypothesis(n, radius, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, n))
    g = rng.standard_normal((2, n))
    taps = rng.standard_normal(2 * radius + 1)
    lhs = np.vdot(B.correlate_axis(x, taps, 1, "mirror"), g)
    rhs = np.vdot(x, B.correlate_axis_adjoint(g, taps, 1, "mirror"))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


_PARITY_SNIPPET = """
import numpy as np
from scalejet import backend as B
rng = np.random.default_rng(99)
x = rng.standard_normal((5, 14, 17))
g = rng.standard_normal((5, 14, 17))
taps = rng.standard_normal(9)
vals = []
for axis in (1, 2):
    for boundary in ("mirror", "zero"):
        vals.append(B.correlate_axis(x, taps, axis, boundary))
        vals.append(B.correlate_axis_adjoint(g, taps, axis, boundary))
print(B.active_backend())
np.save(OUT, np.concatenate([v.ravel() for v in vals]))
"""


def _run_parity(backend: str, out_path: str) -> str:
    env = dict(os.environ, SCALEJET_BACKEND=backend)
    code = _PARITY_SNIPPET.replace("OUT", repr(out_path))
    res = subprocess.run(
        [sys.executable, "-c", code], env=env, capture_output=True, text=True
    )
    assert res.returncode == 0, res.stderr
    return res.stdout.strip().splitlines()[-1]


def test_env_flag_selects_backend_and_backends_agree(tmp_path):
    a = str(tmp_path / "a.npy")
    b = str(tmp_path / "b.npy")
    assert _run_parity("numpy", a) == "numpy"
    chosen = _run_parity("auto", b)
    va, vb = np.load(a), np.load(b)
    assert np.abs(va - vb).max() < 1e-12
    if chosen == "numpy":
        pytest.skip("numba unavailable; parity collapsed to numpy twice")
