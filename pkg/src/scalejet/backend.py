"""Hot inner loops: 1-D correlation along image axes, plus exact adjoints.

Engine activations are (P, H, W) stacks where P collects every leading index
(channel, batch sample, ...), so the two spatial axes get dedicated kernels:
along the last axis rows are contiguous, along the middle axis the innermost
loop runs over the contiguous trailing axis and vectorises.  Other layouts
fall back to a generic moveaxis route.

Adjointness is exact by construction, boundary handling included:
<correlate(x), g> == <x, correlate_adjoint(g)> up to rounding, which the
gradient checks rely on.

Backend selection: numba when importable, unless the environment variable
SCALEJET_BACKEND is set to "numpy" (or "numba" to force it and fail loudly
when unavailable).  `python benchmarks/bench_backends.py` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "SCALEJET_BACKEND"


def _requested_backend() -> str:
    value = os.environ.get(_ENV_VAR, "").strip().lower()
    if value in ("", "auto"):
        return "auto"
    if value in ("numpy", "numba"):
        return value
    raise ValueError(f"{_ENV_VAR} must be 'numpy', 'numba' or 'auto', got {value!r}")


_HAVE_NUMBA = False
if _requested_backend() != "numpy":
    try:
        import numba

        _HAVE_NUMBA = True
    except ImportError:
        if _requested_backend() == "numba":
            raise

_BLAS_LIMIT = None
if _HAVE_NUMBA:
    # the correlation kernels own the cores; a competing BLAS pool only adds
    # wakeup latency around every matmul (6x slowdown observed on 2 cores)
    try:
        import threadpoolctl

        _BLAS_LIMIT = threadpoolctl.threadpool_limits(limits=1, user_api="blas")
    except ImportError:
        pass


def active_backend() -> str:
    """Name of the backend the correlation kernels run on."""
    return "numba" if _HAVE_NUMBA else "numpy"


def reflect_indices(n: int, radius: int) -> np.ndarray:
    """Source index for each position of an array of length n padded by
    `radius` on both sides under edge-exclusive mirroring (..c b | a b c | b a..).

    Handles radii larger than n by repeated folding.
    """
    if n < 1:
        raise ValueError("axis length must be positive")
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad_axis(x: np.ndarray, radius: int, axis: int, boundary: str) -> np.ndarray:
    """Pad one axis by `radius` with mirrored samples or zeros."""
    if radius == 0:
        return x
    if boundary == "mirror":
        idx = reflect_indices(x.shape[axis], radius)
        return np.take(x, idx, axis=axis)
    if boundary == "zero":
        widths = [(0, 0)] * x.ndim
        widths[axis % x.ndim] = (radius, radius)
        return np.pad(x, widths)
    raise ValueError(f"unknown boundary {boundary!r}")


def fold_axis(gp: np.ndarray, radius: int, axis: int, boundary: str) -> np.ndarray:
    """Adjoint of pad_axis: scatter gradient on the padded axis back to sources."""
    if radius == 0:
        return gp
    axis = axis % gp.ndim
    n = gp.shape[axis] - 2 * radius
    sl = [slice(None)] * gp.ndim
    sl[axis] = slice(radius, radius + n)
    if boundary == "zero":
        return np.ascontiguousarray(gp[tuple(sl)])
    if boundary != "mirror":
        raise ValueError(f"unknown boundary {boundary!r}")
    out = gp[tuple(sl)].copy()
    if radius <= n - 1:
        # margin positions reflect once: left pad hits sources 1..R,
        # right pad hits sources n-2..n-1-R
        left = [slice(None)] * gp.ndim
        left[axis] = slice(radius - 1, None, -1)
        dst = [slice(None)] * gp.ndim
        dst[axis] = slice(1, radius + 1)
        out[tuple(dst)] += gp[tuple(left)]
        right = [slice(None)] * gp.ndim
        right[axis] = slice(n + 2 * radius - 1, n + radius - 1, -1)
        dst[axis] = slice(n - 1 - radius, n - 1)
        out[tuple(dst)] += gp[tuple(right)]
        return out
    # radius spans the whole axis: fall back to the general scatter
    out = np.zeros(gp.shape[:axis] + (n,) + gp.shape[axis + 1 :], dtype=gp.dtype)
    idx = reflect_indices(n, radius)
    gpm = np.moveaxis(gp, axis, 0)
    outm = np.moveaxis(out, axis, 0)
    np.add.at(outm, idx, gpm)
    return out


# ---------------------------------------------------------------------------
# numpy reference path (valid correlation on pre-padded buffers)


def _valid_w_np(xp: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = xp.shape[-1] - (taps.shape[0] - 1)
    out = taps[0] * xp[..., 0:n]
    for t in range(1, taps.shape[0]):
        out += taps[t] * xp[..., t : t + n]
    return out


def _valid_h_np(xp: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = xp.shape[1] - (taps.shape[0] - 1)
    out = taps[0] * xp[:, 0:n, :]
    for t in range(1, taps.shape[0]):
        out += taps[t] * xp[:, t : t + n, :]
    return out


# ---------------------------------------------------------------------------
# numba path

if _HAVE_NUMBA:
    from numba import njit, prange

    @njit(parallel=True, fastmath=True, cache=True)
    def _valid_w_nb(xp, taps, out):  # pragma: no cover - exercised via wrapper
        rows, n = out.shape
        k = taps.shape[0]
        for r in prange(rows):
            for i in range(n):
                acc = 0.0
                for t in range(k):
                    acc += taps[t] * xp[r, i + t]
                out[r, i] = acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _valid_h_nb(xp, taps, out):  # pragma: no cover
        p_, h, w = out.shape
        k = taps.shape[0]
        for p in prange(p_):
            for i in range(h):
                for c in range(w):
                    out[p, i, c] = taps[0] * xp[p, i, c]
                for t in range(1, k):
                    tv = taps[t]
                    for c in range(w):
                        out[p, i, c] += tv * xp[p, i + t, c]

    @njit(parallel=True, fastmath=True, cache=True)
    def _full_w_nb(g, taps, out):  # pragma: no cover
        rows, n = g.shape
        k = taps.shape[0]
        r2 = k - 1
        for r in prange(rows):
            for i in range(n + r2):
                t0 = r2 - i if i < r2 else 0
                t1 = n + r2 - i if i + 1 > n else k
                acc = 0.0
                for t in range(t0, t1):
                    acc += taps[k - 1 - t] * g[r, i + t - r2]
                out[r, i] = acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _full_h_nb(g, taps, out):  # pragma: no cover
        p_, h, w = g.shape
        k = taps.shape[0]
        r2 = k - 1
        for p in prange(p_):
            for i in range(h + r2):
                t0 = r2 - i if i < r2 else 0
                t1 = h + r2 - i if i + 1 > h else k
                for c in range(w):
                    out[p, i, c] = 0.0
                for t in range(t0, t1):
                    tv = taps[k - 1 - t]
                    for c in range(w):
                        out[p, i, c] += tv * g[p, i + t - r2, c]


def _valid_w(xp: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if _HAVE_NUMBA:
        rows = int(np.prod(xp.shape[:-1]))
        x2 = xp.reshape(rows, xp.shape[-1])
        out = np.empty((rows, xp.shape[-1] - (taps.shape[0] - 1)))
        _valid_w_nb(x2, taps, out)
        return out.reshape(xp.shape[:-1] + (out.shape[-1],))
    return _valid_w_np(xp, taps)


def _valid_h(xp: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if _HAVE_NUMBA:
        out = np.empty((xp.shape[0], xp.shape[1] - (taps.shape[0] - 1), xp.shape[2]))
        _valid_h_nb(xp, taps, out)
        return out
    return _valid_h_np(xp, taps)


def _full_w(g: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if _HAVE_NUMBA:
        rows = int(np.prod(g.shape[:-1]))
        g2 = g.reshape(rows, g.shape[-1])
        out = np.empty((rows, g.shape[-1] + taps.shape[0] - 1))
        _full_w_nb(g2, taps, out)
        return out.reshape(g.shape[:-1] + (out.shape[-1],))
    gz = pad_axis(g, taps.shape[0] - 1, -1, "zero")
    return _valid_w_np(gz, taps[::-1].copy())


def _full_h(g: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if _HAVE_NUMBA:
        out = np.empty((g.shape[0], g.shape[1] + taps.shape[0] - 1, g.shape[2]))
        _full_h_nb(g, taps, out)
        return out
    gz = pad_axis(g, taps.shape[0] - 1, 1, "zero")
    return _valid_h_np(gz, taps[::-1].copy())


# ---------------------------------------------------------------------------
# public axis correlation + adjoint


def correlate_axis(x: np.ndarray, taps: np.ndarray, axis: int, boundary: str) -> np.ndarray:
    """Correlate `x` with a symmetric-support tap vector along `axis`.

    Taps are indexed -R..R; output keeps the input shape, with out-of-range
    samples supplied by the boundary policy.
    """
    taps = np.asarray(taps, dtype=np.float64)
    radius = (taps.shape[0] - 1) // 2
    if radius == 0:
        return taps[0] * x
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        xp = pad_axis(np.ascontiguousarray(x), radius, -1, boundary)
        return _valid_w(xp, taps)
    if x.ndim == 3 and axis == 1:
        xp = pad_axis(np.ascontiguousarray(x), radius, 1, boundary)
        return _valid_h(xp, taps)
    xm = np.moveaxis(x, axis, -1)
    xp = pad_axis(np.ascontiguousarray(xm), radius, -1, boundary)
    out = _valid_w(xp, taps)
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def correlate_axis_adjoint(g: np.ndarray, taps: np.ndarray, axis: int, boundary: str) -> np.ndarray:
    """Exact adjoint of correlate_axis with identical taps/axis/boundary."""
    taps = np.asarray(taps, dtype=np.float64)
    radius = (taps.shape[0] - 1) // 2
    if radius == 0:
        return taps[0] * g
    axis = axis % g.ndim
    if axis == g.ndim - 1:
        gp = _full_w(np.ascontiguousarray(g), taps)
        return fold_axis(gp, radius, -1, boundary)
    if g.ndim == 3 and axis == 1:
        gp = _full_h(np.ascontiguousarray(g), taps)
        return fold_axis(gp, radius, 1, boundary)
    gm = np.moveaxis(g, axis, -1)
    gp = _full_w(np.ascontiguousarray(gm), taps)
    out = fold_axis(gp, radius, -1, boundary)
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))
