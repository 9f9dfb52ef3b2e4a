"""Compare the numba and pure-numpy correlation backends.

Runs the same forward/backward workloads in two subprocesses (the backend is
chosen at import time via SCALEJET_BACKEND) and reports wall times plus the
maximum result difference.

Usage: python benchmarks/bench_backends.py
"""

from __future__ import annotations

import json
import os
import subprocess
import sys

_WORKER = r"""
import json, time
import numpy as np
from scalejet import backend as B
from scalejet.net import ScaleChannelConfig, init_params
from scalejet import engine as E

rng = np.random.default_rng(0)
results = {"backend": B.active_backend()}

x = rng.standard_normal((256, 39, 39))
taps = rng.standard_normal(25)
for axis in (1, 2):
    B.correlate_axis(x, taps, axis, "mirror")
    t0 = time.perf_counter()
    for _ in range(40):
        out = B.correlate_axis(x, taps, axis, "mirror")
    results[f"correlate_axis{axis}_ms"] = (time.perf_counter() - t0) / 40 * 1e3
    results[f"correlate_axis{axis}_sum"] = float(out.sum())

cfg = ScaleChannelConfig(sigma0=1.0, relative_ratio=1.4, num_layers=6,
                         feature_widths=(1, 8, 8, 8, 4), spatial_selection="centre")
params = init_params(cfg, np.random.default_rng(1))
xb = np.random.default_rng(2).standard_normal((1, 32, 39, 39))
E.forward_channel(xb, cfg, params, train=True)
t0 = time.perf_counter()
for _ in range(5):
    res = E.forward_channel(xb, cfg, params, train=True, need_tape=True)
results["forward_ms"] = (time.perf_counter() - t0) / 5 * 1e3
results["forward_sum"] = float(res.maps.sum())

grads = E.zero_grads(params)
dmaps = np.random.default_rng(3).standard_normal(res.maps.shape)
t0 = time.perf_counter()
E.backward_channel(dmaps, res.tape, cfg, params, grads)
results["backward_ms"] = (time.perf_counter() - t0) * 1e3
results["grad_sum"] = float(sum(g.sum() for g in grads.values()))

print(json.dumps(results))
"""


def run_worker(backend: str) -> dict:
    env = dict(os.environ, SCALEJET_BACKEND=backend)
    proc = subprocess.run(
        [sys.executable, "-c", _WORKER], capture_output=True, text=True, env=env
    )
    if proc.returncode != 0:
        raise RuntimeError(f"{backend} worker failed:\n{proc.stderr}")
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main() -> int:
    rows = {}
    for backend in ("numba", "numpy"):
        try:
            rows[backend] = run_worker(backend)
        except RuntimeError as exc:
            print(exc)
    if "numba" not in rows:
        print("numba backend unavailable; nothing to compare")
        return 0
    nb, np_ = rows["numba"], rows["numpy"]
    print(f"{'workload':<22}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for key in ("correlate_axis1_ms", "correlate_axis2_ms", "forward_ms", "backward_ms"):
        print(
            f"{key:<22}{nb[key]:>10.2f}ms{np_[key]:>10.2f}ms"
            f"{np_[key] / nb[key]:>9.2f}x"
        )
    drift = max(
        abs(nb[k] - np_[k])
        for k in ("correlate_axis1_sum", "correlate_axis2_sum", "forward_sum", "grad_sum")
    )
    print(f"max |checksum difference| between backends: {drift:.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
