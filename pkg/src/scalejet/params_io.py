"""Checkpoint format: magic GDJRN1, a JSON header (config echo, derivative
index ordering, array manifest), then raw float64 little-endian arrays in
manifest order.  Loading rebuilds the parameter structure from the config
echo and validates every array shape against it."""

from __future__ import annotations

import json
import os

import numpy as np

from .data import FormatError, _atomic_write
from .jet import jet_index_set
from .net import MultiNetConfig, NetworkParams, init_params

_MAGIC = b"GDJRN1"
_FORMAT_VERSION = 1


def _manifest(params: NetworkParams) -> list[tuple[str, np.ndarray, str]]:
    rows = [(name, arr, "learnable") for name, arr in params.learnables()]
    rows += [(name, arr, "stat") for name, arr in params.running_stats()]
    return rows


def save_checkpoint(path: str, params: NetworkParams, cfg: MultiNetConfig) -> None:
    rows = _manifest(params)
    header = {
        "format_version": _FORMAT_VERSION,
        "config": cfg.to_dict(),
        "alpha_ordering": {
            "without_zero": [
                [a.a1, a.a2] for a in jet_index_set(cfg.channel.jet_order, False)
            ],
            "with_zero": [
                [a.a1, a.a2] for a in jet_index_set(cfg.channel.jet_order, True)
            ],
        },
        "arrays": [
            {"name": name, "shape": list(arr.shape), "kind": kind}
            for name, arr, kind in rows
        ],
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = _MAGIC + np.array([len(head)], dtype="<u4").tobytes() + head
    blob += b"".join(arr.astype("<f8").tobytes() for _, arr, _ in rows)
    _atomic_write(path, blob)


def load_checkpoint(path: str) -> tuple[NetworkParams, MultiNetConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    pos = len(_MAGIC)
    (head_len,) = np.frombuffer(blob, dtype="<u4", count=1, offset=pos)
    pos += 4
    header = json.loads(blob[pos : pos + int(head_len)].decode())
    pos += int(head_len)
    if header["format_version"] != _FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header['format_version']}")
    cfg = MultiNetConfig.from_dict(header["config"])

    # build the parameter skeleton for this config, then fill it in place
    params = init_params(cfg.channel, np.random.default_rng(0))
    targets = dict(
        (name, arr) for name, arr, _ in _manifest(params)
    )
    listed = {entry["name"] for entry in header["arrays"]}
    missing = set(targets) - listed
    extra = listed - set(targets)
    if missing or extra:
        raise FormatError(
            f"array manifest does not match the config (missing={sorted(missing)}, "
            f"extra={sorted(extra)})"
        )
    for entry in header["arrays"]:
        target = targets[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise FormatError(
                f"{entry['name']}: stored shape {shape} vs config shape {target.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(blob):
            raise FormatError(f"{path}: truncated array payload at {entry['name']}")
        target[...] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(
            shape
        )
        pos += 8 * count
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after the last array")
    return params, cfg
