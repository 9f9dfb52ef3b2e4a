"""Dataset machinery: rescaled test-set construction and a synthetic toy task.

Rescaled test sets follow the train-at-one-size, test-at-many-sizes recipe:
the training split stays at size factor 1 while each test copy is resized by
a single factor (bicubic, anti-aliased for shrinking) and mirror-extended
onto a fixed canvas.

The toy dataset renders anti-aliased parametric shapes whose ground-truth
object size is a rendering parameter, so size-factor test sets re-render the
same scenes at the target size instead of resampling pixels.  That keeps
interpolation error out of the network-behaviour measurements.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .scalespace import Tensor

# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic (a = -0.5), support |x| < 2."""
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (1.5 * ax[near] - 2.5) * ax[near] * ax[near] + 1.0
    out[far] = ((-0.5 * ax[far] + 2.5) * ax[far] - 4.0) * ax[far] + 2.0
    return out


def _reflect_map(n: int, positions: np.ndarray) -> np.ndarray:
    if n == 1:
        return np.zeros_like(positions)
    period = 2 * (n - 1)
    q = np.abs(positions) % period
    return np.where(q >= n, period - q, q)


def _resample_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bicubic resampling matrix with
    half-pixel-centred coordinates; shrinking widens the kernel by 1/scale."""
    width = min(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    radius = 2.0 / width
    lo = np.floor(centers - radius).astype(int)
    taps = int(math.ceil(2 * radius)) + 2
    cols = lo[:, None] + np.arange(taps)[None, :]
    w = _cubic_kernel((cols - centers[:, None]) * width)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    src = _reflect_map(n_in, cols)
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), src.ravel()), w.ravel())
    return mat


def bicubic_resize(image: Tensor, scale: float) -> Tensor:
    """Bicubic rescaling by `scale`; output dims are round(input * scale).

    Shrinking applies anti-aliasing by widening the kernel support by
    1/scale.  Out-of-range source samples mirror at the edges.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    h, w = image.height, image.width
    nh, nw = round(h * scale), round(w * scale)
    if nh < 1 or nw < 1:
        raise ValueError("output size degenerates to zero")
    mr = _resample_matrix(h, nh, scale)
    mc = _resample_matrix(w, nw, scale)
    out = np.einsum("ih,hwc->iwc", mr, image.data)
    out = np.einsum("jw,iwc->ijc", mc, out)
    return image.with_data(out)


def mirror_extend(image: Tensor, target_h: int, target_w: int) -> Tensor:
    """Centre the image on a larger canvas and fill the borders by reflection
    without repeating the edge sample; odd margins put the extra row/column
    at the bottom/right."""
    h, w = image.height, image.width
    if target_h < h or target_w < w:
        raise ValueError("target must be at least the input size")
    top = (target_h - h) // 2
    left = (target_w - w) // 2
    rows = _reflect_map(h, np.arange(-top, target_h - top))
    cols = _reflect_map(w, np.arange(-left, target_w - left))
    return image.with_data(image.data[rows][:, cols])


# ---------------------------------------------------------------------------
# rescaled test sets


def default_size_factors() -> tuple[float, ...]:
    """Nine size factors 2^(k/4) for k = -4..4, spanning 1/2 .. 2."""
    return tuple(2.0 ** (k / 4) for k in range(-4, 5))


@dataclass(frozen=True)
class SizeFactorGrid:
    factors: tuple[float, ...] = field(default_factory=default_size_factors)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise ValueError("size factors must be strictly increasing")


@dataclass
class LabelledImages:
    """In-memory split: (N, H, W, C) float64 images with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    val_images: np.ndarray | None = None
    val_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")


def build_rescaled_testsets(
    images: np.ndarray,
    grid: SizeFactorGrid,
    canvas: tuple[int, int],
    boundary: str = "mirror",
) -> dict[float, np.ndarray]:
    """One test-set copy per size factor: bicubic resize then mirror-extend
    onto the canvas.  Raises when a factor would overflow the canvas."""
    out: dict[float, np.ndarray] = {}
    for s in grid.factors:
        resized = []
        for img in images:
            t = bicubic_resize(Tensor(img, boundary), s)
            if t.height > canvas[0] or t.width > canvas[1]:
                raise ValueError(f"canvas {canvas} too small for factor {s}")
            resized.append(mirror_extend(t, canvas[0], canvas[1]).data)
        out[s] = np.stack(resized, axis=0)
    return out


# ---------------------------------------------------------------------------
# toy dataset


SHAPE_VOCABULARY = ("disc", "annulus", "cross", "bar_pair", "square_ring", "blob_pair")


def render_shape(
    shape: str,
    center: tuple[float, float],
    size: float,
    canvas: tuple[int, int],
    aa: float = 0.7,
) -> np.ndarray:
    """Anti-aliased rendering of one parametric shape via a smooth signed
    distance profile.  `size` is the disc radius in pixels; the other shapes
    are sized relative to it."""
    yy, xx = np.mgrid[0 : canvas[0], 0 : canvas[1]].astype(np.float64)
    dy = yy - center[0]
    dx = xx - center[1]
    r = np.hypot(dy, dx)

    def bar(u, v, half_len, half_thick):
        return np.maximum(np.abs(u) - half_len, np.abs(v) - half_thick)

    if shape == "disc":
        d = r - size
    elif shape == "annulus":
        d = np.abs(r - size) - 0.35 * size
    elif shape == "cross":
        d = np.minimum(bar(dx, dy, 1.2 * size, 0.3 * size), bar(dy, dx, 1.2 * size, 0.3 * size))
    elif shape == "bar_pair":
        gap = 0.65 * size
        d = np.minimum(
            bar(dx, dy - gap, 1.1 * size, 0.28 * size),
            bar(dx, dy + gap, 1.1 * size, 0.28 * size),
        )
    elif shape == "square_ring":
        d = np.abs(np.maximum(np.abs(dx), np.abs(dy)) - size) - 0.3 * size
    elif shape == "blob_pair":
        off = 0.9 * size
        d = np.minimum(np.hypot(dy, dx - off), np.hypot(dy, dx + off)) - 0.55 * size
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return 0.5 * (1.0 - np.tanh(d / aa))


@dataclass(frozen=True)
class ToyLatents:
    classes: np.ndarray
    offsets: np.ndarray  # (N, 2) centre jitter at size factor 1
    contrasts: np.ndarray
    noise_seeds: np.ndarray


def _toy_latents(
    num_classes: int, samples_per_class: int, jitter: float, seed: int
) -> ToyLatents:
    rng = np.random.default_rng(seed)
    n = num_classes * samples_per_class
    classes = np.repeat(np.arange(num_classes), samples_per_class)
    offsets = rng.uniform(-jitter, jitter, size=(n, 2))
    contrasts = rng.uniform(0.75, 1.25, size=n)
    noise_seeds = rng.integers(0, 2**63 - 1, size=n)
    return ToyLatents(classes, offsets, contrasts, noise_seeds)


def _render_toy(
    latents: ToyLatents,
    base_size: float,
    canvas: tuple[int, int],
    size_factor: float,
    noise: float,
    factor_tag: int,
) -> LabelledImages:
    cy = (canvas[0] - 1) / 2.0
    cx = (canvas[1] - 1) / 2.0
    n = latents.classes.shape[0]
    images = np.empty((n, canvas[0], canvas[1], 1))
    for i in range(n):
        shape = SHAPE_VOCABULARY[latents.classes[i]]
        center = (
            cy + latents.offsets[i, 0] * size_factor,
            cx + latents.offsets[i, 1] * size_factor,
        )
        img = latents.contrasts[i] * render_shape(
            shape, center, base_size * size_factor, canvas
        )
        if noise > 0:
            nrng = np.random.default_rng(
                np.random.SeedSequence([int(latents.noise_seeds[i]), factor_tag])
            )
            img = img + noise * nrng.standard_normal(img.shape)
        images[i, :, :, 0] = img
    return LabelledImages(images, latents.classes.copy())


def gen_toy_dataset(
    num_classes: int,
    samples_per_class: int,
    base_size: float,
    canvas: tuple[int, int],
    seed: int,
    size_factor: float = 1.0,
    noise: float = 0.04,
    jitter: float = 1.5,
) -> LabelledImages:
    """Deterministic shape-classification data.  The object size is the
    rendering parameter base_size * size_factor, so rescaled copies of a
    split are produced by re-rendering with a different factor under the
    same latent draws."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if num_classes > len(SHAPE_VOCABULARY):
        raise ValueError(f"at most {len(SHAPE_VOCABULARY)} shape classes available")
    latents = _toy_latents(num_classes, samples_per_class, jitter, seed)
    factor_tag = int(round(math.log2(size_factor) * 4)) + 100
    return _render_toy(latents, base_size, canvas, size_factor, noise, factor_tag)


# ---------------------------------------------------------------------------
# tensor and graymap IO

_TENSOR_MAGIC = b"GDTN1"


class FormatError(ValueError):
    pass


def _atomic_write(path: str, payload: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_tensor(path: str, tensor: Tensor) -> None:
    """Binary tensor file: magic GDTN1, u32 little-endian (h, w, c), then
    float64 little-endian samples in row-major channel-innermost order."""
    dims = np.array([tensor.height, tensor.width, tensor.channels], dtype="<u4")
    payload = _TENSOR_MAGIC + dims.tobytes() + tensor.data.astype("<f8").tobytes()
    _atomic_write(path, payload)


def read_tensor(path: str) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_TENSOR_MAGIC)] != _TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic, not a tensor file")
    head = len(_TENSOR_MAGIC)
    dims = np.frombuffer(blob, dtype="<u4", count=3, offset=head)
    h, w, c = (int(v) for v in dims)
    expect = head + 12 + h * w * c * 8
    if len(blob) != expect:
        raise FormatError(f"{path}: truncated or oversized payload")
    data = np.frombuffer(blob, dtype="<f8", offset=head + 12).reshape(h, w, c)
    return Tensor(data.copy())


def write_graymap(path: str, values: np.ndarray, maxval: int = 65535) -> None:
    """P5 graymap with an affine value-mapping sidecar (path + '.meta').

    Samples are stored big-endian when maxval > 255, per the netpbm format.
    The sidecar records value = offset + raw * scale.
    """
    if values.ndim != 2:
        raise ValueError("graymap export expects a single 2-D map")
    vmin = float(values.min())
    vmax = float(values.max())
    scale = (vmax - vmin) / maxval if vmax > vmin else 1.0
    raw = np.round((values - vmin) / scale).astype(np.int64).clip(0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n{maxval}\n".encode()
    _atomic_write(path, header + raw.astype(dtype).tobytes())
    meta = {"offset": vmin, "scale": scale, "maxval": maxval}
    _atomic_write(path + ".meta", (json.dumps(meta, indent=1) + "\n").encode())


def read_graymap(path: str, apply_sidecar: bool = True) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary graymap")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    if raw.size != count:
        raise FormatError(f"{path}: truncated pixel data")
    values = raw.reshape(h, w).astype(np.float64)
    if apply_sidecar and os.path.exists(path + ".meta"):
        with open(path + ".meta") as fh:
            meta = json.load(fh)
        values = meta["offset"] + values * meta["scale"]
    return values


# ---------------------------------------------------------------------------
# dataset directories


def _split_checksum(entries: list[tuple[str, bytes]]) -> str:
    acc = hashlib.sha256()
    for name, blob in entries:
        acc.update(name.encode())
        acc.update(blob)
    return acc.hexdigest()


def write_split(root: str, split: str, data: LabelledImages) -> str:
    """Write one split directory of tensor files plus labels.csv; returns the
    split checksum."""
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    entries = []
    rows = []
    for i in range(data.images.shape[0]):
        fname = f"{i:05d}.gdtn"
        write_tensor(os.path.join(split_dir, fname), Tensor(data.images[i]))
        with open(os.path.join(split_dir, fname), "rb") as fh:
            entries.append((fname, fh.read()))
        rows.append((fname, int(data.labels[i])))
    with open(os.path.join(split_dir, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "class"])
        writer.writerows(rows)
    return _split_checksum(entries)


def read_split(root: str, split: str) -> LabelledImages:
    split_dir = os.path.join(root, split)
    with open(os.path.join(split_dir, "labels.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [(name, int(cls)) for name, cls in reader]
    images = np.stack(
        [read_tensor(os.path.join(split_dir, name)).data for name, _ in rows], axis=0
    )
    labels = np.array([cls for _, cls in rows], dtype=np.int64)
    return LabelledImages(images, labels)


def write_manifest(root: str, manifest: dict) -> None:
    payload = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    _atomic_write(os.path.join(root, "manifest.json"), payload)


def read_manifest(root: str) -> dict:
    with open(os.path.join(root, "manifest.json")) as fh:
        return json.load(fh)
