"""Resampling, mirror extension, toy rendering and file format tests."""

import numpy as np
import pytest

from scalejet.data import (
    FormatError,
    LabelledImages,
    SizeFactorGrid,
    bicubic_resize,
    build_rescaled_testsets,
    default_size_factors,
    gen_toy_dataset,
    mirror_extend,
    read_graymap,
    read_manifest,
    read_split,
    read_tensor,
    render_shape,
    write_graymap,
    write_manifest,
    write_split,
    write_tensor,
)
from scalejet.scalespace import Tensor


class TestBicubic:
    def test_scale_one_is_identity(self):
        rng = np.random.default_rng(0)
        img = Tensor(rng.standard_normal((13, 17, 2)))
        out = bicubic_resize(img, 1.0)
        assert np.abs(out.data - img.data).max() < 1e-12

    def test_constant_preserved(self):
        img = Tensor(np.full((16, 16, 1), 2.25))
        for scale in (0.5, 0.61, 1.37, 2.0):
            out = bicubic_resize(img, scale)
            assert np.abs(out.data - 2.25).max() < 1e-10, scale

    def test_output_dims_round(self):
        img = Tensor(np.zeros((10, 21, 1)))
        out = bicubic_resize(img, 0.75)
        assert (out.height, out.width) == (8, 16)

    def test_degenerate_scale_rejected(self):
        with pytest.raises(ValueError):
            bicubic_resize(Tensor(np.zeros((5, 5, 1))), 0.01)
        with pytest.raises(ValueError):
            bicubic_resize(Tensor(np.zeros((5, 5, 1))), -1.0)

    def test_cosine_downsample_oracle(self):
        # shrinking a band-limited cosine halves its period in pixel units and
        # keeps the amplitude nearly unchanged
        freq = 0.08  # cycles per input pixel, well below half Nyquist
        n = 128
        x = np.arange(n)
        img = np.cos(2 * np.pi * freq * x)[None, :].repeat(8, axis=0)
        out = bicubic_resize(Tensor(img), 0.5).data[2, :, 0]
        m = out.shape[0]
        xo = (np.arange(m) + 0.5) / 0.5 - 0.5  # output centres in input coords
        design = np.stack([np.cos(2 * np.pi * freq * xo), np.sin(2 * np.pi * freq * xo)], 1)
        interior = slice(4, m - 4)
        coef, *_ = np.linalg.lstsq(design[interior], out[interior], rcond=None)
        amplitude = float(np.hypot(*coef))
        assert amplitude == pytest.approx(1.0, abs=0.03)

    def test_round_trip_recovers_smooth_image(self):
        x = np.arange(32.0)
        smooth = np.exp(-((x[:, None] - 15.5) ** 2 + (x[None, :] - 15.5) ** 2) / 60.0)
        up = bicubic_resize(Tensor(smooth), 2.0)
        back = bicubic_resize(up, 0.5).data[:, :, 0]
        inner = slice(4, 28)
        num = np.linalg.norm(back[inner, inner] - smooth[inner, inner])
        assert num / np.linalg.norm(smooth[inner, inner]) < 0.02


class TestMirrorExtend:
    def test_identity_when_target_matches(self):
        img = Tensor(np.random.default_rng(1).standard_normal((6, 7, 1)))
        out = mirror_extend(img, 6, 7)
        assert np.array_equal(out.data, img.data)

    def test_row_reflection_pattern(self):
        img = Tensor(np.array([[1.0, 2.0, 3.0]]))
        out = mirror_extend(img, 1, 7).data[0, :, 0]
        assert out.tolist() == [3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]

    def test_extend_then_crop_is_identity(self):
        rng = np.random.default_rng(2)
        img = Tensor(rng.standard_normal((9, 11, 2)))
        out = mirror_extend(img, 15, 19)
        top = (15 - 9) // 2
        left = (19 - 11) // 2
        crop = out.data[top : top + 9, left : left + 11]
        assert np.array_equal(crop, img.data)

    def test_odd_margin_goes_bottom_right(self):
        img = Tensor(np.arange(4.0).reshape(2, 2))
        out = mirror_extend(img, 5, 5)
        # top margin 1, bottom margin 2
        assert np.array_equal(out.data[1:3, 1:3, 0], img.data[:, :, 0])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        img = Tensor(rng.standard_normal((5, 5, 1)))
        once = mirror_extend(img, 11, 11)
        twice = mirror_extend(once, 11, 11)
        assert np.array_equal(once.data, twice.data)

    def test_too_small_target_rejected(self):
        with pytest.raises(ValueError):
            mirror_extend(Tensor(np.zeros((5, 5, 1))), 4, 9)


class TestRescaledTestsets:
    def test_default_grid(self):
        factors = default_size_factors()
        assert len(factors) == 9
        assert factors[0] == pytest.approx(0.5)
        assert factors[4] == pytest.approx(1.0)
        assert factors[-1] == pytest.approx(2.0)
        ratios = [b / a for a, b in zip(factors, factors[1:])]
        assert np.allclose(ratios, 2**0.25)

    def test_grid_monotonicity_validated(self):
        with pytest.raises(ValueError):
            SizeFactorGrid((1.0, 1.0, 2.0))

    def test_build_shapes_and_exact_fit(self):
        rng = np.random.default_rng(4)
        images = rng.standard_normal((3, 16, 16, 1))
        grid = SizeFactorGrid((0.5, 1.0, 2.0))
        sets = build_rescaled_testsets(images, grid, (32, 32))
        for f, arr in sets.items():
            assert arr.shape == (3, 32, 32, 1), f
        # factor 2 on 16x16 exactly fills the canvas: no mirror margin
        direct = bicubic_resize(Tensor(images[0]), 2.0).data
        assert np.array_equal(sets[2.0][0], direct)

    def test_canvas_too_small(self):
        images = np.zeros((1, 16, 16, 1))
        with pytest.raises(ValueError):
            build_rescaled_testsets(images, SizeFactorGrid((2.0,)), (20, 20))


class TestToyDataset:
    def test_deterministic(self):
        a = gen_toy_dataset(4, 5, 6.0, (25, 25), seed=7)
        b = gen_toy_dataset(4, 5, 6.0, (25, 25), seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_content(self):
        a = gen_toy_dataset(4, 5, 6.0, (25, 25), seed=7)
        b = gen_toy_dataset(4, 5, 6.0, (25, 25), seed=8)
        assert not np.array_equal(a.images, b.images)

    def test_disc_area_oracle(self):
        img = render_shape("disc", (32.0, 32.0), 9.0, (65, 65))
        assert img.sum() == pytest.approx(np.pi * 81.0, rel=0.02)

    def test_rerender_matches_bicubic_upsample(self):
        # rendering at twice the size agrees with upsampling the rendering,
        # up to interpolation error
        img1 = render_shape("annulus", (16.0, 16.0), 5.0, (33, 33))
        up = bicubic_resize(Tensor(img1), 2.0).data[:, :, 0]
        img2 = render_shape("annulus", (32.5, 32.5), 10.0, (66, 66), aa=1.4)
        rel = np.linalg.norm(img2 - up) / np.linalg.norm(up)
        assert rel < 0.05

    def test_class_count_limits(self):
        with pytest.raises(ValueError):
            gen_toy_dataset(1, 5, 6.0, (25, 25), seed=0)
        with pytest.raises(ValueError):
            gen_toy_dataset(99, 5, 6.0, (25, 25), seed=0)

    def test_factor_rerenders_scale_geometry(self):
        base = gen_toy_dataset(2, 3, 5.0, (41, 41), seed=3, noise=0.0, jitter=0.0)
        big = gen_toy_dataset(2, 3, 5.0, (41, 41), seed=3, noise=0.0, jitter=0.0,
                              size_factor=2.0)
        assert big.images.sum() > 3.0 * base.images.sum()


class TestTensorIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        t = Tensor(rng.standard_normal((7, 9, 3)))
        path = str(tmp_path / "x.gdtn")
        write_tensor(path, t)
        back = read_tensor(path)
        assert np.array_equal(back.data, t.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gdtn"
        path.write_bytes(b"XXXX1" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_tensor(str(path))

    def test_truncated(self, tmp_path):
        path = str(tmp_path / "t.gdtn")
        write_tensor(path, Tensor(np.zeros((4, 4, 1))))
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-8])
        with pytest.raises(FormatError):
            read_tensor(path)


class TestGraymap:
    def test_quantized_roundtrip_exact(self, tmp_path):
        values = np.arange(256.0).reshape(16, 16)
        path = str(tmp_path / "g.pgm")
        write_graymap(path, values, maxval=255)
        back = read_graymap(path)
        assert np.array_equal(back, values)

    def test_16bit_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        values = rng.standard_normal((9, 11))
        path = str(tmp_path / "g16.pgm")
        write_graymap(path, values, maxval=65535)
        back = read_graymap(path)
        assert np.abs(back - values).max() < (values.max() - values.min()) / 65535 + 1e-12

    def test_16bit_samples_are_big_endian(self, tmp_path):
        path = str(tmp_path / "be.pgm")
        write_graymap(path, np.array([[0.0, 65535.0]]), maxval=65535)
        blob = open(path, "rb").read()
        assert blob.endswith(b"\x00\x00\xff\xff")

    def test_not_a_graymap(self, tmp_path):
        path = tmp_path / "no.pgm"
        path.write_bytes(b"P6 2 2 255 " + b"\x00" * 12)
        with pytest.raises(FormatError):
            read_graymap(str(path))


class TestDatasetDirectory:
    def test_split_roundtrip_and_manifest(self, tmp_path):
        root = str(tmp_path / "ds")
        data = gen_toy_dataset(3, 4, 5.0, (21, 21), seed=9)
        checksum = write_split(root, "train", data)
        write_manifest(root, {
            "format_version": 1,
            "splits": {"train": {"count": 12, "factor": 1.0, "checksum": checksum}},
        })
        back = read_split(root, "train")
        assert np.array_equal(back.images, data.images)
        assert np.array_equal(back.labels, data.labels)
        manifest = read_manifest(root)
        assert manifest["splits"]["train"]["checksum"] == checksum

    def test_checksum_is_stable(self, tmp_path):
        data = gen_toy_dataset(2, 3, 5.0, (15, 15), seed=1)
        c1 = write_split(str(tmp_path / "a"), "train", data)
        c2 = write_split(str(tmp_path / "b"), "train", data)
        assert c1 == c2
