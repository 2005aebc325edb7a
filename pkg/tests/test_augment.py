import numpy as np
import pytest

from glcnet.augment import (
    AugmentationError,
    AugmentationPipeline,
    IndexLabel,
    TransformSpec,
    apply_view,
    build_index_label,
    view_one_pipeline,
    view_two_pipeline,
)

from oracles import nearest_resize_source


def _image(c, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((c, h, w)).astype(np.float32)


class TestBuildIndexLabel:
    def test_two_by_two_definition(self):
        label = build_index_label(2, 2)
        assert label.coords[:, 0, 0].tolist() == [0, 0]
        assert label.coords[:, 0, 1].tolist() == [0, 1]
        assert label.coords[:, 1, 0].tolist() == [1, 0]
        assert label.coords[:, 1, 1].tolist() == [1, 1]
        assert label.valid.all()

    def test_interior_point(self):
        label = build_index_label(256, 256)
        assert label.coords[:, 100, 37].tolist() == [100, 37]

    def test_single_row(self):
        label = build_index_label(1, 5)
        assert np.array_equal(label.coords[0], np.zeros((1, 5)))
        assert label.coords[1, 0].tolist() == [0, 1, 2, 3, 4]

    def test_degenerate_size_rejected(self):
        with pytest.raises(AugmentationError):
            build_index_label(0, 5)


class TestApplyView:
    def test_identity_pipeline_unchanged(self):
        img = _image(3, 16, 16)
        label = build_index_label(16, 16)
        out_img, out_label = apply_view(img, label, AugmentationPipeline([]), np.random.default_rng(0))
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_label.coords, label.coords)
        assert out_label.valid.all()

    def test_horizontal_flip_coordinates(self):
        img = _image(3, 8, 12)
        label = build_index_label(8, 12)
        pipe = AugmentationPipeline([TransformSpec("random_flip", dict(horizontal_p=1.0, vertical_p=0.0))])
        out_img, out_label = apply_view(img, label, pipe, np.random.default_rng(0))
        for c in range(12):
            assert out_label.coords[1, 0, c] == 12 - 1 - c
        assert np.array_equal(out_img, img[:, :, ::-1])

    def test_crop_resize_center_coordinate(self):
        # analytic check of the crop->resize coordinate map at the output center
        img = _image(3, 128, 128)
        label = build_index_label(128, 128)
        crop = TransformSpec(
            "random_resized_crop",
            dict(out_size=224, scale=(0.25, 0.25), ratio=(1.0, 1.0)),
        )
        # drive the sampled window to a known location by trying seeds until (10, 20)
        rng_found = None
        for seed in range(10_000):
            rng = np.random.default_rng(seed)
            area = 128 * 128 * rng.uniform(0.25, 0.25)
            _ = np.exp(rng.uniform(0.0, 0.0))
            side = int(round(np.sqrt(area)))
            top = int(rng.integers(0, 128 - side + 1))
            left = int(rng.integers(0, 128 - side + 1))
            if (top, left) == (10, 20):
                rng_found = seed
                break
        assert rng_found is not None
        out_img, out_label = apply_view(img, label, AugmentationPipeline([crop]), np.random.default_rng(rng_found))
        assert out_img.shape == (3, 224, 224)
        src = nearest_resize_source(112, 64, 224)
        assert out_label.coords[:, 112, 112].tolist() == [10 + src, 20 + src]
        assert abs(out_label.coords[0, 112, 112] - (10 + 32)) <= 1
        assert abs(out_label.coords[1, 112, 112] - (20 + 32)) <= 1

    def test_crop_resize_full_coordinate_map(self):
        # every output pixel must match the analytic nearest-neighbor map
        img = _image(3, 96, 96)
        label = build_index_label(96, 96)
        crop = TransformSpec("random_resized_crop", dict(out_size=64, scale=(0.4, 0.9), ratio=(0.8, 1.25)))
        rng = np.random.default_rng(123)
        out_img, out_label = apply_view(img, label, AugmentationPipeline([crop]), rng)

        # replay the sampling to recover the window
        rng2 = np.random.default_rng(123)
        area = 96 * 96 * rng2.uniform(0.4, 0.9)
        aspect = np.exp(rng2.uniform(np.log(0.8), np.log(1.25)))
        cw = int(round(np.sqrt(area * aspect)))
        ch = int(round(np.sqrt(area / aspect)))
        top = int(rng2.integers(0, 96 - ch + 1))
        left = int(rng2.integers(0, 96 - cw + 1))

        for r_out in [0, 13, 31, 63]:
            for c_out in [0, 17, 40, 63]:
                want_r = top + nearest_resize_source(r_out, ch, 64)
                want_c = left + nearest_resize_source(c_out, cw, 64)
                assert out_label.coords[:, r_out, c_out].tolist() == [want_r, want_c]

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(AugmentationError):
            apply_view(_image(3, 8, 8), build_index_label(9, 8), AugmentationPipeline([]), np.random.default_rng(0))

    def test_degenerate_crop_fails_after_retries(self):
        img = _image(3, 16, 16)
        label = build_index_label(16, 16)
        crop = TransformSpec(
            "random_resized_crop",
            dict(out_size=16, scale=(25.0, 25.0), ratio=(1.0, 1.0)),  # window larger than source
        )
        with pytest.raises(AugmentationError):
            apply_view(img, label, AugmentationPipeline([crop]), np.random.default_rng(0))


class TestPipelineProperties:
    def _exact_spatial_pipeline(self):
        # flips and right-angle rotations only: no resampling loss
        return AugmentationPipeline(
            [
                TransformSpec("random_flip", dict(horizontal_p=0.5, vertical_p=0.5)),
                TransformSpec("random_rot90", dict()),
                TransformSpec("random_flip", dict(horizontal_p=0.5, vertical_p=0.5)),
            ]
        )

    def test_roundtrip_through_index_label(self):
        # reading the original image at each output pixel's recorded coords
        # must reproduce the output exactly for lossless spatial ops
        for seed in range(20):
            img = _image(3, 24, 24, seed=seed)
            label = build_index_label(24, 24)
            out_img, out_label = apply_view(
                img, label, self._exact_spatial_pipeline(), np.random.default_rng(seed)
            )
            lookup = img[:, out_label.coords[0], out_label.coords[1]]
            assert np.array_equal(lookup, out_img)
            assert out_label.valid.all()

    def test_photometric_ops_leave_index_untouched(self):
        pipe = AugmentationPipeline(
            [
                TransformSpec("color_jitter", dict(brightness=0.8, contrast=0.8, saturation=0.8, hue=0.2, p=1.0)),
                TransformSpec("gaussian_blur", dict(sigma=(0.5, 1.5), p=1.0)),
                TransformSpec("gaussian_noise", dict(std=(0.01, 0.05), p=1.0)),
                TransformSpec("random_grayscale", dict(p=1.0)),
            ]
        )
        for seed in range(5):
            img = _image(3, 20, 20, seed=seed)
            label = build_index_label(20, 20)
            out_img, out_label = apply_view(img, label, pipe, np.random.default_rng(seed))
            assert np.array_equal(out_label.coords, label.coords)
            assert np.array_equal(out_label.valid, label.valid)
            assert out_img.shape == img.shape

    def test_coordinate_bounds_hold_through_view_two(self):
        pipe = view_two_pipeline(32)
        for seed in range(30):
            img = _image(3, 48, 48, seed=seed)
            label = build_index_label(48, 48)
            _, out_label = apply_view(img, label, pipe, np.random.default_rng(seed))
            coords = out_label.coords[:, out_label.valid]
            assert coords[0].min() >= 0 and coords[0].max() < 48
            assert coords[1].min() >= 0 and coords[1].max() < 48

    def test_determinism_per_seed(self):
        pipe = view_two_pipeline(32)
        img = _image(3, 64, 64, seed=1)
        label = build_index_label(64, 64)
        a_img, a_label = apply_view(img, label, pipe, np.random.default_rng(99))
        b_img, b_label = apply_view(img, label, pipe, np.random.default_rng(99))
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_label.coords, b_label.coords)

    def test_view_one_is_crop_only(self):
        pipe = view_one_pipeline(64)
        assert [op.name for op in pipe.ops] == ["random_resized_crop"]

    def test_view_two_contains_full_op_list(self):
        names = [op.name for op in view_two_pipeline(64).ops]
        assert names == [
            "random_resized_crop",
            "random_flip",
            "random_rot90",
            "color_jitter",
            "gaussian_blur",
            "gaussian_noise",
            "random_grayscale",
        ]

    def test_view_pair_shares_the_original_frame(self):
        from glcnet.augment import make_view_pair

        img = _image(3, 64, 64, seed=4)
        pair = make_view_pair(
            img,
            view_one_pipeline(32),
            view_two_pipeline(32),
            np.random.default_rng(1),
            np.random.default_rng(2),
            source_id=7,
        )
        assert pair.image_a.shape == pair.image_b.shape == (3, 32, 32)
        assert pair.source_id == 7
        for label in (pair.index_a, pair.index_b):
            coords = label.coords[:, label.valid]
            assert coords[0].max() < 64 and coords[1].max() < 64

    def test_four_band_grayscale_keeps_extra_band_mean_consistent(self):
        img = _image(4, 16, 16, seed=3)
        pipe = AugmentationPipeline([TransformSpec("random_grayscale", dict(p=1.0))])
        out_img, _ = apply_view(img, build_index_label(16, 16), pipe, np.random.default_rng(0))
        assert out_img.shape == (4, 16, 16)
        assert np.allclose(out_img[0], out_img[1]) and np.allclose(out_img[1], out_img[2])
