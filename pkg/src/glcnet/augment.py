"""Paired view augmentation with per-pixel provenance tracking.

Every sample carries an index label: a 2-channel integer map holding, for
each pixel, the (row, col) it came from in the untransformed image. Spatial
transforms are applied to image and index label in lockstep (bilinear for
pixels, nearest for coordinates so they stay valid integers); photometric
transforms touch the image only. This is what lets two independently
augmented views of one sample be matched region-by-region later.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np


class AugmentationError(ValueError):
    """Raised for misaligned inputs or unsatisfiable transform parameters."""


@dataclass
class IndexLabel:
    """Original-image coordinates per pixel.

    ``coords`` has shape (2, H, W): channel 0 is the source row, channel 1
    the source column. ``valid`` marks pixels whose provenance is defined.
    """

    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.int32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.coords.ndim != 3 or self.coords.shape[0] != 2:
            raise AugmentationError(f"coords must be (2, H, W), got {self.coords.shape}")
        if self.valid.shape != self.coords.shape[1:]:
            raise AugmentationError("valid mask does not match coords spatial dims")

    def copy(self) -> "IndexLabel":
        return IndexLabel(self.coords.copy(), self.valid.copy())


def build_index_label(height: int, width: int) -> IndexLabel:
    """Identity index label: coords[:, r, c] == (r, c) everywhere."""
    if height < 1 or width < 1:
        raise AugmentationError(f"degenerate size {height}x{width}")
    rows, cols = np.mgrid[0:height, 0:width]
    return IndexLabel(
        coords=np.stack([rows, cols]).astype(np.int32),
        valid=np.ones((height, width), dtype=bool),
    )


SPATIAL_OPS = ("random_resized_crop", "random_flip", "random_rot90")
PHOTOMETRIC_OPS = ("color_jitter", "gaussian_blur", "gaussian_noise", "random_grayscale")


@dataclass
class TransformSpec:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in SPATIAL_OPS + PHOTOMETRIC_OPS:
            raise AugmentationError(f"unknown transform {self.name!r}")

    @property
    def kind(self) -> str:
        return "spatial" if self.name in SPATIAL_OPS else "photometric"


@dataclass
class AugmentationPipeline:
    ops: list[TransformSpec]


def view_one_pipeline(
    out_size: int, crop_scale: tuple[float, float] = (0.2, 1.0), crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
) -> AugmentationPipeline:
    """First view: random crop followed by resize to a fixed resolution."""
    return AugmentationPipeline(
        [TransformSpec("random_resized_crop", dict(out_size=out_size, scale=crop_scale, ratio=crop_ratio))]
    )


def view_two_pipeline(
    out_size: int,
    crop_scale: tuple[float, float] = (0.2, 1.0),
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0),
    jitter_strength: float = 0.8,
    hue_strength: float = 0.2,
    blur_sigma: tuple[float, float] = (0.1, 2.0),
    noise_std: tuple[float, float] = (0.0, 0.05),
) -> AugmentationPipeline:
    """Second view: crop/resize plus flips, rotations, and photometric ops."""
    return AugmentationPipeline(
        [
            TransformSpec("random_resized_crop", dict(out_size=out_size, scale=crop_scale, ratio=crop_ratio)),
            TransformSpec("random_flip", dict(horizontal_p=0.5, vertical_p=0.5)),
            TransformSpec("random_rot90", dict(p=1.0)),
            TransformSpec(
                "color_jitter",
                dict(
                    brightness=jitter_strength,
                    contrast=jitter_strength,
                    saturation=jitter_strength,
                    hue=hue_strength,
                    p=0.8,
                ),
            ),
            TransformSpec("gaussian_blur", dict(sigma=blur_sigma, p=0.5)),
            TransformSpec("gaussian_noise", dict(std=noise_std, p=0.5)),
            TransformSpec("random_grayscale", dict(p=0.2)),
        ]
    )


@dataclass
class ViewPair:
    """Two augmented views of one sample with their index labels.

    Both index labels reference the same original frame, so any pixel of
    either view can be traced back to (and matched through) the source.
    """

    image_a: np.ndarray
    index_a: IndexLabel
    image_b: np.ndarray
    index_b: IndexLabel
    source_id: int = 0


def make_view_pair(
    image: np.ndarray,
    t1: AugmentationPipeline,
    t2: AugmentationPipeline,
    rng_a: np.random.Generator,
    rng_b: np.random.Generator,
    source_id: int = 0,
) -> ViewPair:
    """Draw both augmented views of one sample from a fresh index label."""
    index = build_index_label(image.shape[1], image.shape[2])
    image_a, index_a = apply_view(image, index, t1, rng_a)
    image_b, index_b = apply_view(image, index, t2, rng_b)
    if image_a.shape != image_b.shape:
        raise AugmentationError(
            f"views disagree on resolution: {image_a.shape[1:]} vs {image_b.shape[1:]}"
        )
    return ViewPair(image_a, index_a, image_b, index_b, source_id)


def apply_view(
    image: np.ndarray, index: IndexLabel, pipeline: AugmentationPipeline, rng: np.random.Generator
) -> tuple[np.ndarray, IndexLabel]:
    """Run a pipeline over an image and its index label.

    ``image`` is float32 (C, H, W) in [0, 1]. Returns new arrays; inputs are
    never modified.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise AugmentationError(f"image must be (C, H, W), got {img.shape}")
    if img.shape[1:] != index.coords.shape[1:]:
        raise AugmentationError(
            f"image dims {img.shape[1:]} do not match index label {index.coords.shape[1:]}"
        )
    img = img.copy()
    coords = index.coords.copy()
    valid = index.valid.copy()

    for op in pipeline.ops:
        fn = _OPS[op.name]
        if op.kind == "spatial":
            img, coords, valid = fn(img, coords, valid, rng, **op.params)
        else:
            img = fn(img, rng, **op.params)
    return img, IndexLabel(coords, valid)


# ---------------------------------------------------------------------------
# spatial transforms
# ---------------------------------------------------------------------------


def _nearest_axis(src_len: int, dst_len: int) -> np.ndarray:
    # matches the pixel-center nearest-neighbor convention of cv2
    return np.minimum((np.arange(dst_len) + 0.5) * src_len / dst_len, src_len - 1).astype(np.int64)


def _resize_nearest_int(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = _nearest_axis(arr.shape[-2], out_h)
    cols = _nearest_axis(arr.shape[-1], out_w)
    if arr.ndim == 3:
        return arr[:, rows[:, None], cols[None, :]]
    return arr[rows[:, None], cols[None, :]]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    hwc = np.ascontiguousarray(img.transpose(1, 2, 0))
    resized = cv2.resize(hwc, (out_w, out_h), interpolation=cv2.INTER_LINEAR)
    if resized.ndim == 2:
        resized = resized[:, :, None]
    return np.ascontiguousarray(resized.transpose(2, 0, 1))


def _random_resized_crop(
    img: np.ndarray,
    coords: np.ndarray,
    valid: np.ndarray,
    rng: np.random.Generator,
    out_size: int,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (0.75, 4.0 / 3.0),
    max_retries: int = 10,
):
    h, w = img.shape[1:]
    window = None
    for _ in range(max_retries):
        area = h * w * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(area * aspect)))
        ch = int(round(np.sqrt(area / aspect)))
        if 1 <= cw <= w and 1 <= ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            window = (top, left, ch, cw)
            break
    if window is None:
        raise AugmentationError(
            f"no valid crop window after {max_retries} attempts "
            f"(source {h}x{w}, scale {scale}, ratio {ratio})"
        )
    top, left, ch, cw = window
    img_c = img[:, top : top + ch, left : left + cw]
    coords_c = coords[:, top : top + ch, left : left + cw]
    valid_c = valid[top : top + ch, left : left + cw]
    if (ch, cw) == (out_size, out_size):
        return img_c.copy(), coords_c.copy(), valid_c.copy()
    return (
        _resize_bilinear(img_c, out_size, out_size),
        _resize_nearest_int(coords_c, out_size, out_size),
        _resize_nearest_int(valid_c, out_size, out_size),
    )


def _random_flip(
    img: np.ndarray,
    coords: np.ndarray,
    valid: np.ndarray,
    rng: np.random.Generator,
    horizontal_p: float = 0.5,
    vertical_p: float = 0.5,
):
    if rng.random() < horizontal_p:
        img = img[:, :, ::-1]
        coords = coords[:, :, ::-1]
        valid = valid[:, ::-1]
    if rng.random() < vertical_p:
        img = img[:, ::-1, :]
        coords = coords[:, ::-1, :]
        valid = valid[::-1, :]
    return np.ascontiguousarray(img), np.ascontiguousarray(coords), np.ascontiguousarray(valid)


def _random_rot90(
    img: np.ndarray, coords: np.ndarray, valid: np.ndarray, rng: np.random.Generator, p: float = 1.0
):
    k = int(rng.integers(0, 4)) if rng.random() < p else 0
    if k == 0:
        return img, coords, valid
    return (
        np.ascontiguousarray(np.rot90(img, k, axes=(1, 2))),
        np.ascontiguousarray(np.rot90(coords, k, axes=(1, 2))),
        np.ascontiguousarray(np.rot90(valid, k, axes=(0, 1))),
    )


# ---------------------------------------------------------------------------
# photometric transforms (image only; only the first three channels are
# treated as RGB, a fourth band gets intensity-level adjustments)
# ---------------------------------------------------------------------------


def _rgb_grayscale(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _color_jitter(
    img: np.ndarray,
    rng: np.random.Generator,
    brightness: float = 0.8,
    contrast: float = 0.8,
    saturation: float = 0.8,
    hue: float = 0.2,
    p: float = 0.8,
):
    if rng.random() >= p:
        return img
    order = rng.permutation(4)
    for which in order:
        if which == 0 and brightness > 0:
            factor = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
            img = img * factor
        elif which == 1 and contrast > 0:
            factor = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
            mean = float(_rgb_grayscale(img).mean())
            img = (img - mean) * factor + mean
        elif which == 2 and saturation > 0:
            factor = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
            gray = _rgb_grayscale(img)
            img = img.copy()
            img[:3] = img[:3] * factor + gray[None] * (1 - factor)
        elif which == 3 and hue > 0:
            shift = rng.uniform(-hue, hue)
            img = _shift_hue(img, shift)
        img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32)


def _shift_hue(img: np.ndarray, shift: float) -> np.ndarray:
    rgb = np.ascontiguousarray(img[:3].transpose(1, 2, 0))
    hsv = cv2.cvtColor(rgb, cv2.COLOR_RGB2HSV)
    hsv[:, :, 0] = np.mod(hsv[:, :, 0] + shift * 360.0, 360.0)
    out = img.copy()
    out[:3] = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).transpose(2, 0, 1)
    return out


def _gaussian_blur(
    img: np.ndarray, rng: np.random.Generator, sigma: tuple[float, float] = (0.1, 2.0), p: float = 0.5
):
    if rng.random() >= p:
        return img
    s = rng.uniform(sigma[0], sigma[1])
    hwc = np.ascontiguousarray(img.transpose(1, 2, 0))
    blurred = cv2.GaussianBlur(hwc, ksize=(0, 0), sigmaX=s, borderType=cv2.BORDER_REFLECT)
    if blurred.ndim == 2:
        blurred = blurred[:, :, None]
    return np.ascontiguousarray(blurred.transpose(2, 0, 1))


def _gaussian_noise(
    img: np.ndarray, rng: np.random.Generator, std: tuple[float, float] = (0.0, 0.05), p: float = 0.5
):
    if rng.random() >= p:
        return img
    s = rng.uniform(std[0], std[1])
    noisy = img + rng.normal(0.0, s, size=img.shape).astype(np.float32)
    return np.clip(noisy, 0.0, 1.0)


def _random_grayscale(img: np.ndarray, rng: np.random.Generator, p: float = 0.2):
    if rng.random() >= p:
        return img
    gray = _rgb_grayscale(img)
    out = img.copy()
    out[:3] = gray[None]
    if img.shape[0] == 4:
        # keep the extra band consistent with the mean shift the RGB bands saw
        rgb_mean = float(img[:3].mean())
        if rgb_mean > 0:
            out[3] = np.clip(img[3] * float(gray.mean()) / rgb_mean, 0.0, 1.0)
    return out


_OPS = {
    "random_resized_crop": _random_resized_crop,
    "random_flip": _random_flip,
    "random_rot90": _random_rot90,
    "color_jitter": _color_jitter,
    "gaussian_blur": _gaussian_blur,
    "gaussian_noise": _gaussian_noise,
    "random_grayscale": _random_grayscale,
}
