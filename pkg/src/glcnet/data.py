"""Raster ingestion: tiling, split manifests, and synthetic desk-scale scenes.

Scenes live on disk as lossless images (PNG for up to 4 bands of 8-bit data)
with an optional ``<name>_mask`` companion holding per-pixel class ids.
Manifests are plain text, one ``tile_path<TAB>mask_path_or_dash`` record per
line, so alternate tooling can read them without this package.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

MASK_SUFFIX = "_mask"
IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg")
_TILE_NAME_RE = re.compile(r"^(?P<scene>.+)_y(?P<row>\d+)_x(?P<col>\d+)$")


class DataError(ValueError):
    """Raised for malformed scenes, directories, or split parameters."""


@dataclass
class RasterScene:
    """In-memory raster: ``pixels`` is (channels, height, width) uint8/float."""

    pixels: np.ndarray
    channel_names: list[str] = field(default_factory=list)
    mask: np.ndarray | None = None
    nodata_value: float | None = None
    scene_id: str = "scene"

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3:
            raise DataError(f"pixels must be (C, H, W), got shape {self.pixels.shape}")
        c = self.pixels.shape[0]
        if c not in (3, 4):
            raise DataError(f"channel count must be 3 or 4, got {c}")
        if not self.channel_names:
            self.channel_names = ["red", "green", "blue", "nir"][:c]
        if len(self.channel_names) != c:
            raise DataError("channel_names length does not match channel count")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.pixels.shape[1:]:
                raise DataError(
                    f"mask shape {self.mask.shape} does not match "
                    f"pixel dims {self.pixels.shape[1:]}"
                )

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class Tile:
    """A crop of a scene, tagged with its grid origin in scene pixels."""

    pixels: np.ndarray
    row: int
    col: int
    scene_id: str
    mask: np.ndarray | None = None

    @property
    def name(self) -> str:
        return f"{self.scene_id}_y{self.row:05d}_x{self.col:05d}"


def tile_raster(scene: RasterScene, crop_size: int, stride: int | None = None) -> list[Tile]:
    """Cut a scene into crop_size x crop_size tiles on a row-major grid.

    Stride defaults to crop_size (non-overlapping). Edge remainders that do
    not fill a full tile are dropped.
    """
    if stride is None:
        stride = crop_size
    if crop_size < 1 or stride < 1:
        raise DataError(f"crop_size and stride must be >= 1, got {crop_size}, {stride}")
    if crop_size > min(scene.height, scene.width):
        raise DataError(
            f"scene {scene.scene_id} is {scene.height}x{scene.width}, "
            f"smaller than crop size {crop_size}"
        )
    tiles = []
    for top in range(0, scene.height - crop_size + 1, stride):
        for left in range(0, scene.width - crop_size + 1, stride):
            mask = None
            if scene.mask is not None:
                mask = scene.mask[top : top + crop_size, left : left + crop_size].copy()
            tiles.append(
                Tile(
                    pixels=scene.pixels[:, top : top + crop_size, left : left + crop_size].copy(),
                    row=top,
                    col=left,
                    scene_id=scene.scene_id,
                    mask=mask,
                )
            )
    return tiles


# ---------------------------------------------------------------------------
# scene / tile persistence
# ---------------------------------------------------------------------------


def _to_hwc_uint8(pixels: np.ndarray) -> np.ndarray:
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def save_scene(scene: RasterScene, out_dir: Path) -> tuple[Path, Path | None]:
    """Write a scene (and its mask, if any) as PNG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hwc = _to_hwc_uint8(scene.pixels)
    mode = "RGBA" if hwc.shape[2] == 4 else "RGB"
    img_path = out_dir / f"{scene.scene_id}.png"
    Image.fromarray(hwc, mode=mode).save(img_path)
    mask_path = None
    if scene.mask is not None:
        mask_path = out_dir / f"{scene.scene_id}{MASK_SUFFIX}.png"
        Image.fromarray(scene.mask.astype(np.uint8), mode="L").save(mask_path)
    return img_path, mask_path


def load_scene(img_path: Path) -> RasterScene:
    """Load an image file plus its ``_mask`` companion when present."""
    img_path = Path(img_path)
    img = Image.open(img_path)
    arr = np.asarray(img)
    if arr.ndim == 2:
        raise DataError(f"{img_path} is single-band; scenes must have 3 or 4 channels")
    pixels = arr.transpose(2, 0, 1)
    mask = None
    mask_path = img_path.with_name(img_path.stem + MASK_SUFFIX + img_path.suffix)
    if mask_path.exists():
        mask = np.asarray(Image.open(mask_path)).astype(np.int64)
    return RasterScene(pixels=pixels, mask=mask, scene_id=img_path.stem)


def iter_scene_paths(directory: Path) -> list[Path]:
    directory = Path(directory)
    paths = []
    for path in sorted(directory.rglob("*")):
        if path.suffix.lower() in IMAGE_EXTS and not path.stem.endswith(MASK_SUFFIX):
            paths.append(path)
    return paths


def save_tiles(tiles: list[Tile], out_dir: Path) -> list[tuple[Path, Path | None]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for tile in tiles:
        hwc = _to_hwc_uint8(tile.pixels)
        mode = "RGBA" if hwc.shape[2] == 4 else "RGB"
        img_path = out_dir / f"{tile.name}.png"
        Image.fromarray(hwc, mode=mode).save(img_path)
        mask_path = None
        if tile.mask is not None:
            mask_path = out_dir / f"{tile.name}{MASK_SUFFIX}.png"
            Image.fromarray(tile.mask.astype(np.uint8), mode="L").save(mask_path)
        written.append((img_path, mask_path))
    return written


def load_tile_image(path: Path) -> np.ndarray:
    """Tile pixels as float32 (C, H, W) scaled to [0, 1]."""
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_tile_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    tile_path: str
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str
    crop_size: int
    label_fraction: float

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            f"# split={self.split}\tcrop_size={self.crop_size}"
            f"\tlabel_fraction={self.label_fraction:.10g}"
        ]
        for e in self.entries:
            lines.append(f"{e.tile_path}\t{e.mask_path if e.mask_path else '-'}")
        path.write_text("\n".join(lines) + "\n", newline="\n")

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("# "):
            raise DataError(f"manifest {path} is missing its header line")
        header = dict(kv.split("=", 1) for kv in lines[0][2:].split("\t"))
        entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            tile_path, mask_path = line.split("\t")
            entries.append(ManifestEntry(tile_path, None if mask_path == "-" else mask_path))
        return cls(
            entries=entries,
            split=header["split"],
            crop_size=int(header["crop_size"]),
            label_fraction=float(header["label_fraction"]),
        )

    def resolve(self, base_dir: Path) -> list[tuple[Path, Path | None]]:
        base_dir = Path(base_dir)
        return [
            (base_dir / e.tile_path, (base_dir / e.mask_path) if e.mask_path else None)
            for e in self.entries
        ]


@dataclass
class SplitSpec:
    """How tiles are divided into pretrain / finetune / test manifests.

    Test tiles come from whole held-out scenes so the labeled subset can
    never leak into the test set. The finetune split is a seeded random
    subset of the labeled pretrain tiles.
    """

    label_fraction: float = 0.01
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.label_fraction <= 1.0:
            raise DataError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataError(f"test_fraction must be in [0, 1), got {self.test_fraction}")


def label_subset_size(num_tiles: int, fraction: float) -> int:
    """Labeled-subset size for a given fraction of the pretraining tiles.

    Truncates (13824 tiles at 1% -> 138) but never returns 0 for a
    nonempty input.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"label fraction must be in (0, 1], got {fraction}")
    return max(1, int(num_tiles * fraction)) if num_tiles else 0


def _scene_of(stem: str) -> str:
    m = _TILE_NAME_RE.match(stem)
    return m.group("scene") if m else stem


def build_manifests(
    tile_dir: Path, split: SplitSpec, seed: int, crop_size: int | None = None
) -> dict[str, DatasetManifest]:
    """Scan a tile directory and produce pretrain/finetune/test manifests.

    Deterministic for fixed seed and directory contents; manifest paths are
    stored relative to ``tile_dir`` in posix form so the files are
    byte-identical across platforms.
    """
    tile_dir = Path(tile_dir)
    tile_paths = iter_scene_paths(tile_dir)
    if not tile_paths:
        raise DataError(f"no tiles found under {tile_dir}")

    records = []
    inferred_crop = crop_size
    for path in tile_paths:
        mask_path = path.with_name(path.stem + MASK_SUFFIX + path.suffix)
        rel = path.relative_to(tile_dir).as_posix()
        rel_mask = mask_path.relative_to(tile_dir).as_posix() if mask_path.exists() else None
        if inferred_crop is None:
            with Image.open(path) as img:
                inferred_crop = min(img.size)
        records.append((_scene_of(path.stem), rel, rel_mask))

    scenes = sorted({scene for scene, _, _ in records})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    order = list(rng.permutation(len(scenes)))
    n_test = int(round(split.test_fraction * len(scenes)))
    if split.test_fraction > 0 and n_test == 0:
        n_test = 1
    if n_test >= len(scenes) and split.test_fraction > 0:
        raise DataError("test_fraction would leave no scenes for pretraining")
    test_scenes = {scenes[i] for i in order[:n_test]}

    pretrain_entries = [
        ManifestEntry(rel, rel_mask) for scene, rel, rel_mask in records if scene not in test_scenes
    ]
    test_entries = [
        ManifestEntry(rel, rel_mask) for scene, rel, rel_mask in records if scene in test_scenes
    ]

    labeled = [e for e in pretrain_entries if e.mask_path is not None]
    n_finetune = label_subset_size(len(pretrain_entries), split.label_fraction)
    if len(labeled) < n_finetune:
        raise DataError(
            f"need {n_finetune} labeled tiles for the finetune split "
            f"but only {len(labeled)} pretrain tiles have masks"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    picks = rng.permutation(len(labeled))[:n_finetune]
    finetune_entries = [labeled[i] for i in sorted(picks)]

    frac = split.label_fraction
    return {
        "pretrain": DatasetManifest(pretrain_entries, "pretrain", inferred_crop, 1.0),
        "finetune": DatasetManifest(finetune_entries, "finetune", inferred_crop, frac),
        "test": DatasetManifest(test_entries, "test", inferred_crop, 1.0),
    }


def write_split_stats(manifests: dict[str, DatasetManifest], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in ("pretrain", "finetune", "test"):
        m = manifests[name]
        lines.append(f"{name}: {len(m)} tiles (crop {m.crop_size}, label_fraction {m.label_fraction:.10g})")
    path.write_text("\n".join(lines) + "\n", newline="\n")


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

_DEFAULT_PALETTE = np.array(
    [
        [0.20, 0.35, 0.12, 0.55],  # dark vegetation-like
        [0.55, 0.50, 0.42, 0.30],  # built-up gray
        [0.12, 0.25, 0.50, 0.10],  # water blue
        [0.70, 0.60, 0.30, 0.45],  # bare soil
        [0.45, 0.15, 0.15, 0.25],
        [0.80, 0.78, 0.72, 0.60],
        [0.25, 0.55, 0.55, 0.35],
        [0.60, 0.35, 0.55, 0.20],
    ]
)


@dataclass
class ClassTexture:
    """Appearance of one synthetic class: base color plus a striped texture."""

    base_color: tuple[float, ...]
    texture_amp: float = 0.08
    texture_period: float = 9.0
    noise_std: float = 0.04


@dataclass
class SyntheticSceneSpec:
    num_classes: int
    scene_size: int
    seed: int = 0
    num_scenes: int = 1
    channels: int = 3
    class_weights: tuple[float, ...] | None = None
    texture_params: list[ClassTexture] | None = None
    texture_amp_range: tuple[float, float] = (0.05, 0.12)
    noise_std: float = 0.04
    # 1.0 keeps the full palette spread; smaller values pull class colors
    # toward their mean, making classes harder to tell apart by color alone
    color_contrast: float = 1.0
    # per-scene appearance jitter; gives scenes distinct global "styles"
    style_gain_jitter: float = 0.25
    style_bias_jitter: float = 0.08

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.channels not in (3, 4):
            raise DataError(f"channels must be 3 or 4, got {self.channels}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.shape != (self.num_classes,) or (w <= 0).any():
                raise DataError("class_weights must be positive, one per class")

    def resolved_textures(self) -> list[ClassTexture]:
        if self.texture_params is not None:
            if len(self.texture_params) != self.num_classes:
                raise DataError("texture_params must supply one entry per class")
            return self.texture_params
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 303]))
        center = _DEFAULT_PALETTE[: len(_DEFAULT_PALETTE), : self.channels].mean(axis=0)
        textures = []
        for c in range(self.num_classes):
            base = _DEFAULT_PALETTE[c % len(_DEFAULT_PALETTE), : self.channels]
            base = center + self.color_contrast * (base - center)
            textures.append(
                ClassTexture(
                    base_color=tuple(float(v) for v in base),
                    texture_amp=float(rng.uniform(*self.texture_amp_range)),
                    texture_period=float(rng.uniform(5.0, 14.0)),
                    noise_std=self.noise_std,
                )
            )
        return textures


def _class_field(size: int, weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field thresholded at the class-weight quantiles.

    The quantile thresholds make the per-class pixel proportions track the
    requested weights closely regardless of the field's distribution.
    """
    noise = rng.standard_normal((size, size)).astype(np.float32)
    sigma = max(2.0, size / 16.0)
    field = cv2.GaussianBlur(noise, ksize=(0, 0), sigmaX=sigma, borderType=cv2.BORDER_REFLECT)
    cum = np.cumsum(weights / weights.sum())[:-1]
    thresholds = np.quantile(field, cum)
    return np.digitize(field, thresholds).astype(np.int64)


def generate_synthetic_dataset(spec: SyntheticSceneSpec) -> list[RasterScene]:
    """Deterministic multi-class scenes with per-class color and texture.

    Each scene also gets its own global gain/bias so that scenes differ in
    overall appearance the way acquisitions differ in practice.
    """
    weights = (
        np.asarray(spec.class_weights, dtype=np.float64)
        if spec.class_weights is not None
        else np.ones(spec.num_classes)
    )
    textures = spec.resolved_textures()
    size = spec.scene_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    scenes = []
    for scene_idx in range(spec.num_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 404, scene_idx]))
        mask = _class_field(size, weights, rng)

        img = np.zeros((spec.channels, size, size), dtype=np.float32)
        for c, tex in enumerate(textures):
            angle = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(
                2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / tex.texture_period + phase
            )
            sel = mask == c
            for ch in range(spec.channels):
                img[ch][sel] = tex.base_color[ch] + tex.texture_amp * wave[sel]
        img += rng.normal(0.0, textures[0].noise_std, size=img.shape).astype(np.float32)

        gain = 1.0 + rng.uniform(-spec.style_gain_jitter, spec.style_gain_jitter, size=spec.channels)
        bias = rng.uniform(-spec.style_bias_jitter, spec.style_bias_jitter, size=spec.channels)
        img = img * gain[:, None, None].astype(np.float32) + bias[:, None, None].astype(np.float32)
        img = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)

        scenes.append(
            RasterScene(
                pixels=img,
                mask=mask,
                scene_id=f"synth{scene_idx:03d}",
            )
        )
    return scenes


def class_proportions(mask: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(mask).ravel(), minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def write_dataset_summary(scenes: list[RasterScene], num_classes: int, path: Path) -> None:
    """Sidecar stats: per-scene and overall class pixel proportions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    overall = np.zeros(num_classes)
    for scene in scenes:
        props = class_proportions(scene.mask, num_classes)
        overall += props
        lines.append(scene.scene_id + ": " + " ".join(f"{p:.4f}" for p in props))
    overall /= max(1, len(scenes))
    lines.append("overall: " + " ".join(f"{p:.4f}" for p in overall))
    path.write_text("\n".join(lines) + "\n", newline="\n")
