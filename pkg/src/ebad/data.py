"""Dataset ingestion, preprocessing, synthetic data, and image artifacts.

Datasets follow the MVTec directory layout:

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

Resizing is plain bilinear interpolation without antialiasing (pixel-center
convention), locked by tests so gradients and scores stay reproducible across
environments. Masks are resized with nearest neighbor and re-binarized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EbadError, ShapeMismatchError
from .network import DTYPE

GOOD_LABEL = "good"
TEXTURES = ("stripes", "blobs")
DEFECTS = ("square", "scratch")


class DatasetError(EbadError):
    """Dataset directory or file violates the expected layout."""


class ImageFormatError(EbadError):
    """Image file cannot be decoded into the supported 8-bit formats."""


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-antialiased bilinear resize of an (h, w, c) float array.

    Sample positions use the pixel-center convention
    src = (dst + 0.5) * (in / out) - 0.5, clamped to the image; equal sizes
    return an exact copy.
    """
    image = np.asarray(image, dtype=DTYPE)
    h, w = image.shape[0], image.shape[1]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def nearest_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize (same pixel-center convention as bilinear)."""
    image = np.asarray(image)
    h, w = image.shape[0], image.shape[1]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return image[ys][:, xs]


# ---------------------------------------------------------------------------
# Image decode / encode
# ---------------------------------------------------------------------------

def load_image(path, channels: int) -> np.ndarray:
    """Decode an 8-bit PNG to float64 [0, 1] with shape (h, w, channels)."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    if img.mode in ("I", "I;16", "F"):
        raise ImageFormatError(f"{path}: unsupported bit depth (mode {img.mode}), expected 8-bit")
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=DTYPE) / 255.0
    if channels == 1:
        arr = arr[:, :, None]
    return arr


def preprocess(path, channels: int, size: int) -> np.ndarray:
    """Decode, convert to the channel mode, bilinear-resize to (size, size)."""
    return bilinear_resize(load_image(path, channels), size, size)


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Binary {0,1} ground-truth mask, optionally nearest-resized to (size, size)."""
    arr = np.asarray(Image.open(path).convert("L"), dtype=DTYPE) / 255.0
    if size is not None:
        arr = nearest_resize(arr, size, size)
    return (arr >= 0.5).astype(np.int8)


def save_image_u8(path, array: np.ndarray) -> None:
    """Write a uint8 array (h, w) or (h, w, {1,3}) as PNG."""
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr.astype(np.uint8)).save(path)


def save_score_map_png16(path, values: np.ndarray) -> None:
    """Min-max normalized 16-bit grayscale PNG plus a JSON sidecar holding the
    scale, so the stored image can be mapped back to score values."""
    path = Path(path)
    values = np.asarray(values, dtype=DTYPE)
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin
    norm = (values - vmin) / span if span > 0 else np.zeros_like(values)
    encoded = np.round(norm * 65535.0).astype(np.uint16)
    Image.fromarray(encoded).save(path)  # uint16 -> 16-bit grayscale PNG
    sidecar = {"min": vmin, "max": vmax, "encoding": "uint16 = (v - min) / (max - min) * 65535"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    label: str  # "good" or the defect type
    mask_path: Path | None = None

    @property
    def is_defective(self) -> bool:
        return self.label != GOOD_LABEL


@dataclass
class DatasetManifest:
    category: str
    split: str  # "train" | "test"
    entries: list[ManifestEntry]
    channels: int = 3

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.split == "train":
            bad = [e for e in self.entries if e.is_defective]
            if bad:
                raise DatasetError(
                    f"train split must contain only good images; found {bad[0].image_path}")
        for e in self.entries:
            if e.is_defective and e.mask_path is None:
                raise DatasetError(f"defective entry without mask: {e.image_path}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        """0 for good, 1 for any defect type."""
        return np.array([1 if e.is_defective else 0 for e in self.entries], dtype=np.int8)


def load_mvtec(root, category: str, split: str, channels: int = 3) -> DatasetManifest:
    """Build a manifest for one split of an MVTec-layout category.

    Defective test images pair with ground_truth/<type>/<stem>_mask.png; good
    test images carry no mask (treated as all-zero by evaluation).
    """
    root = Path(root)
    category_dir = root / category
    if not category_dir.is_dir():
        raise DatasetError(f"category directory not found: {category_dir}")
    split_dir = category_dir / split
    if not split_dir.is_dir():
        raise DatasetError(f"split directory not found: {split_dir}")
    entries = []
    for type_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        label = type_dir.name
        for image_path in sorted(type_dir.glob("*.png")):
            mask_path = None
            if label != GOOD_LABEL:
                mask_path = category_dir / "ground_truth" / label / f"{image_path.stem}_mask.png"
                if not mask_path.is_file():
                    raise DatasetError(f"missing mask for {image_path}: {mask_path}")
            entries.append(ManifestEntry(image_path, label, mask_path))
    if not entries:
        raise DatasetError(f"no PNG images under {split_dir}")
    return DatasetManifest(category=category, split=split, entries=entries, channels=channels)


def load_split_images(manifest: DatasetManifest, size: int) -> np.ndarray:
    """Preprocess every manifest entry into one (N, size, size, c) array."""
    return np.stack([preprocess(e.image_path, manifest.channels, size)
                     for e in manifest.entries])


# ---------------------------------------------------------------------------
# Synthetic dataset generator (integer texture arithmetic, byte-reproducible)
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    seed: int = 0
    image_size: int = 32
    train_count: int = 200
    test_good_count: int = 50
    test_defect_count: int = 50
    texture: str = "stripes"
    defect: str = "square"
    defect_size_low: int = 4
    defect_size_high: int = 8
    defect_delta: int = 60  # 8-bit intensity offset; defect pixels differ by >= this
    channels: int = 1
    category: str = ""

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.defect not in DEFECTS:
            raise ValueError(f"defect must be one of {DEFECTS}, got {self.defect!r}")
        if not 1 <= self.defect_size_low <= self.defect_size_high < self.image_size:
            raise ValueError("defect size range must fit inside the image")
        if min(self.train_count, self.test_good_count, self.test_defect_count) < 1:
            raise ValueError("all split counts must be >= 1")
        if not 1 <= self.defect_delta <= 127:
            raise ValueError(f"defect_delta must be in [1, 127], got {self.defect_delta}")
        if not self.category:
            self.category = self.texture


def _stripes_base(rng, size: int) -> np.ndarray:
    half_period = 4
    phase = int(rng.integers(0, 2 * half_period))
    xs = (np.arange(size) + phase) // half_period % 2
    return np.tile(np.where(xs, 170, 90).astype(np.int64), (size, 1))


def _blobs_base(rng, size: int) -> np.ndarray:
    img = rng.integers(0, 256, size=(size, size))
    for _ in range(3):  # integer box blurs smooth the noise into blobs
        padded = np.pad(img, 1, mode="edge")
        acc = np.zeros_like(img)
        for dy in range(3):
            for dx in range(3):
                acc = acc + padded[dy:dy + size, dx:dx + size]
        img = acc // 9
    return np.clip((img - 128) * 3 + 128, 0, 255)


def _texture_base(rng, spec: SyntheticSpec) -> np.ndarray:
    """The category's clean texture, drawn once per dataset."""
    make = _stripes_base if spec.texture == "stripes" else _blobs_base
    n_channels = 1 if spec.channels == 1 else 3
    return np.stack([make(rng, spec.image_size) for _ in range(n_channels)], axis=2)


def _render_texture(rng, spec: SyntheticSpec, base: np.ndarray) -> np.ndarray:
    """One normal image: the clean texture plus mild integer noise."""
    noise = rng.integers(-6, 7, size=base.shape)
    return np.clip(base + noise, 0, 255)


def _defect_mask(rng, spec: SyntheticSpec) -> np.ndarray:
    size = spec.image_size
    mask = np.zeros((size, size), dtype=np.int64)
    extent = int(rng.integers(spec.defect_size_low, spec.defect_size_high + 1))
    if spec.defect == "square":
        y = int(rng.integers(0, size - extent + 1))
        x = int(rng.integers(0, size - extent + 1))
        mask[y:y + extent, x:x + extent] = 1
    else:  # scratch: thin axis-aligned or diagonal line
        thickness = int(rng.integers(1, 3))
        direction = int(rng.integers(0, 3))
        y = int(rng.integers(0, size - extent + 1))
        x = int(rng.integers(0, size - extent + 1))
        if direction == 0:  # horizontal
            mask[y:y + thickness, x:x + extent] = 1
        elif direction == 1:  # vertical
            mask[y:y + extent, x:x + thickness] = 1
        else:  # diagonal
            for t in range(extent):
                mask[min(y + t, size - 1), min(x + t, size - 1):min(x + t, size - 1) + thickness] = 1
    return mask


def _apply_defect(image: np.ndarray, mask: np.ndarray, delta: int) -> np.ndarray:
    # push each defect pixel toward the farther intensity bound so the
    # difference is exactly delta with no clipping
    out = image.copy()
    m = mask.astype(bool)
    below = out < 128
    out[m & below] += delta
    out[m & ~below] -= delta
    return out


def generate_synthetic(spec: SyntheticSpec, out_root) -> Path:
    """Write a deterministic MVTec-layout dataset; returns the category dir."""
    out_root = Path(out_root)
    category_dir = out_root / spec.category
    train_dir = category_dir / "train" / GOOD_LABEL
    test_good_dir = category_dir / "test" / GOOD_LABEL
    test_defect_dir = category_dir / "test" / "defect"
    mask_dir = category_dir / "ground_truth" / "defect"
    for d in (train_dir, test_good_dir, test_defect_dir, mask_dir):
        d.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    base = _texture_base(rng, spec)
    for i in range(spec.train_count):
        save_image_u8(train_dir / f"{i:03d}.png", _render_texture(rng, spec, base))
    for i in range(spec.test_good_count):
        save_image_u8(test_good_dir / f"{i:03d}.png", _render_texture(rng, spec, base))
    for i in range(spec.test_defect_count):
        image = _render_texture(rng, spec, base)
        mask = _defect_mask(rng, spec)
        defective = np.stack([_apply_defect(image[:, :, c], mask, spec.defect_delta)
                              for c in range(image.shape[2])], axis=2)
        save_image_u8(test_defect_dir / f"{i:03d}.png", defective)
        save_image_u8(mask_dir / f"{i:03d}_mask.png", mask * 255)
    return category_dir


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

@dataclass
class HeatmapRender:
    normalization: str = "minmax"  # "minmax" | "fixed"
    fixed_min: float = 0.0
    fixed_max: float = 1.0
    colormap: str = "inferno"
    overlay_alpha: float = 1.0  # 1 = pure heatmap, <1 blends over the base image

    def __post_init__(self):
        if self.normalization not in ("minmax", "fixed"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ValueError(f"overlay_alpha must be in [0, 1], got {self.overlay_alpha}")


def emit_heatmap(score_map: np.ndarray, render: HeatmapRender, path,
                 base_image: np.ndarray | None = None) -> None:
    """Colormapped PNG of a score map, optionally blended over the input image.

    A JSON sidecar records the numeric scale so renders stay invertible.
    """
    import matplotlib

    values = np.asarray(score_map, dtype=DTYPE)
    if not np.isfinite(values).all():
        raise ValueError("score map must be finite")
    if render.normalization == "minmax":
        vmin, vmax = float(values.min()), float(values.max())
    else:
        vmin, vmax = render.fixed_min, render.fixed_max
    span = vmax - vmin
    norm = (values - vmin) / span if span > 0 else np.zeros_like(values)
    norm = np.clip(norm, 0.0, 1.0)
    cmap = matplotlib.colormaps[render.colormap]
    rgb = cmap(norm)[:, :, :3]
    if base_image is not None and render.overlay_alpha < 1.0:
        base = np.asarray(base_image, dtype=DTYPE)
        if base.ndim == 3 and base.shape[2] == 1:
            base = np.repeat(base, 3, axis=2)
        elif base.ndim == 2:
            base = np.stack([base] * 3, axis=2)
        if base.shape[:2] != rgb.shape[:2]:
            raise ShapeMismatchError(
                f"base image {base.shape[:2]} != score map {rgb.shape[:2]}")
        rgb = render.overlay_alpha * rgb + (1.0 - render.overlay_alpha) * base
    path = Path(path)
    save_image_u8(path, np.round(rgb * 255.0).astype(np.uint8))
    sidecar = {"min": vmin, "max": vmax, "colormap": render.colormap,
               "normalization": render.normalization, "overlay_alpha": render.overlay_alpha}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
