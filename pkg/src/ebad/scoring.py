"""Gradient-map anomaly scoring.

The spatial anomaly signal is the gradient of the log-density with respect to
the input pixels. Because the log-partition term does not depend on the input,
that gradient is exactly the negated energy gradient:

    g = d log p(x) / dx = -dE/dx

Raw maps are standardized per pixel location and channel against statistics of
the training set's gradient maps, (g - mu) / sigma, and both raw and
standardized maps are collapsed to per-pixel scores by an L1 or L2 norm across
channels, then to a single image score by the same norm across pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EbadError, ShapeMismatchError
from .network import DTYPE, ModelParams, batch_energies, batch_input_gradients

MAP_KINDS = ("raw", "standardized")
SCORE_KINDS = ("raw", "standardized", "energy")
NORM_ORDERS = (1, 2)

STATS_MAGIC = b"EBMSTAT1"
_U32 = np.dtype("<u4")
_U64 = np.dtype("<u8")
_F64 = np.dtype("<f8")


class StatsFileError(EbadError):
    """Pixel-statistics file is missing, truncated, or structurally invalid."""


@dataclass
class GradientMap:
    """Per-pixel, per-channel log-density gradient of one image."""

    values: np.ndarray  # (h, w, c)
    image_id: str = ""
    kind: str = "raw"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.values.ndim != 3:
            raise ShapeMismatchError(f"gradient map must be (h, w, c), got {self.values.shape}")
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}")


@dataclass
class PixelStats:
    """Per-location, per-channel population mean and floored std of training maps."""

    mu: np.ndarray
    sigma: np.ndarray
    count: int
    epsilon: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=DTYPE)
        self.sigma = np.asarray(self.sigma, dtype=DTYPE)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 3:
            raise ShapeMismatchError(
                f"mu {self.mu.shape} and sigma {self.sigma.shape} must be equal (h, w, c)")
        if self.count < 2:
            raise ValueError(f"need at least 2 samples, got {self.count}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if float(self.sigma.min()) < self.epsilon:
            raise ValueError("sigma fell below its floor")


@dataclass
class ScoreMap:
    """Per-pixel scalar anomaly scores (channel norm of a gradient map)."""

    values: np.ndarray  # (h, w)
    r: int
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"score map must be (h, w), got {self.values.shape}")
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        if float(self.values.min()) < 0:
            raise ValueError("pixel scores are norms and must be >= 0")


@dataclass(frozen=True)
class ImageScore:
    value: float
    kind: str
    r: int | None = None

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.kind != "energy" and self.value < 0:
            raise ValueError("raw/standardized image scores are norms and must be >= 0")


def gradient_map(params: ModelParams, image: np.ndarray, image_id: str = "") -> GradientMap:
    """g = -dE/dx for one image; the exact negation of the energy's input gradient."""
    _, grads = batch_input_gradients(params, np.asarray(image, dtype=DTYPE)[None])
    return GradientMap(-grads[0], image_id=image_id, kind="raw")


def iter_gradient_maps(params: ModelParams, images, ids=None, batch_size: int = 16):
    """Yield gradient maps for many images, batching the network passes."""
    images = np.asarray(images, dtype=DTYPE)
    ids = list(ids) if ids is not None else [""] * images.shape[0]
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        _, grads = batch_input_gradients(params, chunk)
        for offset in range(chunk.shape[0]):
            yield GradientMap(-grads[offset], image_id=ids[start + offset], kind="raw")


class PixelStatsAccumulator:
    """Streaming per-pixel mean/variance (Welford), with an exact parallel merge."""

    def __init__(self, epsilon: float = 1e-8):
        if epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {epsilon}")
        self.epsilon = epsilon
        self.count = 0
        self.mean: np.ndarray | None = None
        self.m2: np.ndarray | None = None

    def update(self, gmap) -> None:
        values = gmap.values if isinstance(gmap, GradientMap) else np.asarray(gmap, dtype=DTYPE)
        if self.mean is None:
            self.mean = np.zeros_like(values)
            self.m2 = np.zeros_like(values)
        elif values.shape != self.mean.shape:
            raise ShapeMismatchError(
                f"map shape {values.shape} != accumulated shape {self.mean.shape}")
        self.count += 1
        delta = values - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (values - self.mean)

    def merge(self, other: "PixelStatsAccumulator") -> None:
        """Fold another accumulator in (count/mean/M2 merge); order-independent totals."""
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return
        if other.mean.shape != self.mean.shape:
            raise ShapeMismatchError("cannot merge accumulators with different shapes")
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / total)
        self.count = total

    def finalize(self) -> PixelStats:
        if self.count < 2:
            raise ValueError(f"need at least 2 maps to fit pixel stats, got {self.count}")
        sigma = np.sqrt(self.m2 / self.count)  # population (1/N) std
        np.maximum(sigma, self.epsilon, out=sigma)
        return PixelStats(self.mean.copy(), sigma, self.count, self.epsilon)


def fit_pixel_stats(gradient_maps, epsilon: float = 1e-8) -> PixelStats:
    """Population mean/std per pixel location and channel over training maps."""
    acc = PixelStatsAccumulator(epsilon=epsilon)
    for gmap in gradient_maps:
        acc.update(gmap)
    return acc.finalize()


def standardize(gmap: GradientMap, stats: PixelStats) -> GradientMap:
    """(g - mu) / sigma element-wise."""
    if gmap.values.shape != stats.mu.shape:
        raise ShapeMismatchError(
            f"map shape {gmap.values.shape} != stats shape {stats.mu.shape}")
    values = (gmap.values - stats.mu) / stats.sigma
    return GradientMap(values, image_id=gmap.image_id, kind="standardized")


def pixel_scores(gmap: GradientMap, r: int = 2) -> ScoreMap:
    """Channel-wise L_r norm at each pixel: a(x) = (sum_k |v_k(x)|^r)^(1/r)."""
    _check_r(r)
    v = np.abs(gmap.values)
    if r == 1:
        scores = v.sum(axis=2)
    else:
        scores = np.sqrt((v * v).sum(axis=2))
    return ScoreMap(scores, r=r, kind=gmap.kind)


def image_score(gmap: GradientMap, r: int = 2) -> ImageScore:
    """L_r norm over all pixels of the per-pixel scores.

    Algebraically this equals the r-norm of the flattened (h, w, c) values,
    which is how it is computed.
    """
    _check_r(r)
    flat = np.abs(gmap.values).ravel()
    if r == 1:
        value = float(flat.sum())
    else:
        value = float(np.sqrt(np.sum(flat * flat)))
    return ImageScore(value, kind=gmap.kind, r=r)


def energy_score(params: ModelParams, image: np.ndarray) -> ImageScore:
    """The plain energy as an anomaly score (higher = more anomalous)."""
    e = float(batch_energies(params, np.asarray(image, dtype=DTYPE)[None])[0])
    return ImageScore(e, kind="energy")


def _check_r(r) -> None:
    if r not in NORM_ORDERS:
        raise ValueError(f"norm order must be one of {NORM_ORDERS}, got {r!r}")


# ---------------------------------------------------------------------------
# Pixel-statistics persistence (little-endian binary)
# ---------------------------------------------------------------------------

def save_pixel_stats(path, stats: PixelStats) -> None:
    path = Path(path)
    h, w, c = stats.mu.shape
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(STATS_MAGIC)
        fh.write(np.asarray([h, w, c], dtype=_U32).tobytes())
        fh.write(np.ascontiguousarray(stats.mu, dtype=_F64).tobytes())
        fh.write(np.ascontiguousarray(stats.sigma, dtype=_F64).tobytes())
        fh.write(np.asarray([stats.count], dtype=_U64).tobytes())
        fh.write(np.asarray([stats.epsilon], dtype=_F64).tobytes())
    os.replace(tmp, path)


def load_pixel_stats(path) -> PixelStats:
    path = Path(path)
    if not path.is_file():
        raise StatsFileError(f"stats file not found: {path}")
    data = path.read_bytes()
    if data[:8] != STATS_MAGIC:
        raise StatsFileError(f"{path}: bad magic {data[:8]!r}, expected {STATS_MAGIC!r}")
    offset = 8

    def take(dtype, count):
        nonlocal offset
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(data):
            raise StatsFileError(f"{path}: truncated at byte {offset}")
        out = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        return out

    h, w, c = (int(v) for v in take(_U32, 3))
    mu = take(_F64, h * w * c).reshape(h, w, c).copy()
    sigma = take(_F64, h * w * c).reshape(h, w, c).copy()
    count = int(take(_U64, 1)[0])
    epsilon = float(take(_F64, 1)[0])
    if offset != len(data):
        raise StatsFileError(f"{path}: {len(data) - offset} trailing bytes")
    return PixelStats(mu, sigma, count, epsilon)
