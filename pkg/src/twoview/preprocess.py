"""Leaf segmentation and the two image views.

The global view is the stem-filtered leaf, background whitened, cropped to its
bounding box and resized to 224x224. The local view is a c x c center crop of the
global view, so both views share geometry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import LeafSample
from .errors import NoLeafDetected, ValidationError

GLOBAL_SIZE = 224
CROP_SIZES = (32, 64, 128)
BACKGROUND = 255


@dataclass(frozen=True)
class PreprocessConfig:
    crop_size: int = 64
    kernel_radius: int = 3
    # "dark": foreground is the low-intensity side of the Otsu split.
    polarity: str = "dark"

    def __post_init__(self):
        if self.crop_size not in CROP_SIZES:
            raise ValidationError(f"crop_size must be one of {CROP_SIZES}, got {self.crop_size}")
        if self.kernel_radius < 1:
            raise ValidationError("kernel_radius must be >= 1")
        if self.polarity not in ("dark", "bright"):
            raise ValidationError(f"polarity must be 'dark' or 'bright', got {self.polarity!r}")


@dataclass(frozen=True, eq=False)
class ViewPair:
    global_view: np.ndarray
    local_view: np.ndarray

    def view(self, name: str) -> np.ndarray:
        if name == "global":
            return self.global_view
        if name == "local":
            return self.local_view
        raise ValueError(f"unknown view {name!r}")


def _check_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValidationError(f"expected HxWx3 uint8 image, got {image.shape} {image.dtype}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValidationError("empty image")
    return image


def to_grayscale(image: np.ndarray) -> np.ndarray:
    image = _check_rgb(image).astype(np.float64)
    gray = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> tuple[int, np.ndarray]:
    """Otsu's threshold over candidates 0..255 and the mask of pixels above it.

    Ties in between-class variance resolve to the smallest threshold. A constant
    grid returns its own value and an empty mask.
    """
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.size == 0:
        raise ValidationError("otsu_threshold needs a nonempty 2-D grid")
    hist = np.bincount(gray.ravel().astype(np.int64), minlength=256)[:256].astype(np.float64)
    if np.count_nonzero(hist) == 1:
        t = int(np.flatnonzero(hist)[0])
        return t, np.zeros(gray.shape, dtype=bool)
    levels = np.arange(256, dtype=np.float64)
    n0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    n, s = n0[-1], s0[-1]
    n1 = n - n0
    with np.errstate(divide="ignore", invalid="ignore"):
        # w0*w1*(mu0-mu1)^2 scaled by n^2; (n*s0 - n0*s)^2 / (n0*n1) is exact up to rounding
        var = (n * s0 - n0 * s) ** 2 / (n0 * n1)
    var[(n0 == 0) | (n1 == 0)] = -1.0
    t = int(np.argmax(var))
    return t, gray > t


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def tophat_filter(mask: np.ndarray, kernel_radius: int = 3) -> np.ndarray:
    """Binary opening with a disk; removes protrusions thinner than the disk."""
    if kernel_radius < 1:
        raise ValidationError("kernel_radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    se = disk(kernel_radius)
    eroded = ndimage.binary_erosion(mask, structure=se, border_value=1)
    return ndimage.binary_dilation(eroded, structure=se, border_value=0)


def bounding_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1), half-open."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise NoLeafDetected("no-leaf-detected: empty foreground mask")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def bounding_box_crop(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValidationError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    r0, r1, c0, c1 = bounding_box(mask)
    return image[r0:r1, c0:c1].copy()


def resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image.copy()
    im = Image.fromarray(np.ascontiguousarray(image), mode="RGB")
    return np.asarray(im.resize((size, size), resample=Image.BILINEAR), dtype=np.uint8).copy()


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValidationError(f"crop {size} larger than image {h}x{w}")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return image[r0:r0 + size, c0:c0 + size].copy()


def leaf_mask(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Foreground mask after thresholding and stem removal."""
    gray = to_grayscale(image)
    t, above = otsu_threshold(gray)
    if not above.any():
        raise NoLeafDetected("no-leaf-detected: image is constant")
    fg = ~above if config.polarity == "dark" else above
    return tophat_filter(fg, config.kernel_radius)


def make_views(sample, config: PreprocessConfig = PreprocessConfig()) -> ViewPair:
    image = sample.image if isinstance(sample, LeafSample) else _check_rgb(sample)
    mask = leaf_mask(image, config)
    filtered = image.copy()
    filtered[~mask] = BACKGROUND
    leaf = bounding_box_crop(filtered, mask)
    global_view = resize(leaf, GLOBAL_SIZE)
    return ViewPair(global_view, center_crop(global_view, config.crop_size))


def augment_rotations(sample: LeafSample, count: int, seed: int = 0) -> list[LeafSample]:
    """``count`` copies rotated by uniform random angles, white fill, same canvas."""
    if count < 0:
        raise ValidationError("count must be >= 0")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 360.0, size=count)
    return [LeafSample(f"{sample.sample_id}_rot{i}", rotate(sample.image, float(a)), sample.species_id)
            for i, a in enumerate(angles)]


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    im = Image.fromarray(np.ascontiguousarray(image), mode="RGB")
    out = im.rotate(angle, resample=Image.BILINEAR, expand=False, fillcolor=(BACKGROUND,) * 3)
    return np.asarray(out, dtype=np.uint8).copy()
