"""Stochastic view generation: random crop, resize, flip, Gaussian blur.

Two independent transform draws applied to the same source image produce a
view pair, the unit of self-supervised training. Everything is a pure
function of (image, policy, seed): the two draws use sub-seeds spawned
from the master seed, so view pairs are reproducible per (epoch, sample).
"""

import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
from scipy import ndimage

# images narrower than this cannot be cropped meaningfully
MIN_IMAGE_SIDE = 16
# below half a pixel the discrete kernel degenerates to the identity
MIN_BLUR_SIGMA = 0.5
_KERNEL_TRUNCATE = 4.0


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale_range: tuple = (0.2, 1.0)
    flip_probability: float = 0.5
    blur_probability: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    view_size: int = 128

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must satisfy 0 < low <= high <= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")
        if not 0.0 <= self.blur_probability <= 1.0:
            raise ValueError("blur_probability must be in [0, 1]")
        lo, hi = self.blur_sigma_range
        if not 0.0 < lo <= hi:
            raise ValueError("blur_sigma_range must satisfy 0 < low <= high")
        if self.view_size < 1:
            raise ValueError("view_size must be >= 1")

    @classmethod
    def from_config(cls, config) -> "AugmentationPolicy":
        return cls(
            crop_scale_range=(config.crop_scale_min, config.crop_scale_max),
            flip_probability=config.flip_probability,
            blur_probability=config.blur_probability,
            blur_sigma_range=(config.blur_sigma_min, config.blur_sigma_max),
            view_size=config.view_size,
        )


@dataclass(frozen=True)
class ViewPair:
    """Two stochastically augmented renditions of one image."""

    v1: np.ndarray
    v2: np.ndarray


@dataclass(frozen=True)
class TransformParams:
    """One sampled transform: crop box, flip flag, optional blur sigma."""

    top: int
    left: int
    crop_h: int
    crop_w: int
    flip: bool
    blur_sigma: Optional[float]


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Blur with a normalized, truncated Gaussian kernel.

    Smoothing only acts on the spatial axes; channels are filtered
    independently. The symmetric kernel with reflecting boundaries
    preserves total intensity exactly and never increases the pixel-value
    variance. Sigmas below half a pixel return the image unchanged.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {image.shape}")
    if sigma < MIN_BLUR_SIGMA:
        return image.copy()
    sigmas = (sigma, sigma) if image.ndim == 2 else (0.0, sigma, sigma)
    return ndimage.gaussian_filter(image, sigma=sigmas, mode="reflect",
                                   truncate=_KERNEL_TRUNCATE)


def _sample_transform(rng: np.random.Generator, policy: AugmentationPolicy,
                      height: int, width: int) -> TransformParams:
    lo, hi = policy.crop_scale_range
    scale = float(rng.uniform(lo, hi))
    side = math.sqrt(scale)
    crop_h = max(1, round(side * height))
    crop_w = max(1, round(side * width))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    flip = bool(rng.random() < policy.flip_probability)
    blur_sigma = None
    if rng.random() < policy.blur_probability:
        blur_sigma = float(rng.uniform(*policy.blur_sigma_range))
    return TransformParams(top, left, crop_h, crop_w, flip, blur_sigma)


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    # cv2 wants (H, W, C); bilinear keeps this deterministic
    hwc = np.ascontiguousarray(np.moveaxis(image, 0, -1))
    out = cv2.resize(hwc, (size, size), interpolation=cv2.INTER_LINEAR)
    if out.ndim == 2:
        out = out[:, :, None]
    return np.moveaxis(out, -1, 0)


def _apply_transform(image: np.ndarray, params: TransformParams,
                     view_size: int) -> np.ndarray:
    crop = image[:, params.top:params.top + params.crop_h,
                 params.left:params.left + params.crop_w]
    view = _resize(crop, view_size)
    if params.flip:
        view = view[:, :, ::-1]
    if params.blur_sigma is not None:
        view = gaussian_blur(view, params.blur_sigma)
    return np.clip(np.ascontiguousarray(view, dtype=np.float32), 0.0, 1.0)


def make_view_pair(image: np.ndarray, policy: AugmentationPolicy,
                   seed: int) -> ViewPair:
    """Draw two independent transforms and apply both to the same image.

    `image` is (C, H, W) with values in [0, 1]. Deterministic given
    (image, policy, seed); the two draws use distinct sub-seeds.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    _, height, width = image.shape
    if min(height, width) < MIN_IMAGE_SIDE:
        raise ValueError(
            f"image {height}x{width} is smaller than the minimum croppable "
            f"size {MIN_IMAGE_SIDE}")
    seq1, seq2 = np.random.SeedSequence(int(seed)).spawn(2)
    views = []
    for seq in (seq1, seq2):
        rng = np.random.default_rng(seq)
        params = _sample_transform(rng, policy, height, width)
        views.append(_apply_transform(image, params, policy.view_size))
    return ViewPair(v1=views[0], v2=views[1])
