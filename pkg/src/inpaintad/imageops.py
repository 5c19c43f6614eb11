"""Small pure-array image operations used across modules.

All functions operate on the last two axes, so they accept plain (H, W)
maps as well as channel-first (C, H, W) stacks. Images on disk are
handled with Pillow; in memory an image is a float array (H, W, 3) with
values in [0, 1].
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ParameterError


def resize_nearest(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (half-pixel centers).

    For integer upscale factors this reduces to exact block repetition.
    """
    h, w = arr.shape[-2], arr.shape[-1]
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ParameterError(f"invalid output size {out_hw}")
    yi = np.minimum((np.arange(oh) + 0.5) * (h / oh), h - 1).astype(np.intp)
    xi = np.minimum((np.arange(ow) + 0.5) * (w / ow), w - 1).astype(np.intp)
    return arr[..., yi[:, None], xi[None, :]]


def resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes with half-pixel sampling."""
    h, w = arr.shape[-2], arr.shape[-1]
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ParameterError(f"invalid output size {out_hw}")
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    top = a * (1.0 - wx) + b * wx
    bot = c * (1.0 - wx) + d * wx
    return top * (1.0 - wy) + bot * wy


def block_any(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Downsample a binary mask so an output cell is 1 iff any covered
    input pixel is 1 (dilating rule)."""
    h, w = mask.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1 or h % oh != 0 or w % ow != 0:
        raise ParameterError(f"block size from {mask.shape} to {out_hw} is not integral")
    blocks = mask.reshape(oh, h // oh, ow, w // ow)
    return blocks.any(axis=(1, 3)).astype(np.uint8)


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with reflect padding; sigma=0 is a copy."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return values.copy()
    return ndimage.gaussian_filter(values, sigma=sigma, mode="reflect")


def to_gray(image: np.ndarray) -> np.ndarray:
    """Channel-mean grayscale of an (H, W, 3) image."""
    return image.mean(axis=2)


def load_image(path, size: int | None = None) -> np.ndarray:
    """Load an RGB image as float64 (H, W, 3) in [0, 1], optionally
    bilinear-resized to size x size."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_binary_mask(path, size: int | None = None) -> np.ndarray:
    """Load a ground-truth mask as uint8 {0,1}, nearest-resized."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    """Write a float [0,1] image (H, W, 3) or map (H, W) as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)
