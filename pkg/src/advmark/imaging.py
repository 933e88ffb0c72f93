"""Pixel-exact watermark scaling and alpha-blend compositing, plus PNG/PPM I/O.

The blend is computed in integer arithmetic so results are reproducible
bit-for-bit across platforms.  For 8-bit samples and an integer global
alpha the blended value can never land exactly on a .5 boundary, so
round-to-nearest is unambiguous.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "RasterImage",
    "WatermarkAsset",
    "ScaleSpec",
    "ImageIOError",
    "compute_scale",
    "scale_watermark",
    "composite",
    "load_image",
    "save_image",
]

# alpha and mask are both 8-bit, so the exact blend denominator is 255*255
_BLEND_DEN = 255 * 255


class ImageIOError(OSError):
    """Raised when an image file cannot be read or written."""


@dataclass(frozen=True, eq=False)
class RasterImage:
    """An 8-bit RGB or RGBA raster held as a read-only (height, width, channels) array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.pixels)
        if arr.dtype != np.uint8:
            raise ValueError(f"pixel buffer must be uint8, got {arr.dtype}")
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise ValueError(f"expected (h, w, 3|4) pixel array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be at least 1x1, got shape {arr.shape}")
        arr = arr.copy() if not arr.flags.owndata else arr
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def same_pixels(self, other: "RasterImage") -> bool:
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    @classmethod
    def full(cls, width: int, height: int, color) -> "RasterImage":
        """Solid-color image; ``color`` is a scalar or an RGB(A) tuple."""
        color_arr = np.atleast_1d(np.asarray(color, dtype=np.uint8))
        if color_arr.size == 1:
            color_arr = np.repeat(color_arr, 3)
        buf = np.empty((height, width, color_arr.size), dtype=np.uint8)
        buf[:] = color_arr
        return cls(buf)


@dataclass(frozen=True, eq=False)
class WatermarkAsset:
    """A watermark image together with its per-pixel opacity mask.

    The mask comes from the source alpha channel and scales the global
    transparency per pixel, so fully transparent background pixels leave
    the host untouched.  Assets without an alpha channel get an all-255
    mask, which makes the blend a plain full-rectangle alpha blend.
    """

    image: RasterImage
    opacity_mask: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(self.opacity_mask, dtype=np.uint8)
        if mask.shape != (self.image.height, self.image.width):
            raise ValueError(
                f"opacity mask shape {mask.shape} does not match image "
                f"{(self.image.height, self.image.width)}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "opacity_mask", mask)

    @property
    def width(self) -> int:
        return self.image.width

    @property
    def height(self) -> int:
        return self.image.height

    @property
    def rgb(self) -> np.ndarray:
        """Color samples only, shape (h, w, 3)."""
        return self.image.pixels[:, :, :3]

    @classmethod
    def from_image(cls, image: RasterImage) -> "WatermarkAsset":
        if image.channels == 4:
            mask = image.pixels[:, :, 3]
        else:
            mask = np.full((image.height, image.width), 255, dtype=np.uint8)
        return cls(image=image, opacity_mask=mask)


@dataclass(frozen=True)
class ScaleSpec:
    """Resolved scaling of a watermark against a host: factor, ratio and output size."""

    sl: float
    eta: float
    scaled_w: int
    scaled_h: int

    def __post_init__(self):
        if self.scaled_w < 1 or self.scaled_h < 1:
            raise ValueError("scaled watermark collapsed below 1x1")


def compute_scale(host_w: int, host_h: int, wm_w: int, wm_h: int, sl: float) -> ScaleSpec:
    """Target dimensions for a watermark scaled by ``sl`` relative to a host.

    The scaling ratio is ``min(host_w*sl/wm_w, host_h*sl/wm_h)`` so the result
    occupies at most the ``sl`` fraction of either host dimension while keeping
    the aspect ratio.  Dimensions are rounded to nearest with a floor of 1 px.
    """
    if sl <= 0:
        raise ValueError(f"scale factor must be positive, got {sl}")
    if wm_w < 1 or wm_h < 1 or host_w < 1 or host_h < 1:
        raise ValueError("host and watermark must be non-empty")
    eta = min(host_w * sl / wm_w, host_h * sl / wm_h)
    scaled_w = max(1, round(wm_w * eta))
    scaled_h = max(1, round(wm_h * eta))
    if scaled_w > host_w or scaled_h > host_h:
        raise ValueError(
            f"scale {sl} makes watermark {scaled_w}x{scaled_h} larger than host {host_w}x{host_h}"
        )
    return ScaleSpec(sl=sl, eta=eta, scaled_w=scaled_w, scaled_h=scaled_h)


def scale_watermark(asset: WatermarkAsset, host_w: int, host_h: int, sl: float) -> WatermarkAsset:
    """Resample a watermark (bilinear) to its target size for the given host and scale."""
    spec = compute_scale(host_w, host_h, asset.width, asset.height, sl)
    if (spec.scaled_w, spec.scaled_h) == (asset.width, asset.height):
        return asset
    color = Image.fromarray(np.asarray(asset.image.pixels))
    resized = np.asarray(
        color.resize((spec.scaled_w, spec.scaled_h), resample=Image.BILINEAR), dtype=np.uint8
    )
    mask_img = Image.fromarray(np.asarray(asset.opacity_mask), mode="L")
    resized_mask = np.asarray(
        mask_img.resize((spec.scaled_w, spec.scaled_h), resample=Image.BILINEAR), dtype=np.uint8
    )
    return WatermarkAsset(image=RasterImage(resized), opacity_mask=resized_mask)


def composite(host: RasterImage, wm: WatermarkAsset, placement) -> RasterImage:
    """Alpha-blend a watermark over a host at ``placement`` (p, q, alpha).

    Inside the watermark rectangle each color channel becomes the nearest
    integer of ``(wm*a_eff + host*(255-a_eff)) / 255`` with the per-pixel
    effective alpha ``a_eff = alpha*mask/255``; outside it the host passes
    through untouched.  The host is never mutated.
    """
    p, q, alpha = int(placement.p), int(placement.q), int(placement.alpha)
    if not 0 <= alpha <= 255:
        raise ValueError(f"alpha must be in [0, 255], got {alpha}")
    if not (0 <= p <= host.width - wm.width and 0 <= q <= host.height - wm.height):
        raise ValueError(
            f"placement ({p}, {q}) puts {wm.width}x{wm.height} watermark outside "
            f"{host.width}x{host.height} host"
        )
    out = host.pixels.copy()
    region = out[q : q + wm.height, p : p + wm.width, :3].astype(np.int64)
    wm_rgb = wm.rgb.astype(np.int64)
    # per-pixel weight a = alpha*mask; exact blend num/(255*255), never a tie
    a = alpha * wm.opacity_mask.astype(np.int64)[:, :, None]
    num = wm_rgb * a + region * (_BLEND_DEN - a)
    blended = (2 * num + _BLEND_DEN) // (2 * _BLEND_DEN)
    out[q : q + wm.height, p : p + wm.width, :3] = blended.astype(np.uint8)
    return RasterImage(out)


def load_image(path: Union[str, Path]) -> RasterImage:
    """Load a PNG/PPM file as 8-bit RGB(A); grayscale inputs are promoted to RGB."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("RGB", "RGBA"):
                converted = img
            elif img.mode in ("LA", "PA", "RGBa"):
                converted = img.convert("RGBA")
            else:
                converted = img.convert("RGB")
            arr = np.asarray(converted, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return RasterImage(arr)


def save_image(image: RasterImage, path: Union[str, Path]) -> None:
    """Write an image losslessly; format chosen from the suffix (.png default, .ppm P6)."""
    path = Path(path)
    pil = Image.fromarray(np.asarray(image.pixels))
    try:
        if path.suffix.lower() == ".ppm":
            if image.channels != 3:
                pil = pil.convert("RGB")
            pil.save(path, format="PPM")
        else:
            pil.save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def encode_png(image: RasterImage) -> bytes:
    """PNG-encode an image in memory (used for hashing and the HTTP wire format)."""
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image.pixels)).save(buf, format="PNG")
    return buf.getvalue()
