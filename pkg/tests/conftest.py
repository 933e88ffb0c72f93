import numpy as np
import pytest

from advmark.imaging import RasterImage, WatermarkAsset


@pytest.fixture
def mid_gray_host():
    return RasterImage.full(32, 32, 128)


@pytest.fixture
def black_watermark():
    """8x8 fully opaque black square."""
    return WatermarkAsset.from_image(RasterImage.full(8, 8, (0, 0, 0, 255)))


def noise_host(seed: int, size: int = 32, spread: int = 20) -> RasterImage:
    """Mid-gray host with seeded uniform pixel noise."""
    rng = np.random.default_rng(seed)
    pixels = 128 + rng.integers(-spread, spread + 1, size=(size, size, 3))
    return RasterImage(pixels.astype(np.uint8))


def random_image(seed: int, width: int = 16, height: int = 16, channels: int = 3) -> RasterImage:
    rng = np.random.default_rng(seed)
    return RasterImage(rng.integers(0, 256, size=(height, width, channels)).astype(np.uint8))
