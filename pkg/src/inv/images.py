"""RGB float images, PSNR, binary PPM I/O and a few comparison measures."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptData, InvalidArgument

PSNR_CAP = 99.0


@dataclass
class Image:
    pixels: np.ndarray  # (height, width, 3) float32 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidArgument(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise InvalidArgument("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1, 3)

    def __eq__(self, other):
        return isinstance(other, Image) and self.pixels.shape == other.pixels.shape and (
            self.pixels.tobytes() == other.pixels.tobytes()
        )


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img)


def psnr(a, b) -> float:
    """PSNR in dB for [0, 1] images; identical inputs report the 99 dB cap."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise InvalidArgument(f"image sizes differ: {pa.shape} vs {pb.shape}")
    mse = float(np.mean(np.square(pa.astype(np.float64) - pb.astype(np.float64))))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def to_bytes8(img: Image) -> np.ndarray:
    # round half up
    return np.floor(img.pixels.astype(np.float64) * 255 + 0.5).astype(np.uint8)


def encode_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + to_bytes8(img).tobytes()


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise CorruptData("malformed PPM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def decode_ppm(data: bytes) -> Image:
    if data[:2] != b"P6":
        raise CorruptData("not a binary PPM (P6) file")
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    if maxval != 255:
        raise CorruptData(f"only maxval 255 is supported, got {maxval}")
    raster = data[pos : pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise CorruptData("PPM raster is truncated")
    pix = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return Image(pix.astype(np.float32) / 255)


def write_ppm(img: Image, path: str | Path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path: str | Path) -> Image:
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# color / structure comparison


def histogram_distance(a, b, bins: int = 16) -> float:
    """Mean over channels of the L1 distance between normalized per-channel histograms."""
    pa, pb = _pixels(a).reshape(-1, 3), _pixels(b).reshape(-1, 3)
    total = 0.0
    for c in range(3):
        ha, _ = np.histogram(pa[:, c], bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(pb[:, c], bins=bins, range=(0.0, 1.0))
        total += np.abs(ha / ha.sum() - hb / hb.sum()).sum()
    return float(total / 3)


def luminance(img) -> np.ndarray:
    p = _pixels(img).astype(np.float64)
    return p[..., 0] * 0.299 + p[..., 1] * 0.587 + p[..., 2] * 0.114


def sobel_edges(img) -> np.ndarray:
    """3x3 Sobel gradient magnitude of luminance, edge-replicated borders."""
    g = np.pad(luminance(img), 1, mode="edge")
    gx = (g[:-2, 2:] + 2 * g[1:-1, 2:] + g[2:, 2:]) - (g[:-2, :-2] + 2 * g[1:-1, :-2] + g[2:, :-2])
    gy = (g[2:, :-2] + 2 * g[2:, 1:-1] + g[2:, 2:]) - (g[:-2, :-2] + 2 * g[:-2, 1:-1] + g[:-2, 2:])
    return np.hypot(gx, gy)


def edge_correlation(a, b) -> float:
    """Pearson correlation between the Sobel edge maps of two images."""
    ea, eb = sobel_edges(a).ravel(), sobel_edges(b).ravel()
    ea = ea - ea.mean()
    eb = eb - eb.mean()
    denom = math.sqrt(float(ea @ ea) * float(eb @ eb))
    return float(ea @ eb / denom) if denom > 0 else 0.0
