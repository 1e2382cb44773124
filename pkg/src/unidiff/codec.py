"""Invertible pixel-shuffle latent codec, mask pooling, and image/latent file I/O.

The codec maps an ``(H, W, 3)`` image in ``[-1, 1]`` to an ``(H/s, W/s, 3*s*s)``
latent by moving every ``s x s x 3`` pixel block into the channel axis of one
latent cell (row-major within the block, then RGB). It is a pure rearrangement,
so ``decode(encode(x)) == x`` bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEFAULT_FACTOR = 2
LATENT_MAGIC = b"ULAT"


def latent_channels(factor: int = DEFAULT_FACTOR) -> int:
    return 3 * factor * factor


def encode(image: np.ndarray, factor: int = DEFAULT_FACTOR) -> np.ndarray:
    """Space-to-channel rearrangement. Accepts optional leading batch dims."""
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (..., H, W, 3) image, got shape {image.shape}")
    *lead, height, width, _ = image.shape
    if height % factor or width % factor:
        raise ValueError(f"image {height}x{width} not divisible by codec factor {factor}")
    h, w = height // factor, width // factor
    x = image.reshape(*lead, h, factor, w, factor, 3)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # (..., h, w, fy, fx, 3)
    return np.ascontiguousarray(x.reshape(*lead, h, w, 3 * factor * factor))


def decode(latent: np.ndarray, factor: int = DEFAULT_FACTOR) -> np.ndarray:
    latent = np.asarray(latent)
    if latent.ndim < 3:
        raise ValueError(f"expected (..., h, w, c) latent, got shape {latent.shape}")
    *lead, h, w, c = latent.shape
    if c != 3 * factor * factor:
        raise ValueError(f"latent has {c} channels, codec factor {factor} needs {3 * factor * factor}")
    x = latent.reshape(*lead, h, w, factor, factor, 3)
    n = len(lead)
    x = np.moveaxis(x, n + 1, n + 2)  # (..., h, fy, w, fx, 3)
    return np.ascontiguousarray(x.reshape(*lead, h * factor, w * factor, 3))


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average pool a binary pixel mask down to an ``(h, w)`` cell grid."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    height, width = mask.shape
    if h <= 0 or w <= 0 or height % h or width % w:
        raise ValueError(f"cannot pool {height}x{width} mask to {h}x{w} with an integer ratio")
    fy, fx = height // h, width // w
    pooled = mask.reshape(h, fy, w, fx).mean(axis=(1, 3))
    return pooled.astype(np.float32)


# -- image files ---------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((image + 1.0) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def _read_netpbm(path: Path, magic: bytes) -> tuple[int, int, bytes]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return width, height, data[pos + 1:]


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    if pixels.ndim != 3 or pixels.shape[-1] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {pixels.shape}")
    height, width, _ = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (width, height) + pixels.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    width, height, raster = _read_netpbm(Path(path), b"P6")
    pixels = np.frombuffer(raster[: width * height * 3], dtype=np.uint8).reshape(height, width, 3)
    return from_uint8(pixels)


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Masks are stored as 0/255 grayscale; any positive value counts as set."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"PGM needs a 2-D mask, got {mask.shape}")
    height, width = mask.shape
    pixels = np.where(mask > 0.5, 255, 0).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (width, height) + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    width, height, raster = _read_netpbm(Path(path), b"P5")
    pixels = np.frombuffer(raster[: width * height], dtype=np.uint8).reshape(height, width)
    return (pixels >= 128).astype(np.float32)


def write_latent(path: str | Path, latent: np.ndarray) -> None:
    latent = np.asarray(latent, dtype="<f4")
    if latent.ndim != 3:
        raise ValueError(f"latent must be (h, w, c), got {latent.shape}")
    h, w, c = latent.shape
    header = LATENT_MAGIC + struct.pack("<III", h, w, c)
    Path(path).write_bytes(header + latent.tobytes())


def read_latent(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != LATENT_MAGIC:
        raise ValueError(f"{path}: bad latent magic {data[:4]!r}")
    h, w, c = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != h * w * c:
        raise ValueError(f"{path}: header says {h}x{w}x{c} but body holds {body.size} floats")
    return body.reshape(h, w, c).astype(np.float32)
