"""Image arrays, seeded random streams and image file I/O.

Images are float64 numpy arrays laid out channel-major as ``(CH, H, W)`` with
values in ``[0, 1]``.  Batches add a leading axis: ``(N, CH, H, W)``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

ImageTensor = np.ndarray
SeedLike = Union[int, np.random.Generator, None]

RAW_MAGIC = b"RTEN"
_RAW_HEADER = struct.Struct("<4sIII")
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded."""


def check_image(img, *, batched: bool = False) -> np.ndarray:
    """Validate an image (or batch) and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    ndim = 4 if batched else 3
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"zero-sized image dimensions {arr.shape}")
    return arr


def rng_stream(seed: SeedLike = None) -> np.random.Generator:
    """Deterministic generator for ``seed``.

    PCG64 produces the same stream on every platform for a given integer
    seed.  Passing an existing generator returns it unchanged so callers can
    thread one stream through several operations.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def child_seeds(seed: SeedLike, n: int) -> list[int]:
    """Split ``seed`` into ``n`` independent 63-bit child seeds."""
    rng = rng_stream(seed)
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)]


def clamp01(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("clamp01 received non-finite values")
    return np.clip(arr, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(clamp01(img) * 255.0).astype(np.uint8)


def write_raw(arr: np.ndarray, stream) -> None:
    """Write a 3-d array in raw-tensor format to a binary stream."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"raw tensors are 3-d, got shape {arr.shape}")
    stream.write(_RAW_HEADER.pack(RAW_MAGIC, *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raw(stream) -> np.ndarray:
    """Read one raw tensor from a binary stream."""
    header = stream.read(_RAW_HEADER.size)
    if len(header) != _RAW_HEADER.size:
        raise ImageFormatError("truncated raw-tensor header")
    magic, ch, h, w = _RAW_HEADER.unpack(header)
    if magic != RAW_MAGIC:
        raise ImageFormatError(f"bad raw-tensor magic {magic!r}")
    if 0 in (ch, h, w):
        raise ImageFormatError(f"zero-sized raw tensor ({ch}, {h}, {w})")
    nbytes = 4 * ch * h * w
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise ImageFormatError("truncated raw-tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(ch, h, w).astype(np.float64)


def load_image(path) -> ImageTensor:
    """Load a PNG or raw-tensor file as a ``(CH, H, W)`` array in [0, 1].

    The format is detected from the file's leading bytes, not its suffix.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
            fh.seek(0)
            if head[:4] == RAW_MAGIC:
                return read_raw(fh)
            if head != _PNG_SIGNATURE:
                raise ImageFormatError(f"{path}: unsupported image format")
            with Image.open(fh) as im:
                im.load()
                mode = im.mode
                if mode in ("L", "RGB"):
                    pixels = np.asarray(im)
                elif mode in ("RGBA", "P", "LA"):
                    pixels = np.asarray(im.convert("RGB"))
                else:
                    raise ImageFormatError(f"{path}: unsupported PNG mode {mode}")
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if 0 in pixels.shape:
        raise ImageFormatError(f"{path}: zero-sized image")
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(img: ImageTensor, path) -> None:
    """Write an image; ``.png`` gets 8-bit PNG, anything else raw-tensor."""
    arr = check_image(img)
    path = Path(path)
    if path.suffix.lower() == ".png":
        if arr.shape[0] not in (1, 3):
            raise ValueError("PNG output needs 1 or 3 channels")
        pixels = to_uint8(arr).transpose(1, 2, 0)
        if pixels.shape[2] == 1:
            pixels = pixels[:, :, 0]
        Image.fromarray(pixels).save(path, format="PNG")
    else:
        with open(path, "wb") as fh:
            write_raw(arr, fh)
