"""Binary PPM (P6, 8-bit) reading and writing, plus signed-value display maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ropim.errors import FormatError


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by rounding; values outside are clipped."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[2] != 3:
        raise ValueError(f"PPM needs 1 or 3 channels, got {img.shape[2]}")
    return img


def write_ppm(path, image_u8: np.ndarray) -> Path:
    img = to_rgb(np.asarray(image_u8, dtype=np.uint8))
    H, W, _ = img.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PPM header")
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        W, H, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    if len(data) - pos < W * H * 3:
        raise FormatError(f"{path}: expected {W * H * 3} pixel bytes, got {len(data) - pos}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=W * H * 3, offset=pos)
    return pixels.reshape(H, W, 3)


def minmax_map(image: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-image affine map (v - vmin) / (vmax - vmin); a constant image maps to 0.5."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.full_like(img, 0.5), lo, hi
    return (img - lo) / (hi - lo), lo, hi
