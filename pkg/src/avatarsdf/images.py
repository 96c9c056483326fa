"""Binary image files: 8-bit PPM (P6) for color and float PFM for depth."""

from __future__ import annotations

import numpy as np

from .errors import MalformedFileError


def save_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] (or uint8) as binary P6."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read binary P6 into an (H, W, 3) float array in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:  # magic, width, height, maxval
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        pos += 1  # single whitespace after maxval
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P6" or maxval != 255:
            raise ValueError(f"unsupported PPM variant {magic!r} maxval {maxval}")
        pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    except (ValueError, IndexError) as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_pfm(path, image: np.ndarray) -> None:
    """Write an (H, W) float array as little-endian grayscale PFM.

    PFM stores rows bottom-to-top; a negative scale marks little-endian.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise MalformedFileError("PFM writer expects a single-channel image")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(image[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise MalformedFileError(f"{path}: unsupported PFM magic {magic!r}")
        try:
            w, h = (int(v) for v in f.readline().split())
            scale = float(f.readline())
        except ValueError as exc:
            raise MalformedFileError(f"{path}: bad PFM header: {exc}") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype, count=w * h)
    return data.reshape(h, w)[::-1].astype(np.float64)
