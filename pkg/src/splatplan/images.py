"""Image artifact emission: 8-bit PPM for color, raw little-endian float32
with a one-line text header for depth/completeness channels."""

from __future__ import annotations

import numpy as np

FLOAT_MAGIC = "floatimg"


def write_ppm(path, color: np.ndarray) -> None:
    """color: (H, W, 3) floats in [0, 1], written as binary P6."""
    h, w, _ = color.shape
    data = (np.clip(color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError("not a binary PPM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = (int(x) for x in line.split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_float_image(path, img: np.ndarray, channel: str) -> None:
    """img: (H, W) float array; header line carries width, height, channel name."""
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"{FLOAT_MAGIC} {w} {h} {channel}\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_float_image(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if header[0] != FLOAT_MAGIC:
            raise ValueError("not a float image file")
        w, h, channel = int(header[1]), int(header[2]), header[3]
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    return data.reshape(h, w).astype(np.float64), channel
