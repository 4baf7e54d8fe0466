"""Binary PPM (P6, maxval 255) read/write for all imagery in the package."""

from __future__ import annotations

import numpy as np

from .errors import IoError


def to_u8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8 with round-half-even."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) image; float arrays in [0, 1] are quantized."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_u8(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise IoError(f"expected (H, W, 3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM into a uint8 array of shape (H, W, 3)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not raw.startswith(b"P6"):
        raise IoError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise IoError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise IoError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def u8_to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0
