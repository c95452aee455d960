"""8-bit RGB image files and the base64 transport form.

Images live in memory as float64 H*W*3 arrays in [0, 1] ("ImageBuffer").
On disk they are PNG; quantization is round(255*x) with clamping, so a
float -> file -> float round trip never moves a channel by more than 1/510.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def to_uint8(buf: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] float image to uint8 via round(255*x), clamped."""
    arr = np.asarray(buf, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """Lift uint8 pixels back to float64 in [0, 1]."""
    return np.asarray(arr, dtype=np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Load an image file as a float64 H*W*3 array in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return from_uint8(np.asarray(rgb))


def save_image(buf: np.ndarray, path) -> None:
    """Save a [0,1] float image as an 8-bit RGB PNG (or format by suffix)."""
    Image.fromarray(to_uint8(buf), mode="RGB").save(path)


def encode_png(buf: np.ndarray) -> bytes:
    """Encode a [0,1] float image as PNG bytes."""
    out = io.BytesIO()
    Image.fromarray(to_uint8(buf), mode="RGB").save(out, format="PNG")
    return out.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def to_b64(buf: np.ndarray) -> str:
    """PNG-encode an image and wrap it in standard padded base64."""
    return base64.b64encode(encode_png(buf)).decode("ascii")


def from_b64(data: str) -> np.ndarray:
    """Inverse of :func:`to_b64`. Raises ``ValueError`` on malformed input."""
    try:
        raw = base64.b64decode(data, validate=True)
        return decode_png(raw)
    except Exception as exc:
        raise ValueError(f"not a base64-encoded image: {exc}") from exc


def resize(buf: np.ndarray, width: int, height: int,
           method: str = "bilinear") -> np.ndarray:
    """Resample a float image to (height, width) without quantizing.

    Each channel is resized as a 32-bit float plane ("bilinear" or
    "bicubic"), so repeated rescaling does not accumulate 8-bit rounding.
    """
    filters = {"bilinear": Image.BILINEAR, "bicubic": Image.BICUBIC}
    if method not in filters:
        raise ValueError(f"unknown resize method: {method!r}")
    arr = np.asarray(buf, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    planes = []
    for ch in range(arr.shape[2]):
        plane = Image.fromarray(arr[:, :, ch].astype(np.float32), mode="F")
        planes.append(np.asarray(plane.resize((width, height), filters[method]),
                                 dtype=np.float64))
    out = np.stack(planes, axis=2)
    return out[:, :, 0] if squeeze else out
