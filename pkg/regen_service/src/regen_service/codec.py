"""Base64/PNG codec for the wire protocol.

Images travel as standard padded base64 of an 8-bit RGB image file.  The
decoder is strict: invalid base64 or bytes that are not a decodable image
raise ``ValueError`` so the HTTP layer can map them to a 400.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def decode_image_b64(data: str) -> np.ndarray:
    """Base64 image file -> (H, W, 3) uint8 array; ValueError if malformed."""
    if not isinstance(data, str):
        raise ValueError("image_b64 must be a string")
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ValueError(f"not a base64-encoded image: {exc}") from exc


def encode_image_b64(image: np.ndarray) -> str:
    """(H, W, 3) uint8 array -> base64 PNG file."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) uint8 image")
    out = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(out, format="PNG")
    return base64.b64encode(out.getvalue()).decode("ascii")
