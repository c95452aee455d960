"""COLMAP sparse-reconstruction parsing and writing.

Handles ``cameras``, ``images`` and ``points3D`` records in both the
little-endian binary layout and the whitespace-delimited text form used by
COLMAP. Only pinhole-style camera models are supported; 2D track
observations inside records are parsed and discarded.

All functions are pure transformations on byte payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SIMPLE_PINHOLE = 0
PINHOLE = 1

# model_id -> (name, param count)
_MODELS = {
    SIMPLE_PINHOLE: ("SIMPLE_PINHOLE", 3),
    PINHOLE: ("PINHOLE", 4),
}
_MODEL_NAMES = {name: mid for mid, (name, _) in _MODELS.items()}


class TruncatedInput(ValueError):
    """Payload ends before the declared record content does."""


class UnsupportedModel(ValueError):
    """Camera model outside the supported pinhole set."""


@dataclass
class CameraIntrinsics:
    camera_id: int
    model_id: int
    width: int
    height: int
    params: np.ndarray  # SIMPLE_PINHOLE: (f, cx, cy); PINHOLE: (fx, fy, cx, cy)

    def __post_init__(self):
        if self.model_id not in _MODELS:
            raise UnsupportedModel(f"camera model id {self.model_id}")
        self.params = np.asarray(self.params, dtype=np.float64)
        n_expected = _MODELS[self.model_id][1]
        if self.params.shape != (n_expected,):
            raise ValueError(
                f"{_MODELS[self.model_id][0]} expects {n_expected} params, "
                f"got {self.params.shape}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def fx(self) -> float:
        return float(self.params[0])

    @property
    def fy(self) -> float:
        return float(self.params[0] if self.model_id == SIMPLE_PINHOLE else self.params[1])

    @property
    def cx(self) -> float:
        return float(self.params[1] if self.model_id == SIMPLE_PINHOLE else self.params[2])

    @property
    def cy(self) -> float:
        return float(self.params[2] if self.model_id == SIMPLE_PINHOLE else self.params[3])


@dataclass
class CameraExtrinsics:
    """World-to-camera rotation (unit quaternion, w first) and translation."""

    qvec: np.ndarray
    tvec: np.ndarray

    def __post_init__(self):
        self.qvec = normalize_qvec(self.qvec)
        self.tvec = np.asarray(self.tvec, dtype=np.float64).reshape(3)

    def rotation_matrix(self) -> np.ndarray:
        return qvec_to_rotmat(self.qvec)


@dataclass
class SparsePoint:
    position: np.ndarray
    color: np.ndarray  # uint8 RGB
    error: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        color = np.asarray(self.color)
        if color.dtype != np.uint8:
            if np.any(color < 0) or np.any(color > 255):
                raise ValueError("point color components must be in [0, 255]")
            color = color.astype(np.uint8)
        self.color = color.reshape(3)
        self.error = float(self.error)


def normalize_qvec(qvec) -> np.ndarray:
    q = np.asarray(qvec, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("zero quaternion")
    return q / norm


def qvec_to_rotmat(qvec) -> np.ndarray:
    w, x, y, z = normalize_qvec(qvec)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_qvec(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`qvec_to_rotmat` (sign convention: w >= 0)."""
    m = np.asarray(rot, dtype=np.float64)
    k = np.array(
        [
            [m[0, 0] + m[1, 1] + m[2, 2], m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]],
            [m[2, 1] - m[1, 2], m[0, 0] - m[1, 1] - m[2, 2], m[1, 0] + m[0, 1], m[0, 2] + m[2, 0]],
            [m[0, 2] - m[2, 0], m[1, 0] + m[0, 1], m[1, 1] - m[0, 0] - m[2, 2], m[2, 1] + m[1, 2]],
            [m[1, 0] - m[0, 1], m[0, 2] + m[2, 0], m[2, 1] + m[1, 2], m[2, 2] - m[0, 0] - m[1, 1]],
        ]
    ) / 3.0
    vals, vecs = np.linalg.eigh(k)
    q = vecs[:, np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return normalize_qvec(q)


class _Cursor:
    """Sequential struct reader over a byte payload."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedInput(
                f"need {size} bytes at offset {self.pos}, "
                f"payload has {len(self.data)}"
            )
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def read_cstring(self) -> str:
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise TruncatedInput("unterminated string")
        out = self.data[self.pos:end].decode("utf-8")
        self.pos = end + 1
        return out


def _text_rows(data: bytes):
    for line in data.decode("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        yield line.split()


# ---------------------------------------------------------------------------
# cameras


def parse_cameras(data: bytes, fmt: str = "binary") -> list[CameraIntrinsics]:
    if fmt == "binary":
        cur = _Cursor(data)
        (count,) = cur.read("Q")
        out = []
        for _ in range(count):
            cam_id, model_id, width, height = cur.read("iiQQ")
            if model_id not in _MODELS:
                raise UnsupportedModel(f"camera model id {model_id}")
            n = _MODELS[model_id][1]
            params = cur.read("d" * n)
            out.append(CameraIntrinsics(cam_id, model_id, int(width), int(height), params))
        return out
    out = []
    for row in _text_rows(data):
        if len(row) < 4:
            raise TruncatedInput(f"incomplete camera row: {row}")
        cam_id, model_name, width, height = row[0], row[1], row[2], row[3]
        if model_name not in _MODEL_NAMES:
            raise UnsupportedModel(f"camera model {model_name!r}")
        model_id = _MODEL_NAMES[model_name]
        n = _MODELS[model_id][1]
        params = row[4:]
        if len(params) != n:
            raise TruncatedInput(f"{model_name} row with {len(params)} params")
        out.append(
            CameraIntrinsics(
                int(cam_id), model_id, int(width), int(height),
                [float(p) for p in params],
            )
        )
    return out


def write_cameras(cameras: list[CameraIntrinsics], fmt: str = "binary") -> bytes:
    if fmt == "binary":
        parts = [struct.pack("<Q", len(cameras))]
        for cam in cameras:
            parts.append(
                struct.pack("<iiQQ", cam.camera_id, cam.model_id, cam.width, cam.height)
            )
            parts.append(struct.pack("<" + "d" * len(cam.params), *cam.params))
        return b"".join(parts)
    lines = ["# Camera list with one line of data per camera:",
             "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cam in cameras:
        params = " ".join(repr(float(p)) for p in cam.params)
        lines.append(
            f"{cam.camera_id} {_MODELS[cam.model_id][0]} {cam.width} {cam.height} {params}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# images

ImageRecord = tuple[str, CameraExtrinsics, int]


def parse_images(data: bytes, fmt: str = "binary") -> list[ImageRecord]:
    """Returns (image_name, extrinsics, camera_id) per registered image.

    qvec is normalized on load; 2D observations are skipped over.
    """
    if fmt == "binary":
        cur = _Cursor(data)
        (count,) = cur.read("Q")
        out = []
        for _ in range(count):
            _image_id = cur.read("i")
            qvec = cur.read("dddd")
            tvec = cur.read("ddd")
            (camera_id,) = cur.read("i")
            name = cur.read_cstring()
            (n_points2d,) = cur.read("Q")
            cur.read("ddq" * n_points2d)  # x, y, point3D_id -- discarded
            out.append((name, CameraExtrinsics(qvec, tvec), camera_id))
        return out
    out = []
    rows = list(_text_rows(data))
    # images.txt carries two rows per image; the second (observations) may
    # be empty and then vanishes entirely under comment/blank stripping, so
    # detect record headers by field count and shape instead of position.
    i = 0
    while i < len(rows):
        row = rows[i]
        if len(row) < 10:
            raise TruncatedInput(f"incomplete image row: {row}")
        qvec = [float(v) for v in row[1:5]]
        tvec = [float(v) for v in row[5:8]]
        camera_id = int(row[8])
        name = row[9]
        i += 1
        if i < len(rows) and _looks_like_observations(rows[i]):
            i += 1
        out.append((name, CameraExtrinsics(qvec, tvec), camera_id))
    return out


def _looks_like_observations(row: list[str]) -> bool:
    if len(row) % 3 != 0:
        return False
    try:
        [float(v) for v in row]
    except ValueError:
        return False
    return True


def write_images(images: list[ImageRecord], fmt: str = "binary") -> bytes:
    """Writes records with empty observation lists (tracks are not kept)."""
    if fmt == "binary":
        parts = [struct.pack("<Q", len(images))]
        for idx, (name, ext, camera_id) in enumerate(images):
            parts.append(struct.pack("<i", idx + 1))
            parts.append(struct.pack("<dddd", *ext.qvec))
            parts.append(struct.pack("<ddd", *ext.tvec))
            parts.append(struct.pack("<i", camera_id))
            parts.append(name.encode("utf-8") + b"\x00")
            parts.append(struct.pack("<Q", 0))
        return b"".join(parts)
    lines = ["# Image list with two lines of data per image:",
             "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
             "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for idx, (name, ext, camera_id) in enumerate(images):
        pose = " ".join(repr(float(v)) for v in (*ext.qvec, *ext.tvec))
        lines.append(f"{idx + 1} {pose} {camera_id} {name}")
        lines.append("")
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# points3D


def parse_points3d(data: bytes, fmt: str = "binary") -> list[SparsePoint]:
    if fmt == "binary":
        cur = _Cursor(data)
        (count,) = cur.read("Q")
        out = []
        for _ in range(count):
            _point_id = cur.read("q")
            xyz = cur.read("ddd")
            rgb = cur.read("BBB")
            (error,) = cur.read("d")
            (track_len,) = cur.read("Q")
            cur.read("ii" * track_len)  # image_id, point2D_idx -- discarded
            out.append(SparsePoint(xyz, rgb, error))
        return out
    out = []
    for row in _text_rows(data):
        if len(row) < 8:
            raise TruncatedInput(f"incomplete point row: {row}")
        xyz = [float(v) for v in row[1:4]]
        rgb = [int(v) for v in row[4:7]]
        error = float(row[7])
        out.append(SparsePoint(xyz, rgb, error))
    return out


def write_points3d(points: list[SparsePoint], fmt: str = "binary") -> bytes:
    if fmt == "binary":
        parts = [struct.pack("<Q", len(points))]
        for idx, pt in enumerate(points):
            parts.append(struct.pack("<q", idx + 1))
            parts.append(struct.pack("<ddd", *pt.position))
            parts.append(struct.pack("<BBB", *pt.color))
            parts.append(struct.pack("<d", pt.error))
            parts.append(struct.pack("<Q", 0))
        return b"".join(parts)
    lines = ["# 3D point list with one line of data per point:",
             "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for idx, pt in enumerate(points):
        xyz = " ".join(repr(float(v)) for v in pt.position)
        rgb = " ".join(str(int(v)) for v in pt.color)
        lines.append(f"{idx + 1} {xyz} {rgb} {pt.error!r}")
    return ("\n".join(lines) + "\n").encode("utf-8")
