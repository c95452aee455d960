"""Scene assembly: cameras with image associations, loaded from a COLMAP
directory layout (``sparse/0/{cameras,images,points3D}.{bin,txt}`` plus an
``images/`` folder). The held-out split follows the usual convention of
keeping every 8th image (by trajectory order) for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import colmap_io, image_io
from .colmap_io import CameraExtrinsics, CameraIntrinsics, SparsePoint


@dataclass
class Camera:
    """A posed pinhole camera tied to one training image."""

    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    name: str = ""

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        rot = self.extrinsics.rotation_matrix()
        return points @ rot.T + self.extrinsics.tvec

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        rot = self.extrinsics.rotation_matrix()
        return -rot.T @ self.extrinsics.tvec

    def with_pose(self, qvec, tvec) -> "Camera":
        return replace(self, extrinsics=CameraExtrinsics(qvec, tvec))


@dataclass
class Scene:
    cameras: list[Camera]            # trajectory order (lexicographic by name)
    points: list[SparsePoint]
    images: dict[str, np.ndarray]    # name -> HxWx3 float image, may be empty
    name: str = "scene"

    def split(self, holdout_every: int = 8) -> tuple[list[int], list[int]]:
        """Indices of (train, test) cameras; every k-th camera is held out."""
        test = [i for i in range(len(self.cameras)) if i % holdout_every == 0]
        train = [i for i in range(len(self.cameras)) if i % holdout_every != 0]
        if not train:  # tiny scenes: never let training go empty
            train, test = list(range(len(self.cameras))), []
        return train, test


def _read_record_file(sparse_dir: Path, stem: str) -> tuple[bytes, str]:
    for suffix, fmt in ((".bin", "binary"), (".txt", "text")):
        path = sparse_dir / f"{stem}{suffix}"
        if path.exists():
            return path.read_bytes(), fmt
    raise FileNotFoundError(f"{sparse_dir} has no {stem}.bin or {stem}.txt")


def load_scene(scene_dir, load_images: bool = True) -> Scene:
    """Load a COLMAP-convention scene directory."""
    scene_dir = Path(scene_dir)
    sparse_dir = scene_dir / "sparse" / "0"
    if not sparse_dir.is_dir():
        raise FileNotFoundError(f"{scene_dir} has no sparse/0 reconstruction")

    cam_payload, cam_fmt = _read_record_file(sparse_dir, "cameras")
    intrinsics = {c.camera_id: c for c in colmap_io.parse_cameras(cam_payload, cam_fmt)}
    img_payload, img_fmt = _read_record_file(sparse_dir, "images")
    records = colmap_io.parse_images(img_payload, img_fmt)
    pts_payload, pts_fmt = _read_record_file(sparse_dir, "points3D")
    points = colmap_io.parse_points3d(pts_payload, pts_fmt)

    cameras = []
    for name, extr, camera_id in records:
        if camera_id not in intrinsics:
            raise ValueError(f"image {name!r} references unknown camera {camera_id}")
        cameras.append(Camera(intrinsics[camera_id], extr, name))
    cameras.sort(key=lambda c: c.name)

    images: dict[str, np.ndarray] = {}
    if load_images:
        image_dir = scene_dir / "images"
        for cam in cameras:
            path = image_dir / cam.name
            if path.exists():
                images[cam.name] = image_io.load_image(path)
    return Scene(cameras, points, images, name=scene_dir.name)


def write_scene(scene: Scene, scene_dir, fmt: str = "binary") -> None:
    """Write a scene back out in the COLMAP directory convention."""
    scene_dir = Path(scene_dir)
    sparse_dir = scene_dir / "sparse" / "0"
    sparse_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".bin" if fmt == "binary" else ".txt"

    unique = {}
    for cam in scene.cameras:
        unique[cam.intrinsics.camera_id] = cam.intrinsics
    (sparse_dir / f"cameras{suffix}").write_bytes(
        colmap_io.write_cameras(list(unique.values()), fmt))
    records = [(c.name, c.extrinsics, c.intrinsics.camera_id) for c in scene.cameras]
    (sparse_dir / f"images{suffix}").write_bytes(colmap_io.write_images(records, fmt))
    (sparse_dir / f"points3D{suffix}").write_bytes(
        colmap_io.write_points3d(scene.points, fmt))

    if scene.images:
        image_dir = scene_dir / "images"
        image_dir.mkdir(exist_ok=True)
        for name, img in scene.images.items():
            image_io.save_image(img, image_dir / name)
