"""Dataset manifest loading and point-cloud scene initialization.

A dataset is a directory with a single JSON manifest holding relative paths:
per-frame image path, camera (4x4 world-to-camera + intrinsics), kinematic
state, optional ground-truth mask path; plus the initial point cloud path,
kinematic normalization ranges, jaw_max and the scene extent. Frames carry
no temporal order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .scene import (CameraPose, FrameRecord, KinematicState, Scene,
                    inverse_sigmoid, rgb_to_dc)
from .deform import InputNormalization
from .ply import load_point_ply
from ._util import read_json, write_json

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
INIT_OPACITY = 0.1
QUAT_NORM_TOL = 1e-6


@dataclass
class DatasetManifest:
    frames: list[dict]
    points_path: str
    kin_ranges: np.ndarray  # (8, 2) [lo, hi] per kinematic component
    jaw_max: float
    scene_extent: float
    mu_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mu_halfspan: float = 1.0
    root: Path = field(default_factory=Path)

    def normalization(self) -> InputNormalization:
        return InputNormalization.from_ranges(self.kin_ranges, self.mu_center,
                                              self.mu_halfspan)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "points_path": self.points_path,
            "scene_extent": float(self.scene_extent),
            "jaw_max": float(self.jaw_max),
            "kinematics_normalization": {
                "ranges": np.asarray(self.kin_ranges, dtype=float).tolist()},
            "mu_center": np.asarray(self.mu_center, dtype=float).tolist(),
            "mu_halfspan": float(self.mu_halfspan),
            "frames": self.frames,
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @staticmethod
    def from_dict(d: dict, root: Path) -> "DatasetManifest":
        ranges = np.asarray(d["kinematics_normalization"]["ranges"], dtype=np.float64)
        if ranges.shape != (8, 2):
            raise ValueError(f"kinematics ranges must be (8, 2), got {ranges.shape}")
        return DatasetManifest(
            frames=list(d["frames"]),
            points_path=d["points_path"],
            kin_ranges=ranges,
            jaw_max=float(d["jaw_max"]),
            scene_extent=float(d["scene_extent"]),
            mu_center=np.asarray(d.get("mu_center", [0, 0, 0]), dtype=np.float64),
            mu_halfspan=float(d.get("mu_halfspan", 1.0)),
            root=root,
        )


def _parse_frame(entry: dict, root: Path, require_image: bool = True) -> FrameRecord:
    name = entry.get("name", "<unnamed>")
    try:
        cam = CameraPose.from_dict(entry["camera"])
        kin_d = entry["kinematics"]
        q = np.asarray(kin_d["rotation"], dtype=np.float64)
        qn = float(np.linalg.norm(q))
        if qn < 1e-6:
            raise ValueError("zero-norm quaternion")
        if abs(qn - 1.0) > QUAT_NORM_TOL:
            log.warning("frame %s: quaternion norm %.6f, renormalizing", name, qn)
            q = q / qn
        kin = KinematicState(
            np.asarray(kin_d["translation"], dtype=np.float64), q,
            float(kin_d["jaw"]))
        vec = kin.as_vector()
        if not np.isfinite(vec).all() or not np.isfinite(cam.world_to_camera).all():
            raise ValueError("non-finite pose values")
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"frame {name!r}: {exc}") from exc

    image_path = root / entry["image_path"]
    if require_image and not image_path.is_file():
        raise FileNotFoundError(f"frame {name!r}: missing image {image_path}")
    mask_path = None
    if entry.get("mask_path"):
        mask_path = root / entry["mask_path"]
        if not mask_path.is_file():
            raise FileNotFoundError(f"frame {name!r}: missing mask {mask_path}")
    return FrameRecord(name, image_path, cam, kin, mask_path=mask_path)


def load_dataset(manifest_path):
    """-> (frames, (positions, colors), manifest). Validates every frame."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = DatasetManifest.from_dict(read_json(manifest_path), root)
    if not manifest.frames:
        raise ValueError("no frames")
    frames = [_parse_frame(entry, root) for entry in manifest.frames]
    points, colors = load_point_ply(root / manifest.points_path)
    if not np.isfinite(points).all():
        raise ValueError("point cloud contains non-finite positions")
    return frames, (points, colors), manifest


def init_scene(points: np.ndarray, colors: np.ndarray, extent: float) -> Scene:
    """One isotropic Gaussian per point.

    Scale is the log of the mean distance to the 3 nearest neighbors;
    opacity starts at 0.1, rotation at identity, color in the DC band only.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("empty point cloud")
    if n == 1:
        mean_dist = np.full(1, 0.1 * extent)
    else:
        k = min(3, n - 1)
        tree = cKDTree(points)
        dist, _ = tree.query(points, k=k + 1)  # first neighbor is the point itself
        mean_dist = dist[:, 1:].mean(axis=1)
    mean_dist = np.maximum(mean_dist, 1e-7)

    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    sh = np.zeros((n, 16, 3), dtype=np.float32)
    sh[:, 0, :] = rgb_to_dc(np.asarray(colors, dtype=np.float64))
    return Scene(
        mu=points.astype(np.float32),
        rot=rot,
        log_scale=np.log(mean_dist)[:, None].repeat(3, axis=1).astype(np.float32),
        opacity_logit=np.full(n, inverse_sigmoid(INIT_OPACITY), dtype=np.float32),
        sh_coeffs=sh,
        active_sh_degree=0,
        extent=float(extent),
    )
