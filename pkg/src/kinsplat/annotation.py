"""Automatic instrument annotation: classification, masks, bounding boxes.

A Gaussian belongs to the instrument when the deformation field moves it:
the deltas for the queried state are compared against per-attribute
thresholds (position in world units, quaternion-delta norm, log-scale-delta
norm) and OR-combined. Rendering only those Gaussians over a black
background and thresholding pixel magnitude yields the segmentation mask;
boxes come from the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .scene import GaussianDeltas, KinematicState, Scene, CameraPose
from .rasterizer import render

DEFAULT_RGB_THRESHOLD = 10.0 / 255.0


@dataclass
class DeltaThresholds:
    """Per-attribute deformation magnitudes above which a Gaussian is "moving"."""

    h_mu: float  # world units
    h_r: float = 0.05  # quaternion-delta norm
    h_s: float = 0.05  # log-scale-delta norm

    def __post_init__(self):
        if self.h_mu < 0 or self.h_r < 0 or self.h_s < 0:
            raise ValueError("thresholds must be non-negative")

    @staticmethod
    def for_scene(scene: Scene) -> "DeltaThresholds":
        # Position threshold defaults to 5% of the scene extent.
        return DeltaThresholds(h_mu=0.05 * scene.extent)


@dataclass
class AnnotationOutput:
    mask: np.ndarray  # (H, W) bool
    contour_box: np.ndarray | None  # (4, 2) float corners (x, y), None if empty
    aabb: tuple[int, int, int, int] | None  # (x_min, y_min, x_max, y_max), inclusive

    @property
    def empty(self) -> bool:
        return self.aabb is None


def classify_instrument(deltas: GaussianDeltas, th: DeltaThresholds) -> np.ndarray:
    """Boolean instrument flag per Gaussian (OR over the three attribute tests)."""
    d_mu = np.linalg.norm(np.asarray(deltas.d_mu, dtype=np.float64), axis=1)
    d_r = np.linalg.norm(np.asarray(deltas.d_rot, dtype=np.float64), axis=1)
    d_s = np.linalg.norm(np.asarray(deltas.d_scale, dtype=np.float64), axis=1)
    return (d_mu > th.h_mu) | (d_r > th.h_r) | (d_s > th.h_s)


def mask_from_image(image: np.ndarray, rgb_threshold: float) -> np.ndarray:
    """Pixel is instrument when its max channel clears the threshold."""
    return np.clip(image, 0.0, 1.0).max(axis=2) > rgb_threshold


def extract_boxes(mask: np.ndarray):
    """(contour_box, aabb) from a binary mask; (None, None) when empty.

    The aabb covers every on-pixel: (x_min, y_min, x_max, y_max) inclusive.
    The contour box is the minimum-area rotated rectangle over the outer
    contour of the largest 8-connected component, as 4 (x, y) corners.
    """
    mask = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None, None
    aabb = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))

    m8 = mask.astype(np.uint8)
    n_labels, labels, stats, _ = cv2.connectedComponentsWithStats(m8, connectivity=8)
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    component = (labels == largest).astype(np.uint8)
    contours, _ = cv2.findContours(component, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    contour = max(contours, key=cv2.contourArea)
    rect = cv2.minAreaRect(contour)
    box = cv2.boxPoints(rect).astype(np.float64)
    return box, aabb


def render_mask(scene: Scene, field_, p: KinematicState, cam: CameraPose,
                th: DeltaThresholds | None = None,
                rgb_threshold: float = DEFAULT_RGB_THRESHOLD) -> AnnotationOutput:
    """Segment the instrument for one state/viewpoint.

    Renders only instrument-classified Gaussians over black and thresholds
    the result. A frame with no instrument Gaussians (or none visible)
    yields an all-zero mask and absent boxes.
    """
    th = th if th is not None else DeltaThresholds.for_scene(scene)
    deltas = field_.predict_deltas_batch(scene.mu, p)
    flags = classify_instrument(deltas, th)
    h, w = cam.height, cam.width
    if not flags.any():
        return AnnotationOutput(np.zeros((h, w), dtype=bool), None, None)
    idx = np.flatnonzero(flags)
    out = render(scene.subset(idx), cam, deltas.subset(idx))
    mask = mask_from_image(out.image, rgb_threshold)
    contour_box, aabb = extract_boxes(mask)
    return AnnotationOutput(mask, contour_box, aabb)


def aabb_to_xywh(aabb) -> list[int]:
    """Inclusive (x_min, y_min, x_max, y_max) -> [x, y, w, h] pixel counts."""
    x0, y0, x1, y1 = aabb
    return [int(x0), int(y0), int(x1 - x0 + 1), int(y1 - y0 + 1)]


def yolo_line(aabb, width: int, height: int, class_id: int = 0) -> str:
    """YOLO row: class cx cy w h, all normalized to image size."""
    x, y, w, h = aabb_to_xywh(aabb)
    cx = (x + w / 2.0) / width
    cy = (y + h / 2.0) / height
    return f"{class_id} {cx:.6f} {cy:.6f} {w / width:.6f} {h / height:.6f}"


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
