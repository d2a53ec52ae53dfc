"""Synthetic desk-scale dataset generator.

The ground-truth scene is a Gaussian wall (background) plus an articulated
instrument built from three rigid clusters: an elongated shaft and two jaw
clusters hinged at a pivot. A kinematic state (translation, rotation, jaw
angle) moves the instrument rigidly; the jaws additionally rotate about the
hinge axis by +-jaw/2. Because the motion model is exact, per-frame
deformation deltas, segmentation masks, and instrument ids all come with the
dataset as oracles.

Everything is driven by one seeded generator, so a spec produces
byte-identical datasets on every run.
"""

from __future__ import annotations

import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import (CameraPose, FrameRecord, GaussianDeltas, KinematicState,
                    Scene, inverse_sigmoid, normalize_quaternion, quat_mul,
                    quat_to_rotmat, rgb_to_dc)
from .rasterizer import render
from .annotation import DEFAULT_RGB_THRESHOLD, mask_from_image
from .datasets import DatasetManifest
from .ply import save_gaussian_ply, save_point_ply
from ._util import atomic_write_bytes, write_json, read_json

log = logging.getLogger(__name__)


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    image_size: tuple = (96, 96)  # (width, height)
    n_frames: int = 60
    n_seen_eval: int = 12  # training states re-rendered from novel cameras
    n_unseen: int = 12
    n_annotation: int = 50
    # Background wall (box bounds per axis) and population.
    n_background: int = 800
    background_box: tuple = ((-1.8, 1.8), (-1.35, 1.35), (0.55, 0.85))
    # Instrument template: shaft along local -x, jaws opening about local z.
    n_shaft: int = 120
    n_jaw: int = 40  # per jaw cluster
    shaft_length: float = 0.9
    shaft_radius: float = 0.05
    jaw_length: float = 0.32
    # Pose trajectory ranges (sampled uniformly).
    translation_amp: tuple = (0.28, 0.18, 0.16)
    rotation_max: float = 0.45  # radians
    jaw_max: float = 0.6
    annotation_min_rotation: float = 0.2  # keeps delta-r above the classifier threshold
    extrapolate_frac: float = 0.10
    # Camera orbit.
    cam_radius: float = 2.4
    cam_azimuth_max: float = 0.95  # radians
    cam_elevation_max: float = 0.38
    focal: float = 110.0
    point_noise: float = 0.012  # jitter of the init point cloud

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["translation_amp"] = list(self.translation_amp)
        d["background_box"] = [list(b) for b in self.background_box]
        return d

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSceneSpec":
        spec = SyntheticSceneSpec()
        for key, value in d.items():
            if not hasattr(spec, key):
                raise ValueError(f"unknown synthetic spec key: {key!r}")
            setattr(spec, key, value)
        spec.image_size = tuple(spec.image_size)
        spec.translation_amp = tuple(spec.translation_amp)
        spec.background_box = tuple(tuple(b) for b in spec.background_box)
        return spec

    @staticmethod
    def from_file(path) -> "SyntheticSceneSpec":
        return SyntheticSceneSpec.from_dict(read_json(path))

    def save(self, path) -> None:
        write_json(path, self.to_dict())


@dataclass
class GroundTruth:
    """Canonical GT scene plus the exact rigid-motion model."""

    scene: Scene
    instrument_ids: np.ndarray  # (N,) bool
    local_mu: np.ndarray  # (N_instr, 3) positions in the instrument frame
    part: np.ndarray  # (N_instr,) 0 = shaft, 1 = jaw +, 2 = jaw -
    spec: SyntheticSceneSpec

    def deltas(self, kin: KinematicState) -> GaussianDeltas:
        return gt_deltas(self, kin)


class GTDeltaField:
    """Oracle stand-in for a trained deformation field (exact rigid model)."""

    def __init__(self, gt: GroundTruth):
        self.gt = gt

    def predict_deltas_batch(self, mu: np.ndarray, p: KinematicState) -> GaussianDeltas:
        if len(mu) != len(self.gt.scene):
            raise ValueError("oracle deltas exist only for the GT scene")
        return gt_deltas(self.gt, p)


def _jaw_quats(jaw_angle: float) -> tuple[np.ndarray, np.ndarray]:
    half = 0.5 * jaw_angle
    qp = np.array([np.cos(half / 2), 0.0, 0.0, np.sin(half / 2)])
    qm = np.array([np.cos(half / 2), 0.0, 0.0, -np.sin(half / 2)])
    return qp, qm


def gt_deltas(gt: GroundTruth, kin: KinematicState) -> GaussianDeltas:
    """Exact additive deltas realizing the instrument pose ``kin``.

    Shaft Gaussians move rigidly with the pose; jaw Gaussians first rotate
    about the hinge (local z through the pivot) by +-jaw/2. Scales never
    change. Quaternion deltas are plain component differences, chosen on the
    hemisphere of the canonical rotation so renormalization reproduces the
    target exactly.
    """
    n = len(gt.scene)
    deltas = GaussianDeltas.zeros(n, dtype=np.float32)
    idx = np.flatnonzero(gt.instrument_ids)
    q_pose = normalize_quaternion(kin.rotation)
    qp, qm = _jaw_quats(kin.jaw_angle)
    part_quat = {0: np.array([1.0, 0, 0, 0]), 1: qp, 2: qm}

    local = gt.local_mu.astype(np.float64)
    target_local = local.copy()
    for part_id in (1, 2):
        sel = gt.part == part_id
        rm = quat_to_rotmat(part_quat[part_id])
        target_local[sel] = local[sel] @ rm.T
    r_pose = quat_to_rotmat(q_pose)
    target_world = target_local @ r_pose.T + np.asarray(kin.translation, dtype=np.float64)
    deltas.d_mu[idx] = (target_world - gt.scene.mu[idx].astype(np.float64)).astype(np.float32)

    canon_q = gt.scene.rot[idx].astype(np.float64)
    for part_id in (0, 1, 2):
        sel = gt.part == part_id
        rows = idx[sel]
        q_total = quat_mul(q_pose, part_quat[part_id])
        target_q = quat_mul(np.broadcast_to(q_total, (rows.size, 4)), canon_q[sel])
        flip = np.sign(np.sum(target_q * canon_q[sel], axis=1))
        flip[flip == 0] = 1.0
        deltas.d_rot[rows] = ((target_q * flip[:, None]) - canon_q[sel]).astype(np.float32)
    return deltas


def build_gt(spec: SyntheticSceneSpec) -> GroundTruth:
    """Deterministic GT scene for a spec (row order: background, shaft, jaws)."""
    rng = np.random.default_rng(spec.seed)

    # Background wall: overlapping soft blobs with a smooth color field.
    nb = spec.n_background
    (x0, x1), (y0, y1), (z0, z1) = spec.background_box
    bg_mu = np.column_stack([
        rng.uniform(x0, x1, nb), rng.uniform(y0, y1, nb), rng.uniform(z0, z1, nb)])
    bg_scale = np.exp(rng.uniform(np.log(0.07), np.log(0.15), (nb, 1)))
    bg_ls = np.log(np.repeat(bg_scale, 3, axis=1) * rng.uniform(0.7, 1.3, (nb, 3)))
    axis = rng.standard_normal((nb, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0, np.pi, nb)
    bg_rot = np.column_stack([np.cos(ang / 2), np.sin(ang / 2)[:, None] * axis])
    base = np.array([0.55, 0.35, 0.28])
    bg_rgb = np.clip(
        base
        + 0.28 * np.sin(bg_mu[:, :1] * 2.2 + np.array([0.0, 2.1, 4.2]))
        + 0.18 * np.cos(bg_mu[:, 1:2] * 3.1 + np.array([1.0, 3.0, 5.0]))
        + rng.normal(0, 0.03, (nb, 3)),
        0.05, 0.95)
    bg_op = rng.uniform(0.75, 0.95, nb)

    # Shaft: elongated cluster along local -x, pivot at the origin.
    ns = spec.n_shaft
    sx = -rng.uniform(0.02, spec.shaft_length, ns)
    r = np.abs(rng.normal(0, spec.shaft_radius * 0.5, ns))
    phi = rng.uniform(0, 2 * np.pi, ns)
    shaft_local = np.column_stack([sx, r * np.cos(phi), r * np.sin(phi)])
    shaft_ls = np.log(np.column_stack([
        rng.uniform(0.035, 0.055, ns),
        rng.uniform(0.016, 0.026, ns),
        rng.uniform(0.016, 0.026, ns)]))
    shaft_rgb = np.clip(np.array([0.62, 0.66, 0.74]) + rng.normal(0, 0.04, (ns, 3)), 0, 1)

    # Two jaw clusters along +x, offset in +-y, tapering toward the tip.
    nj = spec.n_jaw
    jaw_parts = []
    for sign in (+1.0, -1.0):
        jx = rng.uniform(0.01, spec.jaw_length, nj)
        taper = 0.012 + 0.05 * (jx / spec.jaw_length)
        jy = sign * taper + rng.normal(0, 0.006, nj)
        jz = rng.normal(0, 0.008, nj)
        jaw_parts.append(np.column_stack([jx, jy, jz]))
    jaw_local = np.concatenate(jaw_parts)
    jaw_ls = np.log(np.column_stack([
        rng.uniform(0.022, 0.036, 2 * nj),
        rng.uniform(0.012, 0.02, 2 * nj),
        rng.uniform(0.012, 0.02, 2 * nj)]))
    jaw_rgb = np.clip(np.array([0.78, 0.68, 0.42]) + rng.normal(0, 0.05, (2 * nj, 3)), 0, 1)

    ni = ns + 2 * nj
    instr_local = np.concatenate([shaft_local, jaw_local])
    instr_ls = np.concatenate([shaft_ls, jaw_ls])
    instr_rgb = np.concatenate([shaft_rgb, jaw_rgb])
    instr_rot = np.zeros((ni, 4))
    instr_rot[:, 0] = 1.0
    instr_op = rng.uniform(0.88, 0.97, ni)
    part = np.concatenate([np.zeros(ns, int), np.ones(nj, int), np.full(nj, 2, int)])

    mu = np.concatenate([bg_mu, instr_local]).astype(np.float32)
    rot = np.concatenate([bg_rot, instr_rot]).astype(np.float32)
    ls = np.concatenate([bg_ls, instr_ls]).astype(np.float32)
    op = inverse_sigmoid(np.concatenate([bg_op, instr_op])).astype(np.float32)
    sh = np.zeros((nb + ni, 16, 3), dtype=np.float32)
    sh[:, 0, :] = rgb_to_dc(np.concatenate([bg_rgb, instr_rgb]))
    sh[:, 1:, :] = rng.normal(0, 0.01, (nb + ni, 15, 3))

    center = mu.mean(axis=0)
    extent = float(np.linalg.norm(mu - center, axis=1).max() * 1.05)
    scene = Scene(mu, rot, ls, op, sh, active_sh_degree=3, extent=extent)
    ids = np.zeros(nb + ni, dtype=bool)
    ids[nb:] = True
    return GroundTruth(scene, ids, instr_local, part, spec)


# --- sampling -------------------------------------------------------------------


def _random_quat(rng: np.random.Generator, max_angle: float,
                 min_angle: float = 0.0) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    mag = rng.uniform(min_angle, max_angle)
    angle = mag * (1.0 if rng.random() < 0.5 else -1.0)
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def sample_kinematics(spec: SyntheticSceneSpec, rng: np.random.Generator,
                      n: int, min_rotation: float = 0.0) -> list[KinematicState]:
    amp = np.asarray(spec.translation_amp)
    states = []
    for _ in range(n):
        t = rng.uniform(-amp, amp)
        q = _random_quat(rng, spec.rotation_max, min_rotation)
        jaw = rng.uniform(0.0, spec.jaw_max)
        states.append(KinematicState(t, q, jaw))
    return states


def _slerp(qa: np.ndarray, qb: np.ndarray, alpha: float) -> np.ndarray:
    qa = normalize_quaternion(qa)
    qb = normalize_quaternion(qb)
    if qa @ qb < 0:
        qb = -qb
    dot = np.clip(qa @ qb, -1.0, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-8:
        return normalize_quaternion(qa + alpha * (qb - qa))
    return (np.sin((1 - alpha) * theta) * qa + np.sin(alpha * theta) * qb) / np.sin(theta)


def _scale_state(kin: KinematicState, factor: float) -> KinematicState:
    q = normalize_quaternion(kin.rotation)
    angle = 2.0 * np.arctan2(np.linalg.norm(q[1:]), q[0])
    if abs(angle) < 1e-9:
        q_out = q
    else:
        axis = q[1:] / np.sin(angle / 2)
        half = factor * angle / 2
        q_out = np.array([np.cos(half), *(np.sin(half) * axis)])
    return KinematicState(np.asarray(kin.translation) * factor, q_out,
                          kin.jaw_angle * factor)


def unseen_states(spec: SyntheticSceneSpec, seen: list[KinematicState],
                  rng: np.random.Generator) -> list[KinematicState]:
    """Half interpolated between seen pairs, half 10%-extrapolated."""
    out = []
    n_interp = spec.n_unseen // 2
    for _ in range(n_interp):
        i, j = rng.choice(len(seen), size=2, replace=False)
        alpha = rng.uniform(0.3, 0.7)
        a, b = seen[i], seen[j]
        out.append(KinematicState(
            (1 - alpha) * np.asarray(a.translation) + alpha * np.asarray(b.translation),
            _slerp(a.rotation, b.rotation, alpha),
            (1 - alpha) * a.jaw_angle + alpha * b.jaw_angle))
    for _ in range(spec.n_unseen - n_interp):
        k = rng.integers(len(seen))
        out.append(_scale_state(seen[k], 1.0 + spec.extrapolate_frac))
    return out


def sample_camera(spec: SyntheticSceneSpec, rng: np.random.Generator) -> CameraPose:
    az = rng.uniform(-spec.cam_azimuth_max, spec.cam_azimuth_max)
    el = rng.uniform(-spec.cam_elevation_max, spec.cam_elevation_max)
    radius = spec.cam_radius * rng.uniform(0.92, 1.08)
    eye = np.array([
        radius * np.sin(az) * np.cos(el),
        radius * np.sin(el),
        -radius * np.cos(az) * np.cos(el)])
    target = rng.normal(0, 0.03, 3)
    w, h = spec.image_size
    return CameraPose.look_at(eye, target, np.array([0.0, 1.0, 0.0]),
                              spec.focal, spec.focal, w, h)


# --- dataset writing ---------------------------------------------------------------


def save_png(path, array_u8: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(array_u8).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def render_gt_frame(gt: GroundTruth, kin: KinematicState, cam: CameraPose):
    """(image float [0,1], instrument mask bool) for one GT state."""
    deltas = gt_deltas(gt, kin)
    image = np.clip(render(gt.scene, cam, deltas).image, 0.0, 1.0)
    idx = np.flatnonzero(gt.instrument_ids)
    instr = render(gt.scene.subset(idx), cam, deltas.subset(idx)).image
    mask = mask_from_image(instr, DEFAULT_RGB_THRESHOLD)
    return image, mask


def _kin_ranges(spec: SyntheticSceneSpec) -> np.ndarray:
    amp = spec.translation_amp
    rows = [[-a, a] for a in amp] + [[-1.0, 1.0]] * 4 + [[0.0, spec.jaw_max]]
    return np.asarray(rows, dtype=np.float64)


def _write_split(out: Path, gt: GroundTruth, name: str, states, cams,
                 manifest_name: str, spec: SyntheticSceneSpec) -> DatasetManifest:
    img_dir = out / name / "images"
    mask_dir = out / name / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for k, (kin, cam) in enumerate(zip(states, cams)):
        fname = f"{name}_{k:04d}"
        image, mask = render_gt_frame(gt, kin, cam)
        save_png(img_dir / f"{fname}.png", image_to_u8(image))
        save_png(mask_dir / f"{fname}.png", mask.astype(np.uint8) * 255)
        frames.append({
            "name": fname,
            "image_path": f"{name}/images/{fname}.png",
            "mask_path": f"{name}/masks/{fname}.png",
            "camera": cam.to_dict(),
            "kinematics": {
                "translation": np.asarray(kin.translation, dtype=float).tolist(),
                "rotation": normalize_quaternion(kin.rotation).tolist(),
                "jaw": float(kin.jaw_angle),
            },
        })
    center = gt.scene.mu.mean(axis=0)
    manifest = DatasetManifest(
        frames=frames, points_path="points.ply", kin_ranges=_kin_ranges(spec),
        jaw_max=spec.jaw_max, scene_extent=gt.scene.extent,
        mu_center=center.astype(np.float64), mu_halfspan=gt.scene.extent, root=out)
    manifest.save(out / manifest_name)
    return manifest


def generate_synthetic(spec: SyntheticSceneSpec, out_dir) -> dict:
    """Write the full dataset; returns the paths of everything created."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = build_gt(spec)
    rng = np.random.default_rng(spec.seed + 1)

    seen = sample_kinematics(spec, rng, spec.n_frames)
    seen_cams = [sample_camera(spec, rng) for _ in seen]
    _write_split(out, gt, "train", seen, seen_cams, "manifest.json", spec)

    # Held-out "seen" split: kinematic states the model trains on, viewed
    # from cameras it never sees.
    n_eval = min(spec.n_seen_eval, spec.n_frames)
    eval_states = [seen[int(i)] for i in
                   rng.choice(spec.n_frames, size=n_eval, replace=False)]
    eval_cams = [sample_camera(spec, rng) for _ in eval_states]
    if eval_states:
        _write_split(out, gt, "seen", eval_states, eval_cams, "manifest_seen.json", spec)

    unseen = unseen_states(spec, seen, rng) if spec.n_unseen else []
    unseen_cams = [sample_camera(spec, rng) for _ in unseen]
    if unseen:
        _write_split(out, gt, "unseen", unseen, unseen_cams, "manifest_unseen.json", spec)

    ann = sample_kinematics(spec, rng, spec.n_annotation,
                            min_rotation=spec.annotation_min_rotation)
    ann_cams = [sample_camera(spec, rng) for _ in ann]
    if ann:
        _write_split(out, gt, "annotation", ann, ann_cams, "manifest_annotation.json", spec)

    # Init point cloud: jittered canonical centers with DC colors.
    prng = np.random.default_rng(spec.seed + 2)
    pts = gt.scene.mu + prng.normal(0, spec.point_noise, gt.scene.mu.shape)
    colors = np.clip(gt.scene.sh_coeffs[:, 0, :] * 0.28209479177387814 + 0.5, 0, 1)
    save_point_ply(pts.astype(np.float32), colors, out / "points.ply")

    gt_dir = out / "gt"
    gt_dir.mkdir(exist_ok=True)
    save_gaussian_ply(gt.scene, gt_dir / "scene_gt.ply")
    write_json(gt_dir / "instrument_ids.json",
               {"instrument_indices": np.flatnonzero(gt.instrument_ids).tolist()})
    spec.save(out / "spec.json")
    log.info("synthetic dataset written to %s (%d train / %d seen-eval / %d unseen "
             "/ %d annotation)", out, spec.n_frames, n_eval, spec.n_unseen,
             spec.n_annotation)
    return {
        "manifest": out / "manifest.json",
        "manifest_seen": out / "manifest_seen.json" if eval_states else None,
        "manifest_unseen": out / "manifest_unseen.json" if unseen else None,
        "manifest_annotation": out / "manifest_annotation.json" if ann else None,
        "points": out / "points.ply",
        "gt_scene": gt_dir / "scene_gt.ply",
        "spec": out / "spec.json",
    }
