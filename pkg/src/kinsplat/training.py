"""Two-phase training loop: loss, optimizer, density control, schedules.

Phase one runs coarse density-control settings with kinematics-noise
compensation and a capped SH degree; once reconstruction quality triggers
(running PSNR above threshold while the loss keeps declining) the run latches
into phase two with tighter settings, no compensation, growing SH degree and
random frame order. The inverse (loosening) schedule is deliberately allowed
to run — it is an ablation configuration — so config validation warns instead
of raising when the tightening direction is violated.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .scene import GaussianDeltas, Phase, Scene, inverse_sigmoid, normalize_quaternion, quat_to_rotmat
from .rasterizer import render_forward, backward_from_cache
from .metrics import psnr, ssim_with_grad
from .deform import DeformationField, save_field
from .ply import save_gaussian_ply
from ._util import write_json, read_json

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

PRUNE_OPACITY = 0.005
RESET_OPACITY = 0.01
CLONE_EXTENT_FRAC = 0.01
SPLIT_SCALE_FACTOR = 1.6
MAX_SH_DEGREE = 3


# --- configuration ------------------------------------------------------------


@dataclass
class PhaseParams:
    """Density-control cadence for one phase."""

    P_di: int  # densification interval, iterations
    P_oi: int  # opacity reset interval, iterations
    tau_pos: float  # mean screen-space gradient threshold


@dataclass
class CompensationParams:
    sigma: float = 0.01
    beta: float = 1.0


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3
    field: float = 1e-3  # halved at the phase transition


@dataclass
class ScheduleConfig:
    phase1: PhaseParams = field(default_factory=lambda: PhaseParams(500, 10000, 0.0004))
    phase2: PhaseParams = field(default_factory=lambda: PhaseParams(200, 3000, 0.0002))
    psnr_trigger: float = 20.0
    loss_decline_window: int = 500
    sh_phase1_max_degree: int = 0
    sh_growth_interval: int = 1000
    compensation: CompensationParams = field(default_factory=CompensationParams)
    lambda_dssim: float = 0.1
    max_iters: int = 20000
    # Operational knobs (not part of the two-phase contract).
    densify_start: int = 500
    densify_stop: int = 15000
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    lr: LearningRates = field(default_factory=LearningRates)

    def validate(self) -> None:
        for pp in (self.phase1, self.phase2):
            if pp.P_di < 1 or pp.P_oi < 1:
                raise ValueError("phase intervals must be >= 1 iteration")
            if pp.tau_pos <= 0:
                raise ValueError("tau_pos must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must be in [0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.loss_decline_window < 2:
            raise ValueError("loss_decline_window must be >= 2")
        if self.sh_growth_interval < 1:
            raise ValueError("sh_growth_interval must be >= 1")
        # Tightening direction is the intended regime but the inverse
        # schedule is a supported ablation, so only warn.
        if not (self.phase2.P_di < self.phase1.P_di
                and self.phase2.P_oi < self.phase1.P_oi
                and self.phase2.tau_pos < self.phase1.tau_pos):
            log.warning("phase2 parameters are not strictly tighter than phase1 "
                        "(inverse-schedule ablation?)")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ScheduleConfig":
        cfg = ScheduleConfig()
        d = dict(d)
        for key in ("phase1", "phase2"):
            if key in d:
                setattr(cfg, key, PhaseParams(**d.pop(key)))
        if "compensation" in d:
            cfg.compensation = CompensationParams(**d.pop("compensation"))
        if "lr" in d:
            cfg.lr = LearningRates(**d.pop("lr"))
        for key, value in d.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key: {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @staticmethod
    def from_file(path) -> "ScheduleConfig":
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        return ScheduleConfig.from_dict(data)

    def apply_overrides(self, overrides: dict) -> None:
        """Apply dotted-key overrides, e.g. {"phase1.P_di": 300}."""
        for dotted, value in overrides.items():
            obj = self
            *parents, leaf = dotted.split(".")
            for name in parents:
                obj = getattr(obj, name)
            if not hasattr(obj, leaf):
                raise ValueError(f"unknown config key: {dotted!r}")
            current = getattr(obj, leaf)
            setattr(obj, leaf, type(current)(value) if current is not None else value)
        self.validate()


# --- train state ---------------------------------------------------------------


class TrainState:
    """Iteration counter, latched phase, and trigger histories."""

    def __init__(self, window: int, rng_seed: int = 0):
        self.iteration = 0
        self.phase = Phase.ONE
        self.loss_history: deque = deque(maxlen=window)
        self.psnr_history: deque = deque(maxlen=window)
        self.rng_seed = rng_seed
        self.transition_iteration: int | None = None
        self.last_metrics: dict = {}

    def record(self, loss_value: float, psnr_value: float) -> None:
        self.loss_history.append(float(loss_value))
        self.psnr_history.append(float(psnr_value))

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "phase": int(self.phase),
            "loss_history": list(self.loss_history),
            "psnr_history": list(self.psnr_history),
            "rng_seed": self.rng_seed,
            "transition_iteration": self.transition_iteration,
        }

    @staticmethod
    def from_dict(d: dict, window: int) -> "TrainState":
        st = TrainState(window, rng_seed=d.get("rng_seed", 0))
        st.iteration = int(d["iteration"])
        st.phase = Phase(int(d["phase"]))
        st.loss_history.extend(d.get("loss_history", []))
        st.psnr_history.extend(d.get("psnr_history", []))
        st.transition_iteration = d.get("transition_iteration")
        return st

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @staticmethod
    def load(path, window: int) -> "TrainState":
        return TrainState.from_dict(read_json(path), window)


# --- loss ----------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray  # d loss / d rendered, same shape as the image
    l1: float
    dssim: float


def loss(rendered: np.ndarray, gt: np.ndarray, lam: float) -> LossResult:
    """(1-lam) * L1 + lam * D-SSIM with the analytic image gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"image shape mismatch: {rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    mssim, g_ssim = ssim_with_grad(rendered, gt)
    ds = (1.0 - mssim) / 2.0
    total = (1.0 - lam) * l1 + lam * ds
    grad = (1.0 - lam) * g_l1 - (lam * 0.5) * g_ssim
    return LossResult(total, grad, l1, ds)


# --- optimizer -------------------------------------------------------------------


class Adam:
    """Adam with named parameters, in-place updates, and row remapping.

    Scene parameter rows move around under densify/prune; ``remap_rows``
    carries first-moment state along for surviving Gaussians and starts new
    ones from zero.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        st = self.state.get(name)
        if st is None or st["m"].shape != param.shape:
            st = {"m": np.zeros_like(param, dtype=np.float64),
                  "v": np.zeros_like(param, dtype=np.float64), "t": 0}
            self.state[name] = st
        g = np.asarray(grad, dtype=np.float64)
        st["t"] += 1
        st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
        st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
        m_hat = st["m"] / (1 - self.beta1 ** st["t"])
        v_hat = st["v"] / (1 - self.beta2 ** st["t"])
        param -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype)

    def remap_rows(self, names, old_indices: np.ndarray, new_n: int) -> None:
        keep = old_indices >= 0
        src = old_indices[keep]
        for name in names:
            st = self.state.get(name)
            if st is None:
                continue
            for key in ("m", "v"):
                old = st[key]
                fresh = np.zeros((new_n,) + old.shape[1:], dtype=old.dtype)
                fresh[keep] = old[src]
                st[key] = fresh


SCENE_PARAM_NAMES = ("mu", "rot", "log_scale", "opacity_logit", "sh_coeffs")


def position_lr_at(cfg: ScheduleConfig, iteration: int) -> float:
    if cfg.lr.position_init <= 0.0:
        return 0.0
    t = min(max(iteration, 0), cfg.max_iters) / cfg.max_iters
    return float(cfg.lr.position_init * (cfg.lr.position_final / cfg.lr.position_init) ** t)


def learning_rates_at(cfg: ScheduleConfig, state: TrainState) -> dict:
    field_lr = cfg.lr.field * (0.5 if state.phase == Phase.TWO else 1.0)
    return {
        "mu": position_lr_at(cfg, state.iteration),
        "rot": cfg.lr.rotation,
        "log_scale": cfg.lr.scale,
        "opacity_logit": cfg.lr.opacity,
        "sh_coeffs": cfg.lr.sh,
        "field": field_lr,
    }


# --- schedule operations ----------------------------------------------------------


def check_phase_transition(state: TrainState, cfg: ScheduleConfig) -> Phase:
    """PhaseTwo once median PSNR clears the trigger while loss still declines."""
    if state.phase == Phase.TWO:
        return Phase.TWO  # latched
    window = cfg.loss_decline_window
    if len(state.loss_history) < window or len(state.psnr_history) < window:
        return Phase.ONE
    if float(np.median(state.psnr_history)) <= cfg.psnr_trigger:
        return Phase.ONE
    ys = np.asarray(state.loss_history, dtype=np.float64)
    xs = np.arange(ys.size, dtype=np.float64)
    slope = np.polyfit(xs, ys, 1)[0]
    return Phase.TWO if slope < 0 else Phase.ONE


def apply_compensation(p_encoded: np.ndarray, state: TrainState, cfg: ScheduleConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise to the encoded kinematics in phase one.

    Phase two (or beta = 0) returns the input object unchanged — exact
    identity, no RNG draw.
    """
    t_phase = 1.0 if state.phase == Phase.ONE else 0.0
    scale = cfg.compensation.beta * t_phase
    if scale == 0.0:
        return p_encoded
    noise = rng.normal(0.0, cfg.compensation.sigma, size=np.shape(p_encoded))
    return p_encoded + scale * noise.astype(p_encoded.dtype)


def sh_degree_schedule(state: TrainState, cfg: ScheduleConfig) -> int:
    """Capped in phase one; +1 per growth interval after the transition."""
    base = min(cfg.sh_phase1_max_degree, MAX_SH_DEGREE)
    if state.phase == Phase.ONE or state.transition_iteration is None:
        return base
    grown = (state.iteration - state.transition_iteration) // cfg.sh_growth_interval
    return min(MAX_SH_DEGREE, base + int(grown))


def reset_opacity(scene: Scene) -> Scene:
    """Clamp every realized opacity to at most the reset floor."""
    floor = np.float32(inverse_sigmoid(RESET_OPACITY))
    np.minimum(scene.opacity_logit, floor, out=scene.opacity_logit)
    return scene


def _kin_embedding(frames, norm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized (translation, quaternion, jaw) components per frame."""
    t = np.stack([f.kinematics.translation for f in frames]).astype(np.float64)
    q = np.stack([normalize_quaternion(f.kinematics.rotation) for f in frames])
    j = np.asarray([f.kinematics.jaw_angle for f in frames], dtype=np.float64)
    if norm is not None:
        t = (t - norm.kin_center[:3]) / norm.kin_halfspan[:3]
        j = (j - norm.kin_center[7]) / norm.kin_halfspan[7]
    return t, q, j


def _state_distance(t, q, j, a: int, b: int) -> float:
    geo = 2.0 * np.arccos(min(1.0, abs(float(q[a] @ q[b]))))
    return float(np.linalg.norm(t[a] - t[b]) + geo + abs(j[a] - j[b]))


def curriculum_order(frames, phase: Phase, norm=None,
                     rng: np.random.Generator | None = None) -> list[int]:
    """Frame visit order: smooth kinematic tour in phase one, shuffle in two.

    The phase-one tour is a greedy nearest-neighbor path over the normalized
    state space (translation, rotation geodesic, jaw), started at the state
    farthest from the centroid so the path sweeps the motion range instead of
    starting in the middle.
    """
    n = len(frames)
    if n == 0:
        raise ValueError("curriculum_order needs at least one frame")
    if phase == Phase.TWO:
        rng = rng if rng is not None else np.random.default_rng(0)
        return list(rng.permutation(n))
    if n == 1:
        return [0]
    t, q, j = _kin_embedding(frames, norm)
    # Hemisphere-align quaternions before averaging (q and -q coincide).
    q = q * np.where(q @ q[0] < 0, -1.0, 1.0)[:, None]
    emb = np.concatenate([t, q, j[:, None]], axis=1)
    start = int(np.argmax(np.linalg.norm(emb - emb.mean(axis=0), axis=1)))
    order = [start]
    remaining = set(range(n)) - {start}
    while remaining:
        here = order[-1]
        nxt = min(remaining, key=lambda k: (_state_distance(t, q, j, here, k), k))
        order.append(nxt)
        remaining.remove(nxt)
    return order


# --- density control ----------------------------------------------------------------


def densify_and_prune_ex(scene: Scene, cfg: ScheduleConfig, phase: Phase,
                         rng: np.random.Generator):
    """Clone/split over-gradient Gaussians, prune transparent ones.

    Returns (new_scene, old_indices) where old_indices[i] is the source row
    of new row i, or -1 for freshly created Gaussians (clone copies and split
    samples) — the optimizer uses this to carry its moments along.
    """
    pp = cfg.phase1 if phase == Phase.ONE else cfg.phase2
    n = len(scene)
    counts = np.maximum(scene.grad_count, 1)
    mean_grad = scene.grad_accum / counts
    candidate = (mean_grad > pp.tau_pos) & (scene.grad_count > 0)

    scales = scene.scales()
    max_scale = scales.max(axis=1)
    prune = scene.opacities() < PRUNE_OPACITY
    eligible = candidate & ~prune
    clone = eligible & (max_scale < CLONE_EXTENT_FRAC * scene.extent)
    split = eligible & ~clone
    survivors = ~(prune | split)

    surv_idx = np.flatnonzero(survivors)
    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)

    parts_mu = [scene.mu[surv_idx]]
    parts_rot = [scene.rot[surv_idx]]
    parts_ls = [scene.log_scale[surv_idx]]
    parts_op = [scene.opacity_logit[surv_idx]]
    parts_sh = [scene.sh_coeffs[surv_idx]]

    if clone_idx.size:
        dirs = scene.grad_dir[clone_idx].astype(np.float64)
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
        # Offset by the source's own footprint so the copy lands adjacent.
        offset = dirs * max_scale[clone_idx, None]
        parts_mu.append((scene.mu[clone_idx] + offset).astype(np.float32))
        parts_rot.append(scene.rot[clone_idx].copy())
        parts_ls.append(scene.log_scale[clone_idx].copy())
        parts_op.append(scene.opacity_logit[clone_idx].copy())
        parts_sh.append(scene.sh_coeffs[clone_idx].copy())

    if split_idx.size:
        for i in split_idx:
            q = normalize_quaternion(scene.rot[i].astype(np.float64))
            rm = quat_to_rotmat(q)
            s = np.exp(scene.log_scale[i].astype(np.float64))
            z = rng.standard_normal((2, 3))
            samples = scene.mu[i] + (z * s) @ rm.T
            parts_mu.append(samples.astype(np.float32))
            parts_rot.append(np.repeat(scene.rot[i][None], 2, axis=0))
            parts_ls.append(np.repeat(
                (scene.log_scale[i] - np.float32(np.log(SPLIT_SCALE_FACTOR)))[None], 2, axis=0))
            parts_op.append(np.repeat(scene.opacity_logit[i][None], 2, axis=0))
            parts_sh.append(np.repeat(scene.sh_coeffs[i][None], 2, axis=0))

    new_scene = Scene(
        np.concatenate(parts_mu), np.concatenate(parts_rot), np.concatenate(parts_ls),
        np.concatenate(parts_op), np.concatenate(parts_sh),
        active_sh_degree=scene.active_sh_degree, extent=scene.extent,
    )
    new_scene.reset_grad_stats()
    n_new = clone_idx.size + 2 * split_idx.size
    old_indices = np.concatenate([surv_idx, np.full(n_new, -1, dtype=np.int64)])
    if not np.isfinite(new_scene.mu).all():
        raise FloatingPointError("densify produced non-finite positions")
    log.debug("densify: %d -> %d (%d cloned, %d split, %d pruned)",
              n, len(new_scene), clone_idx.size, split_idx.size, int(prune.sum()))
    return new_scene, old_indices


def densify_and_prune(scene: Scene, cfg: ScheduleConfig, phase: Phase,
                      rng: np.random.Generator | None = None) -> Scene:
    rng = rng if rng is not None else np.random.default_rng(0)
    new_scene, _ = densify_and_prune_ex(scene, cfg, phase, rng)
    return new_scene


# --- training step -------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def train_step(scene: Scene, field_: DeformationField, frame, state: TrainState,
               cfg: ScheduleConfig, optimizer: Adam | None = None,
               rng: np.random.Generator | None = None, gt: np.ndarray | None = None,
               update_grad_stats: bool = True):
    """One optimization step; mutates scene/field in place and returns them."""
    rng = rng if rng is not None else np.random.default_rng(state.rng_seed)
    if gt is None:
        gt = load_image(frame.image_path)

    g_mu = field_.encode_mu(scene.mu)
    g_p = apply_compensation(field_.encode_kin(frame.kinematics), state, cfg, rng)
    deltas, fcache = field_.forward_encoded(g_mu, g_p)
    out, rcache = render_forward(scene, frame.camera, deltas)
    res = loss(out.image, gt, cfg.lambda_dssim)

    grads = backward_from_cache(scene, rcache, res.grad, update_grad_stats=update_grad_stats)
    fgrads, d_x = field_.backward(
        fcache, GaussianDeltas(grads["d_mu"], grads["d_rot"], grads["d_scale"]))
    d_mu_in, _ = field_.backward_inputs(scene.mu, frame.kinematics, d_x)
    total_mu = grads["mu"] + d_mu_in

    if optimizer is not None:
        lrs = learning_rates_at(cfg, state)
        optimizer.step("mu", scene.mu, total_mu, lrs["mu"])
        optimizer.step("rot", scene.rot, grads["rot"], lrs["rot"])
        optimizer.step("log_scale", scene.log_scale, grads["log_scale"], lrs["log_scale"])
        optimizer.step("opacity_logit", scene.opacity_logit, grads["opacity_logit"],
                       lrs["opacity_logit"])
        optimizer.step("sh_coeffs", scene.sh_coeffs, grads["sh_coeffs"], lrs["sh_coeffs"])
        for i, (p, g) in enumerate(zip(field_.parameters(), fgrads)):
            optimizer.step(f"field.{i}", p, g, lrs["field"])

    psnr_value = psnr(np.clip(out.image, 0.0, 1.0), gt)
    state.record(res.loss, psnr_value)
    state.iteration += 1
    state.last_metrics = {
        "loss": res.loss, "l1": res.l1, "dssim": res.dssim, "psnr": psnr_value,
        "gaussian_count": len(scene), "active_sh_degree": scene.active_sh_degree,
    }
    return scene, field_, state


# --- trainer ---------------------------------------------------------------------------


LOG_COLUMNS = ("iter", "phase", "loss", "L1", "D-SSIM", "PSNR",
               "gaussian_count", "active_sh_degree")


class Trainer:
    """Orchestrates the two-phase run: curriculum, schedules, logging."""

    def __init__(self, scene: Scene, field_: DeformationField, frames, cfg: ScheduleConfig,
                 out_dir=None, seed: int = 0, images: dict | None = None):
        if not frames:
            raise ValueError("no frames")
        cfg.validate()
        self.scene = scene
        self.field = field_
        self.frames = list(frames)
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng(seed)
        self.optimizer = Adam()
        self.state = TrainState(cfg.loss_decline_window, rng_seed=seed)
        self.images = dict(images) if images is not None else {}
        self.log_rows: list[dict] = []
        self._order: list[int] = []
        self._cursor = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.scene.active_sh_degree = sh_degree_schedule(self.state, cfg)

    def _gt(self, frame) -> np.ndarray:
        img = self.images.get(frame.name)
        if img is None:
            img = load_image(frame.image_path)
            self.images[frame.name] = img
        return img

    def _next_frame(self):
        if self._cursor >= len(self._order):
            self._order = curriculum_order(self.frames, self.state.phase,
                                           self.field.norm, self.rng)
            self._cursor = 0
        frame = self.frames[self._order[self._cursor]]
        self._cursor += 1
        return frame

    def _phase_params(self) -> PhaseParams:
        return self.cfg.phase1 if self.state.phase == Phase.ONE else self.cfg.phase2

    def step(self) -> dict:
        frame = self._next_frame()
        train_step(self.scene, self.field, frame, self.state, self.cfg,
                   optimizer=self.optimizer, rng=self.rng, gt=self._gt(frame))
        it = self.state.iteration

        if self.state.phase == Phase.ONE:
            new_phase = check_phase_transition(self.state, self.cfg)
            if new_phase == Phase.TWO:
                self.state.phase = Phase.TWO
                self.state.transition_iteration = it
                self._order = []  # switch to the random curriculum immediately
                log.info("phase transition at iteration %d", it)

        self.scene.active_sh_degree = max(self.scene.active_sh_degree,
                                          sh_degree_schedule(self.state, self.cfg))

        pp = self._phase_params()
        if (self.cfg.densify_start <= it <= self.cfg.densify_stop
                and it % pp.P_di == 0 and it < self.cfg.max_iters):
            new_scene, old_idx = densify_and_prune_ex(self.scene, self.cfg,
                                                      self.state.phase, self.rng)
            self.optimizer.remap_rows(SCENE_PARAM_NAMES, old_idx, len(new_scene))
            self.scene = new_scene
        # Resets pair with pruning: a cleared opacity is only useful while
        # densification can still remove the Gaussians that fail to recover,
        # and a reset after the window just poisons the final model.
        if it % pp.P_oi == 0 and it < self.cfg.densify_stop:
            reset_opacity(self.scene)

        row = {
            "iter": it,
            "phase": int(self.state.phase),
            "loss": self.state.last_metrics["loss"],
            "L1": self.state.last_metrics["l1"],
            "D-SSIM": self.state.last_metrics["dssim"],
            "PSNR": self.state.last_metrics["psnr"],
            "gaussian_count": len(self.scene),
            "active_sh_degree": self.scene.active_sh_degree,
        }
        self.log_rows.append(row)
        if (self.out_dir is not None and self.cfg.checkpoint_interval > 0
                and it % self.cfg.checkpoint_interval == 0):
            self.save_checkpoint(tag=f"{it:06d}")
        return row

    def run(self, max_iters: int | None = None) -> list[dict]:
        total = max_iters if max_iters is not None else self.cfg.max_iters
        while self.state.iteration < total:
            self.step()
        if self.out_dir is not None:
            self.save_checkpoint(tag="final")
            self.write_log()
        return self.log_rows

    def save_checkpoint(self, tag: str) -> None:
        if self.out_dir is None:
            raise ValueError("trainer has no output directory")
        save_gaussian_ply(self.scene, self.out_dir / f"scene_{tag}.ply")
        save_field(self.field, self.out_dir / f"field_{tag}.ksf")
        self.state.save(self.out_dir / f"state_{tag}.json")

    def write_log(self, path=None) -> Path:
        path = Path(path) if path is not None else self.out_dir / "train_log.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.log_rows)
        return path
