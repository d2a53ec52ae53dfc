from __future__ import annotations

import numpy as np
import pytest

from kinsplat.scene import CameraPose, GaussianDeltas, Scene, inverse_sigmoid


def make_random_scene(n: int, rng: np.random.Generator, sh_degree: int = 2,
                      extent: float = 1.0) -> Scene:
    """Random scene kept inside the FD-friendly regime.

    Opacities stay in [0.05, 0.25] so per-pixel transmittance never reaches
    the early-stop floor, and quaternions are biased away from zero norm.
    """
    mu = rng.uniform(-0.6, 0.6, (n, 3)).astype(np.float32)
    rot = rng.normal(0, 1, (n, 4)).astype(np.float32)
    rot[:, 0] += np.sign(rot[:, 0]) * 0.5
    log_scale = rng.uniform(np.log(0.04), np.log(0.18), (n, 3)).astype(np.float32)
    opacity = inverse_sigmoid(rng.uniform(0.05, 0.25, n)).astype(np.float32)
    sh = np.zeros((n, 16, 3), dtype=np.float32)
    sh[:, 0, :] = rng.uniform(-0.5, 1.2, (n, 3))
    sh[:, 1:, :] = rng.normal(0, 0.05, (n, 15, 3))
    return Scene(mu, rot, log_scale, opacity, sh, active_sh_degree=sh_degree,
                 extent=extent)


def make_random_deltas(n: int, rng: np.random.Generator, amp: float = 0.01) -> GaussianDeltas:
    return GaussianDeltas(
        rng.normal(0, amp, (n, 3)).astype(np.float32),
        rng.normal(0, amp, (n, 4)).astype(np.float32),
        rng.normal(0, amp, (n, 3)).astype(np.float32),
    )


def fd_camera(width: int = 32, height: int = 32) -> CameraPose:
    return CameraPose.look_at([0.3, -0.2, -2.6], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                              fx=38.0, fy=38.0, width=width, height=height)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
