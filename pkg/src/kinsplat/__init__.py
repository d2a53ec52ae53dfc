"""Kinematics-conditioned deformable Gaussian splatting.

A small CPU engine that fits an anisotropic-Gaussian scene to posed images,
learns a deformation field conditioned on an articulated tool's kinematic
state, and renders images, segmentation masks, and bounding boxes for novel
states and viewpoints.
"""

__version__ = "0.1.0"

from .scene import (
    CameraPose,
    FrameRecord,
    Gaussian,
    KinematicState,
    Phase,
    Scene,
)

__all__ = [
    "CameraPose",
    "FrameRecord",
    "Gaussian",
    "KinematicState",
    "Phase",
    "Scene",
    "__version__",
]
