"""Freeze-time reconstruction of near-static monocular captures.

A dynamic Gaussian splatting stack (software rasterizer, deformation field,
temporally-anchored regularization) that trains on a monocular sequence and
renders every camera pose at one user-selected instant.
"""

from .scene import (
    CameraModel,
    Dataset,
    FrameRecord,
    GaussianCloud,
    covariance_from_factors,
    normalize_timestamps,
    pack_params,
    unpack_params,
)
from .deformation import DeformationNet, DeformedState, deform, deform_backward, encode
from .rasterizer import (
    RasterConfig,
    RenderedImage,
    RenderStats,
    frustum_test,
    project,
    rasterize_backward,
    rasterize_forward,
    render,
)
from .losses import recon_loss, ssim_luminance
from .model import Model

__all__ = [
    "CameraModel",
    "Dataset",
    "DeformationNet",
    "DeformedState",
    "FrameRecord",
    "GaussianCloud",
    "Model",
    "RasterConfig",
    "RenderStats",
    "RenderedImage",
    "covariance_from_factors",
    "deform",
    "deform_backward",
    "encode",
    "frustum_test",
    "normalize_timestamps",
    "pack_params",
    "project",
    "rasterize_backward",
    "rasterize_forward",
    "recon_loss",
    "render",
    "ssim_luminance",
    "unpack_params",
]
