"""Canonical scene data model: Gaussian primitives, cameras, frames, parameter vectors.

Every primitive carries 14 scalars in a fixed layout (see ``PARAM_LAYOUT``):
position (3), rotation quaternion wxyz (4), log-scales (3), opacity logit (1),
RGB color (3). Covariance is never stored as a matrix; it is reconstructed from
the quaternion/log-scale factors so optimizer steps cannot leave the SPD manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

# Per-primitive parameter vector layout: [mu(3), quat(4), log_scale(3), opacity(1), color(3)].
PARAMS_PER_GAUSSIAN = 14
POS_SLICE = slice(0, 3)
ROT_SLICE = slice(3, 7)
SCALE_SLICE = slice(7, 10)
OPACITY_INDEX = 10
COLOR_SLICE = slice(11, 14)

PARAM_LAYOUT = (
    ("position", POS_SLICE),
    ("rotation", ROT_SLICE),
    ("log_scale", SCALE_SLICE),
    ("opacity_logit", slice(10, 11)),
    ("color", COLOR_SLICE),
)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit-norm copies of quaternion rows.

    Rows whose squared norm is exactly 1.0 are passed through bit-identically,
    so renormalizing an already-normalized set is the identity.
    """
    q = np.asarray(q)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(n2 == 0.0):
        raise ValueError("zero-norm quaternion cannot be normalized")
    return np.where(n2 == 1.0, q, q / np.sqrt(n2))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z), shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from_factors(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """3x3 SPD covariance R(q) diag(exp(2s)) R(q)^T. Accepts batched (..., 4)/(..., 3).

    The quaternion is renormalized internally, so slightly off-manifold inputs
    (within ~1e-3 of unit norm) are fine.
    """
    q = normalize_quaternions(np.asarray(q, dtype=np.float64) if np.asarray(q).dtype.kind != "f" else q)
    s = np.asarray(s)
    R = quat_to_rotmat(q)
    d = np.exp(2.0 * s)
    # R @ diag(d) @ R^T without materializing the diagonal matrix
    return np.einsum("...ij,...j,...kj->...ik", R, d, R)


@dataclass
class GaussianCloud:
    """Canonical (time-independent) primitive set.

    positions: (K, 3) world units
    rotations: (K, 4) unit quaternions, wxyz
    log_scales: (K, 3) log of per-axis std-dev
    opacity_logits: (K,) sigmoid gives alpha in (0, 1)
    colors: (K, 3) RGB in [0, 1]
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions))
        self.rotations = np.atleast_2d(np.asarray(self.rotations))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales))
        self.opacity_logits = np.atleast_1d(np.asarray(self.opacity_logits))
        self.colors = np.atleast_2d(np.asarray(self.colors))
        K = self.positions.shape[0]
        if K < 1:
            raise ConfigurationError("cloud needs at least one primitive")
        if (
            self.rotations.shape != (K, 4)
            or self.log_scales.shape != (K, 3)
            or self.opacity_logits.shape != (K,)
            or self.colors.shape != (K, 3)
        ):
            raise ConfigurationError("inconsistent per-primitive array shapes")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def renormalize_rotations(self) -> None:
        """Project quaternions back to unit norm (call after every optimizer step)."""
        self.rotations = normalize_quaternions(self.rotations)

    def alphas(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return covariance_from_factors(self.rotations, self.log_scales)

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.astype(dtype),
            self.rotations.astype(dtype),
            self.log_scales.astype(dtype),
            self.opacity_logits.astype(dtype),
            self.colors.astype(dtype),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )

    def as_param_matrix(self) -> np.ndarray:
        """(K, 14) matrix in the canonical layout. Lossless round-trip partner
        of :func:`cloud_from_param_matrix`."""
        return np.concatenate(
            [
                self.positions,
                self.rotations,
                self.log_scales,
                self.opacity_logits[:, None],
                self.colors,
            ],
            axis=1,
        )


def cloud_from_param_matrix(theta: np.ndarray) -> GaussianCloud:
    theta = np.asarray(theta)
    if theta.ndim != 2 or theta.shape[1] != PARAMS_PER_GAUSSIAN:
        raise ConfigurationError(f"expected (K, {PARAMS_PER_GAUSSIAN}) parameter matrix")
    return GaussianCloud(
        theta[:, POS_SLICE].copy(),
        theta[:, ROT_SLICE].copy(),
        theta[:, SCALE_SLICE].copy(),
        theta[:, OPACITY_INDEX].copy(),
        theta[:, COLOR_SLICE].copy(),
    )


def pack_params(cloud: GaussianCloud, k: int) -> np.ndarray:
    """14-scalar parameter vector of primitive k, canonical layout."""
    if not 0 <= k < cloud.count:
        raise IndexError(f"primitive index {k} out of range [0, {cloud.count})")
    out = np.empty(PARAMS_PER_GAUSSIAN, dtype=cloud.positions.dtype)
    out[POS_SLICE] = cloud.positions[k]
    out[ROT_SLICE] = cloud.rotations[k]
    out[SCALE_SLICE] = cloud.log_scales[k]
    out[OPACITY_INDEX] = cloud.opacity_logits[k]
    out[COLOR_SLICE] = cloud.colors[k]
    return out


def unpack_params(vec: np.ndarray) -> dict:
    """Inverse of :func:`pack_params` for a single primitive."""
    vec = np.asarray(vec)
    if vec.shape != (PARAMS_PER_GAUSSIAN,):
        raise ValueError(f"expected a {PARAMS_PER_GAUSSIAN}-vector")
    return {
        "position": vec[POS_SLICE].copy(),
        "rotation": vec[ROT_SLICE].copy(),
        "log_scale": vec[SCALE_SLICE].copy(),
        "opacity_logit": vec[OPACITY_INDEX],
        "color": vec[COLOR_SLICE].copy(),
    }


@dataclass(frozen=True)
class CameraModel:
    """Shared pinhole intrinsics. Pixel centers sit on integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ConfigurationError("require 0 < near < far")
        if self.width < 8 or self.height < 8:
            raise ConfigurationError("image must be at least 8x8")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")


@dataclass
class FrameRecord:
    """One monocular observation: image, world-to-camera pose, normalized timestamp."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    rotation: np.ndarray  # (3, 3), x_cam = R x_world + b
    translation: np.ndarray  # (3,)
    timestamp: float
    index: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ConfigurationError("rotation must be 3x3")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ConfigurationError(f"frame {self.index}: rotation is not orthonormal")


@dataclass
class Dataset:
    """Monocular capture: one camera pose per timestamp, shared intrinsics."""

    frames: list
    camera: CameraModel
    scene_extent: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 4:
            raise ConfigurationError("need at least 4 frames")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError("timestamps must be strictly increasing")
        if abs(ts[0]) > 1e-12 or abs(ts[-1] - 1.0) > 1e-12:
            raise ConfigurationError("timestamps must span [0, 1]")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])


def normalize_timestamps(raw_indices) -> list:
    """Map >= 2 ascending frame indices to evenly spaced t in [0, 1]."""
    idx = list(raw_indices)
    if len(idx) < 2:
        raise ConfigurationError("need at least 2 frames to normalize timestamps")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigurationError("frame indices must be strictly ascending")
    n = len(idx)
    return [i / (n - 1) for i in range(n)]


def scene_extent_of(positions: np.ndarray) -> float:
    """Radius of the bounding sphere around the position centroid."""
    positions = np.asarray(positions, dtype=np.float64)
    center = positions.mean(axis=0)
    return float(np.sqrt(((positions - center) ** 2).sum(axis=1).max()))
