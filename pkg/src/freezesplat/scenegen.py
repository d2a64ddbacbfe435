"""Procedural "imperfect mannequin" scenes with exact static ground truth.

A forward-dolly camera flies down a hallway containing ellipsoidal subject
blobs that wobble with a small sinusoidal micro-motion, plus static walls and
floor. Because the generator renders its frames with the project's own
rasterizer, the true frozen scene at any instant is known exactly: evaluation
measures reconstruction quality, never renderer disagreement.

The geometry reproduces the supervision failure modes on purpose: the camera
drives past the subjects (late frames see them leave the frustum -> hidden)
and early frames view them from afar through heavy self-occlusion
(-> defective).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .rasterizer import RasterConfig, frustum_test, render
from .scene import (
    CameraModel,
    Dataset,
    FrameRecord,
    GaussianCloud,
    normalize_timestamps,
    scene_extent_of,
)


@dataclass
class SceneSpec:
    seed: int = 0
    n_subjects: int = 2
    prims_per_subject: int = 150
    background_prims: int = 300
    n_frames: int = 48
    width: int = 160
    height: int = 90
    focal_px: float | None = None  # default 0.72 * width
    dolly_depth: float = 4.0  # camera travels z in [-depth, 0]
    sway_amplitude: float = 0.08
    jitter_amplitude: float | None = None  # default 0.02 * scene extent
    jitter_frequency: float = 5.0  # cycles per unit time
    background_color: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n_frames < 4:
            raise ConfigurationError("need at least 4 frames")
        if self.jitter_amplitude is not None and self.jitter_amplitude < 0:
            raise ConfigurationError("jitter amplitude must be >= 0")


@dataclass
class TrueTrajectory:
    """Exact primitive states over time plus ground-truth rendering."""

    canonical: GaussianCloud
    subject_mask: np.ndarray  # (K,) bool
    directions: np.ndarray  # (K, 3) unit motion directions (zero rows off-subject)
    phases: np.ndarray  # (K,)
    amplitude: float
    frequency: float
    camera: CameraModel
    background: np.ndarray
    raster: RasterConfig = field(default_factory=RasterConfig)

    def positions_at(self, t: float) -> np.ndarray:
        wobble = self.amplitude * np.sin(2.0 * np.pi * self.frequency * t + self.phases)
        return self.canonical.positions + wobble[:, None] * self.directions

    def state_at(self, t: float) -> GaussianCloud:
        cloud = self.canonical.copy()
        cloud.positions = self.positions_at(t)
        return cloud

    def render_gt(self, t: float, pose) -> np.ndarray:
        """Frozen true state at t rendered under the given pose (no gradients kept)."""
        img, _ = render(self.state_at(t), self.camera, pose, self.background, self.raster)
        return img.pixels


def _unit_directions(rng, n):
    u = rng.standard_normal((n, 3))
    return u / np.sqrt((u * u).sum(axis=1, keepdims=True))


def _build_true_cloud(spec: SceneSpec, rng):
    positions, log_scales, colors, logits = [], [], [], []
    subject_flags = []

    # deep enough that the camera passes them mid-sequence (late frames see
    # them leave the frustum), offset enough that it never drives through them
    subject_centers = []
    for i in range(spec.n_subjects):
        x = 0.62 * (1 if i % 2 == 0 else -1)
        z = -2.4 + 0.9 * i
        subject_centers.append((x, 0.22, z))

    radii = np.asarray((0.28, 0.34, 0.24))
    for center in subject_centers:
        # each subject is a nearly opaque shell plus interior stuffing; the
        # stuffing is genuinely buried, which is what produces defective
        # (zero-gradient) states in distant views
        n = spec.prims_per_subject
        n_shell = int(round(n * 0.6))
        n_core = n - n_shell
        shell = _unit_directions(rng, n_shell) * rng.uniform(0.95, 1.0, (n_shell, 1))
        core = _unit_directions(rng, n_core) * np.cbrt(rng.uniform(0.0, 1.0, (n_core, 1))) * 0.65
        positions.append(np.asarray(center) + np.concatenate([shell, core]) * radii)
        log_scales.append(
            np.log(
                np.concatenate(
                    [rng.uniform(0.085, 0.12, (n_shell, 3)), rng.uniform(0.015, 0.03, (n_core, 3))]
                )
            )
        )
        colors.append(rng.uniform(0.15, 0.95, (n, 3)))
        logits.append(np.concatenate([rng.uniform(3.5, 4.3, n_shell), rng.uniform(1.5, 2.8, n_core)]))
        subject_flags.append(np.ones(n, dtype=bool))

    n_floor = int(spec.background_prims * 0.4)
    n_wall = int(spec.background_prims * 0.225)
    n_end = spec.background_prims - n_floor - 2 * n_wall

    def checker(a, b):
        base = np.where((np.floor(a * 2.5) + np.floor(b * 2.5)) % 2 == 0, 0.55, 0.3)
        return base

    # floor
    gz = rng.uniform(-3.7, 1.6, n_floor)
    gx = rng.uniform(-1.05, 1.05, n_floor)
    positions.append(np.stack([gx, np.full(n_floor, 0.7), gz], axis=1))
    log_scales.append(np.log(np.tile((0.10, 0.02, 0.10), (n_floor, 1))) + rng.normal(0, 0.08, (n_floor, 3)))
    shade = checker(gx, gz) + rng.normal(0, 0.03, n_floor)
    colors.append(np.clip(np.stack([shade, shade * 0.9, shade * 0.75], axis=1), 0.0, 1.0))
    logits.append(rng.uniform(2.0, 3.0, n_floor))
    subject_flags.append(np.zeros(n_floor, dtype=bool))

    for sign, n_w in ((-1.0, n_wall), (1.0, n_wall)):
        wz = rng.uniform(-3.7, 1.6, n_w)
        wy = rng.uniform(-0.65, 0.68, n_w)
        positions.append(np.stack([np.full(n_w, sign * 1.12), wy, wz], axis=1))
        log_scales.append(np.log(np.tile((0.02, 0.10, 0.10), (n_w, 1))) + rng.normal(0, 0.08, (n_w, 3)))
        shade = checker(wy, wz) + rng.normal(0, 0.03, n_w)
        tint = (0.8, 0.85, 1.0) if sign < 0 else (1.0, 0.9, 0.8)
        colors.append(np.clip(shade[:, None] * np.asarray(tint)[None, :], 0.0, 1.0))
        logits.append(rng.uniform(2.0, 3.0, n_w))
        subject_flags.append(np.zeros(n_w, dtype=bool))

    # end wall keeps the final poses non-empty after the camera passes the subjects
    ex = rng.uniform(-1.15, 1.15, n_end)
    ey = rng.uniform(-0.68, 0.72, n_end)
    positions.append(np.stack([ex, ey, np.full(n_end, 2.0)], axis=1))
    log_scales.append(np.log(np.tile((0.11, 0.11, 0.02), (n_end, 1))) + rng.normal(0, 0.08, (n_end, 3)))
    shade = checker(ex, ey) + rng.normal(0, 0.03, n_end)
    colors.append(np.clip(shade[:, None] * np.asarray((0.85, 1.0, 0.9))[None, :], 0.0, 1.0))
    logits.append(rng.uniform(2.0, 3.0, n_end))
    subject_flags.append(np.zeros(n_end, dtype=bool))

    K = sum(p.shape[0] for p in positions)
    quats = np.zeros((K, 4))
    quats[:, 0] = 1.0
    cloud = GaussianCloud(
        np.concatenate(positions, axis=0),
        quats,
        np.concatenate(log_scales, axis=0),
        np.concatenate(logits, axis=0),
        np.concatenate(colors, axis=0),
    )
    return cloud, np.concatenate(subject_flags)


def _poses(spec: SceneSpec, timestamps):
    poses = []
    for t in timestamps:
        x = spec.sway_amplitude * np.sin(2.0 * np.pi * t)
        p = np.array([x, 0.0, -spec.dolly_depth + spec.dolly_depth * t])
        poses.append((np.eye(3), -p))
    return poses


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid PNG storage uses, so save/load round-trips exactly."""
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    return u8.astype(np.float32) / 255

def generate(spec: SceneSpec):
    """Build the dataset and its ground truth. Deterministic in spec.seed.

    Returns (Dataset, TrueTrajectory); the trajectory is also stashed in
    ``dataset.meta["trajectory"]``.
    """
    rng = np.random.default_rng(spec.seed)
    cloud, subject_mask = _build_true_cloud(spec, rng)
    extent = scene_extent_of(cloud.positions)
    amplitude = 0.02 * extent if spec.jitter_amplitude is None else spec.jitter_amplitude

    directions = np.zeros((cloud.count, 3))
    n_subj = int(subject_mask.sum())
    d = rng.standard_normal((n_subj, 3))
    d /= np.sqrt((d * d).sum(axis=1, keepdims=True))
    directions[subject_mask] = d
    phases = np.zeros(cloud.count)
    phases[subject_mask] = rng.uniform(0.0, 2.0 * np.pi, n_subj)

    width = spec.width
    focal = spec.focal_px if spec.focal_px is not None else 0.72 * width
    camera = CameraModel(
        fx=focal,
        fy=focal,
        cx=(spec.width - 1) / 2.0,
        cy=(spec.height - 1) / 2.0,
        width=spec.width,
        height=spec.height,
        near=0.1,
        far=50.0,
    )
    background = np.asarray(spec.background_color, dtype=np.float64)
    trajectory = TrueTrajectory(
        canonical=cloud,
        subject_mask=subject_mask,
        directions=directions,
        phases=phases,
        amplitude=float(amplitude),
        frequency=float(spec.jitter_frequency),
        camera=camera,
        background=background,
    )

    timestamps = normalize_timestamps(range(spec.n_frames))
    poses = _poses(spec, timestamps)

    subj_positions = cloud.positions[subject_mask]
    if not any(
        frustum_test(mu, pose, camera) for pose in poses for mu in subj_positions[:: max(1, n_subj // 16)]
    ):
        raise ConfigurationError("degenerate spec: subjects never enter the camera frustum")

    frames = []
    for n, (t, pose) in enumerate(zip(timestamps, poses)):
        img = trajectory.render_gt(t, pose)
        frames.append(
            FrameRecord(image=quantize_image(img), rotation=pose[0], translation=pose[1], timestamp=t, index=n)
        )

    dataset = Dataset(
        frames=frames,
        camera=camera,
        scene_extent=extent,
        meta={"trajectory": trajectory, "spec": spec},
    )
    return dataset, trajectory


def init_cloud_from_gt(
    true_cloud: GaussianCloud, sigma_pos: float, sigma_color: float, seed: int = 0
) -> GaussianCloud:
    """Jittered copy of the true canonical cloud (stand-in for SfM initialization)."""
    if sigma_pos < 0 or sigma_color < 0:
        raise ConfigurationError("noise sigmas must be >= 0")
    rng = np.random.default_rng(seed)
    cloud = true_cloud.copy()
    if sigma_pos > 0:
        cloud.positions = cloud.positions + rng.normal(0.0, sigma_pos, cloud.positions.shape)
    if sigma_color > 0:
        cloud.colors = np.clip(cloud.colors + rng.normal(0.0, sigma_color, cloud.colors.shape), 0.0, 1.0)
    return cloud
