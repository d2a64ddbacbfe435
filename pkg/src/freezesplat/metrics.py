"""Referenced image metrics and drift diagnostics.

Freeze-time evaluation follows the every-Nth-frame protocol: each strided
timestamp is frozen, all training poses are re-rendered there (one deformation
call per instant), and PSNR/SSIM are scored against the exact synthetic ground
truth. Aggregates mirror the worst-case style of reporting: overall mean,
means of the worst 75/50/25% of frames, and the single worst frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .losses import ssim_luminance
from .model import Model
from .rasterizer import RasterConfig
from .scene import Dataset

PSNR_CLAMP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against peak value 1.0, clamped at 99."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CLAMP_DB
    return min(PSNR_CLAMP_DB, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) on channel-mean luminance."""
    return ssim_luminance(a, b, with_grad=False)


def drift(model: Model, k: int, grid) -> float:
    """Mean L1 distance of primitive k's parameters from its state at the grid median."""
    return float(drift_all(model, grid)[k])


def drift_all(model: Model, grid) -> np.ndarray:
    """Per-primitive drift over a timestamp grid (vectorized over the cloud)."""
    grid = sorted(float(t) for t in grid)
    if len(grid) < 2:
        raise ValueError("drift grid needs at least 2 timestamps")
    t_mid = grid[(len(grid) - 1) // 2]
    theta_mid = model.deform_at(t_mid).as_param_matrix()
    acc = np.zeros(model.count, dtype=np.float64)
    for t in grid:
        theta = model.deform_at(t).as_param_matrix()
        acc += np.abs(theta - theta_mid).sum(axis=1)
    return acc / len(grid)


@dataclass
class EvalReport:
    rows: list  # dicts: t_star, pose, psnr, ssim
    psnr_aggregates: dict
    ssim_aggregates: dict
    drift_per_primitive: np.ndarray
    stride: int
    freeze_timestamps: list = field(default_factory=list)

    def to_records(self) -> list:
        records = [dict(r) for r in self.rows]
        records.append(
            {
                "summary": True,
                "stride": self.stride,
                "psnr": self.psnr_aggregates,
                "ssim": self.ssim_aggregates,
                "drift_mean": float(self.drift_per_primitive.mean()),
            }
        )
        return records

    def to_table(self) -> str:
        lines = [
            f"freeze-time evaluation: {len(self.rows)} scored frames "
            f"({len(self.freeze_timestamps)} instants x stride {self.stride})",
            f"{'metric':<6} {'mean':>8} {'bot75%':>8} {'bot50%':>8} {'bot25%':>8} {'worst':>8}",
        ]
        for name, agg in (("PSNR", self.psnr_aggregates), ("SSIM", self.ssim_aggregates)):
            lines.append(
                f"{name:<6} {agg['mean']:8.3f} {agg['bottom75']:8.3f} "
                f"{agg['bottom50']:8.3f} {agg['bottom25']:8.3f} {agg['worst']:8.3f}"
            )
        lines.append(f"drift  mean={self.drift_per_primitive.mean():.6f} max={self.drift_per_primitive.max():.6f}")
        return "\n".join(lines)


def _aggregate(values: np.ndarray) -> dict:
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size

    def bottom(p):
        m = max(1, int(np.ceil(p * n)))
        return float(v[:m].mean())

    return {
        "mean": float(v.mean()),
        "bottom75": bottom(0.75),
        "bottom50": bottom(0.50),
        "bottom25": bottom(0.25),
        "worst": float(v[0]),
    }


def evaluate_freeze(
    model: Model,
    dataset: Dataset,
    stride: int = 8,
    config: RasterConfig | None = None,
) -> EvalReport:
    """Score freeze renders at every ``stride``-th timestamp against ground truth."""
    trajectory = dataset.meta.get("trajectory")
    if trajectory is None:
        raise ValueError("GT required: dataset carries no ground-truth trajectory")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    freeze_ts = [f.timestamp for f in dataset.frames[::stride]]
    rows = []
    for t_star in freeze_ts:
        state = model.deform_at(t_star)  # exactly one deformation per instant
        for frame in dataset.frames:
            pose = (frame.rotation, frame.translation)
            img, _ = model.render_state(state, pose, config)
            gt = trajectory.render_gt(t_star, pose)
            rows.append(
                {
                    "t_star": float(t_star),
                    "pose": frame.index,
                    "psnr": psnr(img.pixels, gt),
                    "ssim": ssim(img.pixels, gt),
                }
            )

    return EvalReport(
        rows=rows,
        psnr_aggregates=_aggregate([r["psnr"] for r in rows]),
        ssim_aggregates=_aggregate([r["ssim"] for r in rows]),
        drift_per_primitive=drift_all(model, freeze_ts if len(freeze_ts) >= 2 else dataset.timestamps),
        stride=stride,
        freeze_timestamps=[float(t) for t in freeze_ts],
    )
