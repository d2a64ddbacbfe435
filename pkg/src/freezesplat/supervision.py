"""Classification of primitives into well-supervised / hidden / defective states.

A primitive at time t is *hidden* when its center fails the frustum test for
that frame's camera, and *defective* when it is inside the frustum but the
frame-accumulated gradient of the photometric loss on its projected mean is at
or below the threshold. The two are mutually exclusive by construction.

The gradient statistic is computed under the photometric loss only; anchoring
losses never pass through the rasterizer, so they cannot contaminate it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .losses import recon_loss
from .model import Model
from .rasterizer import RasterConfig, rasterize_backward
from .scene import Dataset

GRAD_THRESHOLD = 1e-9


@dataclass(frozen=True)
class SupervisionState:
    hidden: bool
    defective: bool
    grad_norm: float
    frame_index: int
    primitive_index: int

    @property
    def well_supervised(self) -> bool:
        return not (self.hidden or self.defective)


def classify_arrays(in_frustum: np.ndarray, grad_norm: np.ndarray, threshold: float = GRAD_THRESHOLD):
    """Vectorized classification: returns (hidden, defective) boolean arrays."""
    in_frustum = np.asarray(in_frustum, dtype=bool)
    grad_norm = np.asarray(grad_norm)
    if in_frustum.shape != grad_norm.shape:
        raise ContractViolation("in_frustum and grad_norm lengths differ")
    hidden = ~in_frustum
    defective = in_frustum & (grad_norm <= threshold)
    return hidden, defective


def classify(render_stats, projected, threshold: float = GRAD_THRESHOLD, frame_index: int = -1):
    """Per-primitive supervision states from one frame's rasterizer outputs."""
    if len(render_stats) != len(projected):
        raise ContractViolation(
            f"stats cover {len(render_stats)} primitives, projection {len(projected)}"
        )
    hidden, defective = classify_arrays(projected.in_frustum, render_stats.grad_norm_mean2d, threshold)
    return [
        SupervisionState(
            hidden=bool(hidden[k]),
            defective=bool(defective[k]),
            grad_norm=float(render_stats.grad_norm_mean2d[k]),
            frame_index=frame_index,
            primitive_index=k,
        )
        for k in range(len(render_stats))
    ]


def classify_frame(
    model: Model,
    frame,
    threshold: float = GRAD_THRESHOLD,
    w_ssim: float = 0.2,
    config: RasterConfig | None = None,
    state=None,
):
    """Deform at the frame's timestamp, render, run the photometric backward, classify.

    Returns (hidden, defective, grad_norm, forward_state, deformed_state).
    A pre-deformed state may be passed to reuse it across callers.
    """
    if state is None:
        state = model.deform_at(frame.timestamp)
    img, fwd = model.render_state(state, (frame.rotation, frame.translation), config)
    _, grad_pixels = recon_loss(img.pixels, frame.image, w_ssim)
    _, stats = rasterize_backward(grad_pixels, fwd)
    hidden, defective = classify_arrays(fwd.proj.in_frustum, stats.grad_norm_mean2d, threshold)
    return hidden, defective, stats.grad_norm_mean2d, fwd, state


class SupervisionTable(dict):
    """Map (frame, primitive) -> SupervisionState, tagged with the iteration
    the statistics were computed at."""

    def __init__(self, entries, iteration=None):
        super().__init__(entries)
        self.iteration = iteration


def supervision_table(
    model: Model,
    dataset: Dataset,
    frame_indices,
    threshold: float = GRAD_THRESHOLD,
    w_ssim: float = 0.2,
    config: RasterConfig | None = None,
    iteration: int | None = None,
) -> SupervisionTable:
    """Tabulate supervision states over the requested frames.

    Built on demand for diagnostics; training classifies sampled frames on the
    fly instead of caching this table.
    """
    frame_indices = list(frame_indices)
    if not frame_indices:
        raise ValueError("frame subset must not be empty")
    table = {}
    for n in frame_indices:
        frame = dataset.frames[n]
        hidden, defective, grad_norm, _, _ = classify_frame(
            model, frame, threshold=threshold, w_ssim=w_ssim, config=config
        )
        for k in range(model.count):
            table[(n, k)] = SupervisionState(
                hidden=bool(hidden[k]),
                defective=bool(defective[k]),
                grad_norm=float(grad_norm[k]),
                frame_index=n,
                primitive_index=k,
            )
    return SupervisionTable(table, iteration=iteration)


def dump_table_csv(table: dict, path) -> None:
    """Write the diagnostic table as CSV rows (n, k, hidden, defective, grad_norm)."""
    with open(path, "w") as fh:
        fh.write("frame,primitive,hidden,defective,grad_norm\n")
        for n, k in sorted(table.keys()):
            st = table[(n, k)]
            fh.write(f"{n},{k},{int(st.hidden)},{int(st.defective)},{st.grad_norm:.9e}\n")
