"""Temporally-anchored consistency regularization.

Ill-supervised primitives at a target time t are pulled toward their own
parameters at a reference time where they are well-supervised: hidden states
anchor to the past (t_ref < t), defective states to the future (t_ref > t).
Each applied instance is weighted by an exponential confidence
phi = exp(-tau |t - t_ref|) and a global lambda; the anchor side is a frozen
target (stop-gradient), so gradients flow only into the time-t parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deformation import deform_backward
from .errors import ConfigurationError, ContractViolation, NumericError
from .model import Model
from .rasterizer import RasterConfig
from .scene import (
    COLOR_SLICE,
    OPACITY_INDEX,
    POS_SLICE,
    ROT_SLICE,
    SCALE_SLICE,
    Dataset,
)
from .supervision import GRAD_THRESHOLD, classify_frame

L2 = "l2"
L1 = "l1"


@dataclass
class AnchorConfig:
    lambda_hidden: float = 10.0
    lambda_defective: float = 10.0
    tau: float = 5.0
    anchor_every: int = 10
    pairs_per_step: int = 2
    start_iter: int = 1000
    l1_switch_iter: int = 2000
    grad_threshold: float = GRAD_THRESHOLD
    no_hidden: bool = False
    no_defective: bool = False
    no_confidence: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.lambda_hidden < 0 or self.lambda_defective < 0:
            raise ConfigurationError("lambdas must be non-negative")
        if self.start_iter >= self.l1_switch_iter:
            raise ConfigurationError("start_iter must precede l1_switch_iter")

    def norm_mode(self, iteration: int) -> str:
        return L2 if iteration < self.l1_switch_iter else L1

    @property
    def enabled(self) -> bool:
        hidden_on = self.lambda_hidden > 0 and not self.no_hidden
        defective_on = self.lambda_defective > 0 and not self.no_defective
        return hidden_on or defective_on


@dataclass(frozen=True)
class AnchorEvent:
    primitive: int
    t: float
    t_ref: float
    kind: str  # "hidden" | "defective"
    phi: float
    discrepancy: float
    norm: str


def phi(t: float, t_ref: float, tau: float) -> float:
    """Confidence weight exp(-tau |t - t_ref|); 1 at zero temporal distance."""
    if tau <= 0:
        raise ConfigurationError("tau must be positive")
    return float(np.exp(-tau * abs(t - t_ref)))


def discrepancy(a: np.ndarray, b: np.ndarray, mode: str) -> float:
    """Parameter discrepancy: sum |a-b| (l1) or sum (a-b)^2 (l2)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation(f"parameter vectors differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    if mode == L1:
        return float(np.abs(d).sum())
    if mode == L2:
        return float((d * d).sum())
    raise ValueError(f"unknown norm mode {mode!r}")


def sample_anchor_pairs(rng: np.random.Generator, dataset: Dataset, pairs_per_step: int = 2):
    """Draw ``pairs_per_step`` distinct frames uniformly; return every unordered
    combination as an (a, b) tuple. Callers consider both orderings of each."""
    n = len(dataset)
    if n < 2:
        raise ConfigurationError("need at least 2 frames to sample anchor pairs")
    if pairs_per_step < 2:
        raise ConfigurationError("pairs_per_step must be at least 2")
    picks = rng.choice(n, size=min(pairs_per_step, n), replace=False)
    picks = [int(p) for p in picks]
    return [(picks[i], picks[j]) for i in range(len(picks)) for j in range(i + 1, len(picks))]


@dataclass
class AnchorGrads:
    """Accumulated anchoring gradients (deformation-net parameters)."""

    net: np.ndarray


def _theta_grads_to_state_grads(d_theta: np.ndarray):
    return (
        d_theta[:, POS_SLICE],
        d_theta[:, ROT_SLICE],
        d_theta[:, SCALE_SLICE],
        d_theta[:, OPACITY_INDEX],
        d_theta[:, COLOR_SLICE],
    )


def anchoring_step(
    model: Model,
    dataset: Dataset,
    pair,
    config: AnchorConfig,
    iteration: int,
    w_ssim: float = 0.2,
    raster_config: RasterConfig | None = None,
):
    """Apply the consistency losses for one sampled frame pair.

    Both orderings of the pair are considered: with t_ref in the past the
    hidden rule fires, with t_ref in the future the defective rule fires.
    Returns (loss, AnchorGrads, events); an empty eligible set yields loss 0,
    zero gradients, and no events.
    """
    n_a, n_b = pair
    frame_a, frame_b = dataset.frames[n_a], dataset.frames[n_b]
    if frame_a.timestamp == frame_b.timestamp:
        raise ConfigurationError("anchor pair must have distinct timestamps")
    if iteration < config.start_iter:
        raise ConfigurationError("anchoring_step called before start_iter")

    mode = config.norm_mode(iteration)
    per_frame = {}
    for n, frame in ((n_a, frame_a), (n_b, frame_b)):
        hidden, defective, _, fwd, state = classify_frame(
            model, frame, threshold=config.grad_threshold, w_ssim=w_ssim, config=raster_config
        )
        per_frame[n] = {
            "hidden": hidden,
            "defective": defective,
            "well": ~(hidden | defective),
            "state": state,
            "theta": state.as_param_matrix(),
            "t": frame.timestamp,
        }

    total = 0.0
    events = []
    net_grad = model.net.zero_grad_like()

    for target, ref in ((n_a, n_b), (n_b, n_a)):
        tgt, rf = per_frame[target], per_frame[ref]
        t, t_ref = tgt["t"], rf["t"]
        if t_ref < t:
            kind, lam, disabled = "hidden", config.lambda_hidden, config.no_hidden
            eligible = tgt["hidden"] & rf["well"]
        else:
            kind, lam, disabled = "defective", config.lambda_defective, config.no_defective
            eligible = tgt["defective"] & rf["well"]
        if disabled or lam == 0.0:
            continue
        ks = np.flatnonzero(eligible)
        if ks.size == 0:
            continue

        weight = 1.0 if config.no_confidence else phi(t, t_ref, config.tau)
        diff = tgt["theta"][ks] - rf["theta"][ks]  # reference side is stop-grad
        if mode == L1:
            d_vals = np.abs(diff).sum(axis=1)
            d_diff = np.sign(diff)
        else:
            d_vals = (diff * diff).sum(axis=1)
            d_diff = 2.0 * diff

        total += lam * weight * float(d_vals.sum())
        d_theta = np.zeros_like(tgt["theta"])
        d_theta[ks] = (lam * weight) * d_diff

        # Gradients go to the deformation net only. The canonical terms of
        # theta(t) - theta(t_ref) cancel (both states share them), so with a
        # frozen reference the canonical path cannot reduce the discrepancy;
        # letting it through only biases parameters other frames supervise.
        gp, gr, gs, go, gc = _theta_grads_to_state_grads(d_theta)
        ng, _ = deform_backward(model.net, model.cloud, tgt["state"], gp, gr, gs, go, gc)
        net_grad += ng

        events.extend(
            AnchorEvent(
                primitive=int(k),
                t=float(t),
                t_ref=float(t_ref),
                kind=kind,
                phi=float(weight),
                discrepancy=float(dv),
                norm=mode,
            )
            for k, dv in zip(ks, d_vals)
        )

    return total, AnchorGrads(net=net_grad), events


def total_objective(recon: float, hidden_term: float, defective_term: float, config: AnchorConfig) -> float:
    """Sum the already-weighted loss components (lambda lives in anchoring_step)."""
    for name, value in (("recon", recon), ("hidden", hidden_term), ("defective", defective_term)):
        if not np.isfinite(value):
            raise NumericError(f"non-finite {name} loss component: {value}")
    return float(recon + hidden_term + defective_term)
