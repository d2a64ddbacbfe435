"""Full optimization loop: photometric fitting, anchoring schedule, densification.

One uniformly sampled frame per iteration; anchoring fires every
``anchor_every`` iterations once past ``start_iter``, with the discrepancy norm
switching from squared-L2 to L1 at ``l1_switch_iter`` (thirds of the run by
default). All randomness flows from per-purpose seeded generators so a (seed,
config, dataset) triple fully determines the trained checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .anchoring import AnchorConfig, anchoring_step, sample_anchor_pairs, total_objective
from .deformation import DeformationNet, deform, deform_backward
from .errors import ConfigurationError, NumericError
from .losses import recon_loss
from .model import Model
from .rasterizer import RasterConfig, rasterize_backward, render
from .scene import Dataset, GaussianCloud, normalize_quaternions, quat_to_rotmat
from .supervision import classify_arrays

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors", "net")


@dataclass
class LearningRates:
    position: float = 1.6e-4  # scaled by scene_extent, decays exponentially
    rotation: float = 1e-3
    log_scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    net: float = 1e-4
    position_final_scale: float = 0.01

    def __post_init__(self):
        for name in ("position", "rotation", "log_scale", "opacity", "color", "net"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"learning rate {name} must be positive")


@dataclass
class TrainConfig:
    total_iters: int = 3000
    seed: int = 0
    w_ssim: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)
    dtype: str = "float32"
    lr: LearningRates = field(default_factory=LearningRates)
    anchor: AnchorConfig | None = None
    raster: RasterConfig = field(default_factory=RasterConfig)
    densify_from: int | None = None
    densify_until: int | None = None
    densify_interval: int | None = None
    densify_grad_threshold: float = 2e-4
    densify_small_scale: float = 0.01  # fraction of scene extent splitting vs cloning
    prune_opacity: float = 0.005
    split_scale_shrink: float = 1.6
    # cap on |anchor net grad| as a multiple of |photometric net grad|; keeps the
    # regularizer's spikes (especially L1-phase sign gradients) from swamping the
    # shared net's Adam moments at desk scale. 0 disables.
    anchor_grad_clip_ratio: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.w_ssim <= 1.0:
            raise ConfigurationError("w_ssim must be in [0, 1]")
        if self.total_iters < 1:
            raise ConfigurationError("total_iters must be positive")
        if self.anchor is None:
            self.anchor = AnchorConfig(
                start_iter=max(1, self.total_iters // 3),
                l1_switch_iter=max(2, 2 * self.total_iters // 3),
            )
        if self.densify_from is None:
            self.densify_from = self.total_iters // 6
        if self.densify_until is None:
            self.densify_until = self.total_iters // 2
        if self.densify_interval is None:
            self.densify_interval = max(1, self.total_iters // 30)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def densify_enabled(self) -> bool:
        return self.densify_interval > 0 and self.densify_until > self.densify_from


class OptimizerState:
    """Adam moment accumulators per parameter group plus a shared step count."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def rebuild_rows(self, group: str, keep: np.ndarray, n_new: int):
        """Carry moments for surviving rows, zero for appended ones."""
        for store in (self.m, self.v):
            old = store[group]
            fresh = np.zeros((keep.size + n_new,) + old.shape[1:], dtype=old.dtype)
            fresh[: keep.size] = old[keep]
            store[group] = fresh


def optimizer_step(params: dict, grads: dict, state: OptimizerState, rates: dict):
    """One bias-corrected adaptive-moment update; quaternions renormalized afterward."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in group {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= (rates[name] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype, copy=False)
    if "rotations" in params:
        params["rotations"][...] = normalize_quaternions(params["rotations"])


def densify_and_prune(
    cloud: GaussianCloud,
    grad_mean: np.ndarray,
    opt: OptimizerState,
    config: TrainConfig,
    scene_extent: float,
    rng: np.random.Generator,
):
    """Clone small high-gradient primitives, split large ones, prune transparent ones.

    Returns (new cloud, info dict); optimizer rows follow survivors, new rows
    start with zero moments.
    """
    K = cloud.count
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    hot = grad_mean > config.densify_grad_threshold
    small = max_scale < config.densify_small_scale * scene_extent
    clone_mask = hot & small
    split_mask = hot & ~small

    keep = np.flatnonzero(~split_mask)
    clones = np.flatnonzero(clone_mask)
    splits = np.flatnonzero(split_mask)

    parts = {name: [getattr(cloud, name)[keep]] for name in
             ("positions", "rotations", "log_scales", "opacity_logits", "colors")}
    if clones.size:
        for name in parts:
            parts[name].append(getattr(cloud, name)[clones])
    if splits.size:
        R3 = quat_to_rotmat(normalize_quaternions(cloud.rotations[splits]))
        sigma = np.exp(cloud.log_scales[splits])
        for _ in range(2):
            z = rng.standard_normal((splits.size, 3)).astype(cloud.dtype)
            offset = np.einsum("kij,kj->ki", R3, z * sigma)
            parts["positions"].append(cloud.positions[splits] + offset)
            parts["rotations"].append(cloud.rotations[splits])
            parts["log_scales"].append(cloud.log_scales[splits] - math.log(config.split_scale_shrink))
            parts["opacity_logits"].append(cloud.opacity_logits[splits])
            parts["colors"].append(cloud.colors[splits])

    merged = {name: np.concatenate(arrs, axis=0) for name, arrs in parts.items()}
    new_cloud = GaussianCloud(**merged)

    alive = new_cloud.alphas() >= config.prune_opacity
    n_new = new_cloud.count - keep.size
    for group in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        opt.rebuild_rows(group, keep, n_new)
        opt.m[group] = opt.m[group][alive]
        opt.v[group] = opt.v[group][alive]
    final = GaussianCloud(**{name: arr[alive] for name, arr in merged.items()})
    info = {
        "cloned": int(clones.size),
        "split": int(splits.size),
        "pruned": int((~alive).sum()),
        "K": final.count,
    }
    return final, info


def _position_rate(config: TrainConfig, scene_extent: float, iteration: int) -> float:
    base = config.lr.position * scene_extent
    frac = iteration / max(1, config.total_iters)
    return base * (config.lr.position_final_scale**frac)


def _rates(config: TrainConfig, scene_extent: float, iteration: int) -> dict:
    return {
        "positions": _position_rate(config, scene_extent, iteration),
        "rotations": config.lr.rotation,
        "log_scales": config.lr.log_scale,
        "opacity_logits": config.lr.opacity,
        "colors": config.lr.color,
        "net": config.lr.net,
    }


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    anchor_events: list = field(default_factory=list)
    densify_events: list = field(default_factory=list)


def train(dataset: Dataset, init_cloud: GaussianCloud, config: TrainConfig):
    """Optimize a model on the dataset; returns (Model, TrainLog)."""
    dtype = config.np_dtype
    cloud = init_cloud.astype(dtype)
    cloud.renormalize_rotations()
    net = DeformationNet.initialized(seed=config.seed, dtype=dtype)
    camera = dataset.camera
    background = np.asarray(config.background, dtype=dtype)
    model = Model(cloud, net, camera, tuple(config.background))
    anchor_cfg = config.anchor

    rng_frames = np.random.default_rng(config.seed)
    rng_anchor = np.random.default_rng(config.seed + 0x5EED)
    rng_densify = np.random.default_rng(config.seed + 0xD59)

    params = _param_dict(cloud, net)
    opt = OptimizerState(params)
    grad_accum = np.zeros(cloud.count, dtype=np.float64)
    seen_accum = np.zeros(cloud.count, dtype=np.int64)
    images = [frame.image.astype(dtype) for frame in dataset.frames]
    log = TrainLog()

    for it in range(1, config.total_iters + 1):
        n = int(rng_frames.integers(0, len(dataset)))
        frame = dataset.frames[n]
        state = deform(net, cloud, frame.timestamp)
        img, fwd = render(state, camera, (frame.rotation, frame.translation), background, config.raster)
        loss_recon, grad_pixels = recon_loss(img.pixels, images[n], config.w_ssim)
        grads, stats = rasterize_backward(grad_pixels, fwd)
        net_grad, canon = deform_backward(
            net, cloud, state,
            grads.positions, grads.rotations, grads.log_scales, grads.opacity_logits, grads.colors,
        )
        hidden, defective = classify_arrays(
            fwd.proj.in_frustum, stats.grad_norm_mean2d, anchor_cfg.grad_threshold
        )

        loss_hidden = 0.0
        loss_defective = 0.0
        n_events = 0
        if anchor_cfg.enabled and it >= anchor_cfg.start_iter and it % anchor_cfg.anchor_every == 0:
            photo_norm = float(np.linalg.norm(net_grad))
            anchor_grad = np.zeros_like(net_grad)
            for pair in sample_anchor_pairs(rng_anchor, dataset, anchor_cfg.pairs_per_step):
                _, agrads, events = anchoring_step(
                    model, dataset, pair, anchor_cfg, it, config.w_ssim, config.raster
                )
                anchor_grad += agrads.net
                for ev in events:
                    lam = anchor_cfg.lambda_hidden if ev.kind == "hidden" else anchor_cfg.lambda_defective
                    contribution = lam * ev.phi * ev.discrepancy
                    if ev.kind == "hidden":
                        loss_hidden += contribution
                    else:
                        loss_defective += contribution
                log.anchor_events.extend((it, ev) for ev in events)
                n_events += len(events)
            anchor_norm = float(np.linalg.norm(anchor_grad))
            if config.anchor_grad_clip_ratio > 0 and anchor_norm > 0:
                cap = config.anchor_grad_clip_ratio * max(photo_norm, 1e-12)
                if anchor_norm > cap:
                    anchor_grad *= cap / anchor_norm
            net_grad += anchor_grad

        total = total_objective(loss_recon, loss_hidden, loss_defective, anchor_cfg)
        if not np.isfinite(total):
            raise NumericError(f"iteration {it}: non-finite loss {total}")

        grad_dict = dict(canon)
        grad_dict["net"] = net_grad
        try:
            optimizer_step(params, grad_dict, opt, _rates(config, dataset.scene_extent, it))
        except NumericError as err:
            raise NumericError(f"iteration {it}: {err}") from err
        cloud.rotations = params["rotations"]

        grad_accum += np.where(stats.visible, stats.grad_norm_mean2d, 0.0)
        seen_accum += stats.visible

        if (
            config.densify_enabled
            and config.densify_from <= it <= config.densify_until
            and it % config.densify_interval == 0
        ):
            grad_mean = grad_accum / np.maximum(seen_accum, 1)
            cloud, info = densify_and_prune(cloud, grad_mean, opt, config, dataset.scene_extent, rng_densify)
            model.cloud = cloud
            params = _param_dict(cloud, net)
            grad_accum = np.zeros(cloud.count, dtype=np.float64)
            seen_accum = np.zeros(cloud.count, dtype=np.int64)
            log.densify_events.append({"iter": it, **info})

        log.records.append(
            {
                "iter": it,
                "frame": n,
                "recon": float(loss_recon),
                "hidden": float(loss_hidden),
                "defective": float(loss_defective),
                "total": float(total),
                "K": cloud.count,
                "hidden_count": int(hidden.sum()),
                "defective_count": int(defective.sum()),
                "anchor_events": n_events,
            }
        )

    cloud.renormalize_rotations()
    model.cloud = cloud
    return model, log


def _param_dict(cloud: GaussianCloud, net: DeformationNet) -> dict:
    return {
        "positions": cloud.positions,
        "rotations": cloud.rotations,
        "log_scales": cloud.log_scales,
        "opacity_logits": cloud.opacity_logits,
        "colors": cloud.colors,
        "net": net.params,
    }
