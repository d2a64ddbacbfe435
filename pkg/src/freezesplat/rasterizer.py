"""Differentiable tile-based software splatting.

Forward: perspective-project every primitive, bin to 16x16 tiles by the 3-sigma
radius, then alpha-composite front-to-back per pixel (global stable depth sort,
ties by primitive index). Backward: exact reverse-mode gradients to all
primitive parameters, plus the per-primitive visibility/gradient statistics the
supervision classifier consumes.

Contribution rule (shared with the brute-force oracle in the tests): a splat
contributes to a pixel iff the pixel lies inside the splat's integer bounding
box (center +- radius), its alpha passes the skip threshold, and the pixel's
transmittance has not dropped below the early-exit floor. Primitives whose
center fails the frustum test contribute nothing and receive exactly zero
gradients.

Per-pixel accumulation order is fixed by the global sort, so renders are
independent of tile schedule and worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, RenderError
from .scene import CameraModel, normalize_quaternions, quat_to_rotmat, sigmoid


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 16
    blur_floor: float = 0.3  # px^2 added to cov2d diagonal (anti-alias + invertibility)
    alpha_cap: float = 0.99
    skip_alpha: float = 1.0 / 255.0  # below this a splat does not touch the pixel
    min_transmittance: float = 1e-4  # early-exit floor; the source of "defective" states
    workers: int = 1


@dataclass
class ProjectedGaussian:
    """Single-primitive view into a :class:`ProjectionBatch`."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    alpha_base: float
    color: np.ndarray
    radius: float
    in_frustum: bool


class ProjectionBatch:
    """Struct-of-arrays result of :func:`project`, indexable like a list."""

    def __init__(self, arrays: dict, camera: CameraModel, pose, config: RasterConfig):
        self.__dict__.update(arrays)
        self.camera = camera
        self.pose = pose
        self.config = config

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def __getitem__(self, k: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            mean2d=self.mean2d[k],
            cov2d=self.cov2d[k],
            depth=float(self.depth[k]),
            alpha_base=float(self.alpha_base[k]),
            color=self.color[k],
            radius=float(self.radius[k]),
            in_frustum=bool(self.in_frustum[k]),
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))


@dataclass
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    transmittance_map: np.ndarray  # (H, W) final T


class RenderStats:
    """Per-primitive statistics from one frame's forward+backward."""

    def __init__(self, visible, grad_norm_mean2d, pixels_touched):
        self.visible = visible
        self.grad_norm_mean2d = grad_norm_mean2d
        self.pixels_touched = pixels_touched

    def __len__(self) -> int:
        return self.visible.shape[0]


@dataclass
class ParamGradients:
    """Loss gradients with respect to the (possibly deformed) primitive parameters."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray  # accumulated screen-space mean gradient (the stats source)


def frustum_test(mu, pose, camera: CameraModel) -> bool:
    """Center-only frustum predicate: near <= z <= far and pixel inside bounds."""
    R, b = pose
    x = np.asarray(R, dtype=np.float64) @ np.asarray(mu, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    z = x[2]
    if not (camera.near <= z <= camera.far):
        return False
    u = camera.cx + camera.fx * x[0] / z
    v = camera.cy + camera.fy * x[1] / z
    return (0.0 <= u < camera.width) and (0.0 <= v < camera.height)


def project(state, camera: CameraModel, pose, config: RasterConfig | None = None) -> ProjectionBatch:
    """Project primitives to screen space; total function, z <= 0 just leaves the frustum.

    ``state`` needs positions/rotations/log_scales/opacity_logits/colors arrays
    (a GaussianCloud or a DeformedState). The returned batch carries the
    intermediates later needed by the backward pass.
    """
    cfg = config or RasterConfig()
    R_pose = np.asarray(pose[0])
    b_pose = np.asarray(pose[1]).reshape(3)
    mu = state.positions
    dtype = mu.dtype
    R_pose = R_pose.astype(dtype, copy=False)
    b_pose = b_pose.astype(dtype, copy=False)
    K = mu.shape[0]

    q_in = state.rotations
    q_hat = normalize_quaternions(q_in)
    q_norm = np.sqrt(np.sum(q_in * q_in, axis=1))
    R3 = quat_to_rotmat(q_hat)
    scale_sq = np.exp(2.0 * state.log_scales)
    sigma3 = np.einsum("kij,kj,klj->kil", R3, scale_sq, R3)
    sigma_cam = np.einsum("ij,kjl,ml->kim", R_pose, sigma3, R_pose)

    x_cam = mu @ R_pose.T + b_pose
    z = x_cam[:, 2]
    div_z = np.where(z != 0.0, z, np.asarray(1.0, dtype=dtype))
    u = camera.cx + camera.fx * x_cam[:, 0] / div_z
    v = camera.cy + camera.fy * x_cam[:, 1] / div_z

    in_frustum = (
        (z != 0.0)
        & (z >= camera.near)
        & (z <= camera.far)
        & (u >= 0.0)
        & (u < camera.width)
        & (v >= 0.0)
        & (v < camera.height)
    )

    # culled rows never contribute; give them unit depth so their (unused)
    # screen-space quantities stay finite instead of overflowing near z = 0
    safe_z = np.where(in_frustum, z, np.asarray(1.0, dtype=dtype))
    inv_z = 1.0 / safe_z
    inv_z2 = inv_z * inv_z
    J = np.zeros((K, 2, 3), dtype=dtype)
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * x_cam[:, 0] * inv_z2
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * x_cam[:, 1] * inv_z2

    cov2d = np.einsum("kai,kij,kbj->kab", J, sigma_cam, J)
    cov2d[:, 0, 0] += cfg.blur_floor
    cov2d[:, 1, 1] += cfg.blur_floor

    a, b2, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b2 * b2
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(mid + disc)

    inv_det = np.where(det != 0.0, 1.0 / np.where(det != 0.0, det, 1.0), 0.0)
    lam = np.empty_like(cov2d)
    lam[:, 0, 0] = c * inv_det
    lam[:, 0, 1] = -b2 * inv_det
    lam[:, 1, 0] = -b2 * inv_det
    lam[:, 1, 1] = a * inv_det

    # integer bbox of pixels possibly touched: center +- radius, clipped to the
    # image. Culled rows get an empty box; non-finite radii are clamped here and
    # rejected later by rasterize_forward's finiteness check.
    u_b = np.where(in_frustum, u, 0.0)
    v_b = np.where(in_frustum, v, 0.0)
    r_b = np.where(in_frustum, np.nan_to_num(radius, nan=1e9, posinf=1e9, neginf=0.0), -1.0)
    x0 = np.maximum(np.ceil(u_b - r_b), 0.0).astype(np.int64)
    x1 = np.minimum(np.floor(u_b + r_b), camera.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v_b - r_b), 0.0).astype(np.int64)
    y1 = np.minimum(np.floor(v_b + r_b), camera.height - 1).astype(np.int64)

    arrays = {
        "mean2d": np.stack([u, v], axis=1),
        "cov2d": cov2d,
        "lam": lam,
        "depth": z,
        "alpha_base": sigmoid(state.opacity_logits),
        "color": state.colors,
        "radius": radius,
        "in_frustum": in_frustum,
        "safe_z": safe_z,
        "x_cam": x_cam,
        "J": J,
        "sigma_cam": sigma_cam,
        "sigma3": sigma3,
        "R3": R3,
        "q_hat": q_hat,
        "q_norm": q_norm,
        "scale_sq": scale_sq,
        "bbox": np.stack([x0, x1, y0, y1], axis=1),
    }
    return ProjectionBatch(arrays, camera, (R_pose, b_pose), cfg)


class ForwardState:
    """Everything rasterize_backward needs; per-tile work is recomputed there."""

    def __init__(self, proj, order, tiles, tile_rects, image, background):
        self.proj = proj
        self.order = order  # global front-to-back splat order (depth, then index)
        self.tiles = tiles  # tile -> splat ids in global order
        self.tile_rects = tile_rects
        self.image = image
        self.background = background
        self.pixels_touched = None
        self.cores = None  # per-tile intermediates kept for the backward pass


def _tile_grid(camera: CameraModel, tile_size: int):
    nx = (camera.width + tile_size - 1) // tile_size
    ny = (camera.height + tile_size - 1) // tile_size
    rects = []
    for ty in range(ny):
        for tx in range(nx):
            rects.append(
                (
                    tx * tile_size,
                    min((tx + 1) * tile_size, camera.width) - 1,
                    ty * tile_size,
                    min((ty + 1) * tile_size, camera.height) - 1,
                )
            )
    return nx, ny, rects


def _tile_core(proj: ProjectionBatch, cfg: RasterConfig, rect, ids):
    """Per-tile alphas and transmittance, shared by forward and backward.

    The quadratic form splits into separable x/y pieces, so distances stay in
    (S, W)/(S, H) arrays and only the combination runs at (S, H, W) size.
    Returns None when no splat overlaps the tile.
    """
    if len(ids) == 0:
        return None
    x0t, x1t, y0t, y1t = rect
    dtype = proj.mean2d.dtype
    xs = np.arange(x0t, x1t + 1, dtype=dtype)
    ys = np.arange(y0t, y1t + 1, dtype=dtype)
    S, H, W = len(ids), ys.size, xs.size
    P = H * W

    mean = proj.mean2d[ids]
    lam = proj.lam[ids]
    bbox = proj.bbox[ids]
    dx = xs[None, :] - mean[:, 0:1]  # (S, W)
    dy = ys[None, :] - mean[:, 1:2]  # (S, H)

    qx = (0.5 * lam[:, 0, 0])[:, None] * dx * dx
    bx = lam[:, 0, 1][:, None] * dx
    qy = (0.5 * lam[:, 1, 1])[:, None] * dy * dy
    sq = bx[:, None, :] * dy[:, :, None]
    sq += qx[:, None, :]
    sq += qy[:, :, None]
    np.negative(sq, out=sq)
    np.exp(sq, out=sq)
    g = sq.reshape(S, P)

    alpha_raw = proj.alpha_base[ids][:, None] * g
    alpha = np.minimum(alpha_raw, dtype.type(cfg.alpha_cap))

    x_ok = (xs[None, :] >= bbox[:, 0:1]) & (xs[None, :] <= bbox[:, 1:2])
    y_ok = (ys[None, :] >= bbox[:, 2:3]) & (ys[None, :] <= bbox[:, 3:4])
    live = (y_ok[:, :, None] & x_ok[:, None, :]).reshape(S, P)
    live &= alpha >= cfg.skip_alpha
    alpha_live = alpha * live

    T_all = np.empty((S + 1, P), dtype=dtype)
    T_all[0] = 1.0
    np.cumprod(1.0 - alpha_live, axis=0, out=T_all[1:])
    T_before = T_all[:-1]
    open_px = T_before >= cfg.min_transmittance
    processed = live & open_px
    wgt = alpha_live * T_before
    wgt *= open_px

    # early exit freezes T at its first sub-threshold value; T is monotone,
    # so the last row tells whether any pixel crossed at all
    crossed = T_all[-1] < cfg.min_transmittance
    if crossed.any():
        first = (T_all < cfg.min_transmittance).argmax(axis=0)
        frozen = np.take_along_axis(T_all, first[None, :], axis=0)[0]
        T_final = np.where(crossed, frozen, T_all[-1])
    else:
        T_final = T_all[-1]

    return {
        "dx": dx,
        "dy": dy,
        "g": g,
        "alpha_raw": alpha_raw,
        "alpha_live": alpha_live,
        "processed": processed,
        "wgt": wgt,
        "T_before": T_before,
        "T_final": T_final,
        "hw": (H, W),
    }


def _run_tiles(fn, n_tiles, workers):
    if workers <= 1:
        return [fn(i) for i in range(n_tiles)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_tiles)))


def rasterize_forward(
    proj: ProjectionBatch,
    camera: CameraModel,
    background,
    config: RasterConfig | None = None,
):
    """Composite the projected splats over a constant background.

    Returns (RenderedImage, ForwardState); the state carries the global splat
    order and the tile binning reused by :func:`rasterize_backward`.
    """
    cfg = config or proj.config
    dtype = proj.mean2d.dtype
    bg = np.asarray(background, dtype=dtype).reshape(3)
    K = len(proj)

    fin = proj.in_frustum
    for name in ("mean2d", "cov2d", "depth", "alpha_base", "color"):
        arr = getattr(proj, name)
        bad = ~np.all(np.isfinite(arr.reshape(K, -1)), axis=1) & fin
        if bad.any():
            raise RenderError(f"non-finite {name} for primitive {int(np.flatnonzero(bad)[0])}")

    idx_in = np.flatnonzero(fin)
    order = idx_in[np.lexsort((idx_in, proj.depth[idx_in]))]

    nx, ny, rects = _tile_grid(camera, cfg.tile_size)
    tiles = [[] for _ in rects]
    ts = cfg.tile_size
    bbox = proj.bbox
    for s in order:
        for ty in range(bbox[s, 2] // ts, bbox[s, 3] // ts + 1):
            row = ty * nx
            for tx in range(bbox[s, 0] // ts, bbox[s, 1] // ts + 1):
                tiles[row + tx].append(s)
    tiles = [np.asarray(t, dtype=np.int64) for t in tiles]

    image = np.empty((camera.height, camera.width, 3), dtype=dtype)
    tmap = np.empty((camera.height, camera.width), dtype=dtype)
    touched = np.zeros(K, dtype=np.int64)

    def do_tile(i):
        core = _tile_core(proj, cfg, rects[i], tiles[i])
        if core is None:
            return None
        tile_color = core["wgt"].T @ proj.color[tiles[i]]
        tile_color += core["T_final"][:, None] * bg[None, :]
        return tile_color, core

    results = _run_tiles(do_tile, len(rects), cfg.workers)
    cores = []
    for i, res in enumerate(results):
        x0t, x1t, y0t, y1t = rects[i]
        h, w = y1t - y0t + 1, x1t - x0t + 1
        if res is None:
            image[y0t : y1t + 1, x0t : x1t + 1] = bg
            tmap[y0t : y1t + 1, x0t : x1t + 1] = 1.0
            cores.append(None)
        else:
            tile_color, core = res
            image[y0t : y1t + 1, x0t : x1t + 1] = tile_color.reshape(h, w, 3)
            tmap[y0t : y1t + 1, x0t : x1t + 1] = core["T_final"].reshape(h, w)
            touched[tiles[i]] += core["processed"].sum(axis=1)
            cores.append(core)

    state = ForwardState(proj, order, tiles, rects, RenderedImage(image, tmap), bg)
    state.pixels_touched = touched
    state.cores = cores
    return state.image, state


def _quat_rotmat_backward(q_hat: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Contract dL/dR (K,3,3) with dR/dq at unit quaternions -> dL/dq_hat (K,4)."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    g = np.empty_like(q_hat)
    g[:, 0] = 2.0 * (
        -z * dR[:, 0, 1] + y * dR[:, 0, 2] + z * dR[:, 1, 0] - x * dR[:, 1, 2] - y * dR[:, 2, 0] + x * dR[:, 2, 1]
    )
    g[:, 1] = 2.0 * (
        y * dR[:, 0, 1] + z * dR[:, 0, 2] + y * dR[:, 1, 0] - 2 * x * dR[:, 1, 1] - w * dR[:, 1, 2]
        + z * dR[:, 2, 0] + w * dR[:, 2, 1] - 2 * x * dR[:, 2, 2]
    )
    g[:, 2] = 2.0 * (
        -2 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2] + x * dR[:, 1, 0] + z * dR[:, 1, 2]
        - w * dR[:, 2, 0] + z * dR[:, 2, 1] - 2 * y * dR[:, 2, 2]
    )
    g[:, 3] = 2.0 * (
        -2 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2] + w * dR[:, 1, 0] - 2 * z * dR[:, 1, 1]
        + y * dR[:, 1, 2] + x * dR[:, 2, 0] + y * dR[:, 2, 1]
    )
    return g


def rasterize_backward(grad_pixels: np.ndarray, state: ForwardState):
    """Chain dLoss/dpixels back to primitive parameters.

    Returns (ParamGradients, RenderStats). grad_norm_mean2d is the L2 norm of
    the frame-accumulated screen-space mean gradient, the statistic the
    supervision classifier thresholds.
    """
    proj = state.proj
    cfg = proj.config
    camera = proj.camera
    K = len(proj)
    dtype = proj.mean2d.dtype
    grad_pixels = np.asarray(grad_pixels)
    if grad_pixels.shape != state.image.pixels.shape:
        raise ContractViolation(
            f"grad_pixels shape {grad_pixels.shape} does not match rendered {state.image.pixels.shape}"
        )

    d_alpha_base = np.zeros(K, dtype=dtype)
    d_mean2d = np.zeros((K, 2), dtype=dtype)
    d_lam = np.zeros((K, 2, 2), dtype=dtype)
    d_color = np.zeros((K, 3), dtype=dtype)
    bg = state.background

    def do_tile(i):
        ids = state.tiles[i]
        core = state.cores[i]
        if core is None:
            return None
        x0t, x1t, y0t, y1t = state.tile_rects[i]
        wpix = grad_pixels[y0t : y1t + 1, x0t : x1t + 1].reshape(-1, 3)

        # collapse channels first: everything below works on (S, P) arrays
        cw = proj.color[ids] @ wpix.T  # per-splat color . upstream, per pixel
        bg_dot = wpix @ bg
        wc = core["wgt"] * cw
        after = np.cumsum(wc[::-1], axis=0)[::-1]
        after -= wc  # exclusive suffix: contributions composited behind each splat
        after += (core["T_final"] * bg_dot)[None, :]

        d_alpha = core["T_before"] * cw
        d_alpha -= after / (1.0 - core["alpha_live"])
        d_alpha *= core["processed"]
        d_alpha_raw = np.where(core["alpha_raw"] > cfg.alpha_cap, 0.0, d_alpha)  # min() gate

        p1 = d_alpha_raw * core["g"]
        d_ab = p1.sum(axis=1)
        d_sq = p1 * (-proj.alpha_base[ids][:, None])  # dL/d(quadratic form)

        H, W = core["hw"]
        dsq3 = d_sq.reshape(len(ids), H, W)
        dx, dy = core["dx"], core["dy"]
        dw = dsq3.sum(axis=1)
        dh = dsq3.sum(axis=2)
        s_x = (dw * dx).sum(axis=1)
        s_xx = (dw * dx * dx).sum(axis=1)
        s_y = (dh * dy).sum(axis=1)
        s_yy = (dh * dy * dy).sum(axis=1)
        s_xy = (np.einsum("shw,sw->sh", dsq3, dx) * dy).sum(axis=1)

        lam = proj.lam[ids]
        dm = np.stack(
            [
                -(lam[:, 0, 0] * s_x + lam[:, 0, 1] * s_y),
                -(lam[:, 0, 1] * s_x + lam[:, 1, 1] * s_y),
            ],
            axis=1,
        )
        dl = np.empty((len(ids), 2, 2), dtype=dtype)
        dl[:, 0, 0] = 0.5 * s_xx
        dl[:, 0, 1] = 0.5 * s_xy
        dl[:, 1, 0] = dl[:, 0, 1]
        dl[:, 1, 1] = 0.5 * s_yy

        dc = core["wgt"] @ wpix
        return d_ab, dm, dl, dc

    results = _run_tiles(do_tile, len(state.tile_rects), cfg.workers)
    for i, res in enumerate(results):
        if res is None:
            continue
        ids = state.tiles[i]
        d_ab, dm, dl, dc = res
        np.add.at(d_alpha_base, ids, d_ab)
        np.add.at(d_mean2d, ids, dm)
        np.add.at(d_lam, ids, dl)
        np.add.at(d_color, ids, dc)

    grad_norm = np.sqrt((d_mean2d**2).sum(axis=1))
    stats = RenderStats(
        visible=state.pixels_touched >= 1,
        grad_norm_mean2d=grad_norm,
        pixels_touched=state.pixels_touched.copy(),
    )

    # ---- chain back through projection and covariance factorization ----
    lam = proj.lam
    G2 = -np.einsum("kab,kbc,kcd->kad", lam, d_lam, lam)  # d cov2d (Lambda = cov2d^-1)
    J = proj.J
    d_sigma_cam = np.einsum("kai,kab,kbj->kij", J, G2, J)
    dJ = 2.0 * np.einsum("kab,kbi,kij->kaj", G2, J, proj.sigma_cam)

    z = proj.safe_z
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    fx, fy = camera.fx, camera.fy
    xc = proj.x_cam
    d_xcam = np.einsum("kai,ka->ki", J, d_mean2d)
    d_xcam[:, 0] += dJ[:, 0, 2] * (-fx * inv_z2)
    d_xcam[:, 1] += dJ[:, 1, 2] * (-fy * inv_z2)
    d_xcam[:, 2] += (
        dJ[:, 0, 0] * (-fx * inv_z2)
        + dJ[:, 0, 2] * (2.0 * fx * xc[:, 0] * inv_z3)
        + dJ[:, 1, 1] * (-fy * inv_z2)
        + dJ[:, 1, 2] * (2.0 * fy * xc[:, 1] * inv_z3)
    )

    R_pose = proj.pose[0]
    d_mu = d_xcam @ R_pose
    G3 = np.einsum("ji,kjl,lm->kim", R_pose, d_sigma_cam, R_pose)

    R3 = proj.R3
    dD = np.einsum("kji,kjl,klm->kim", R3, G3, R3)
    d_log_scales = 2.0 * proj.scale_sq * np.einsum("kii->ki", dD)
    dR3 = 2.0 * np.einsum("kab,kbi->kai", G3, R3) * proj.scale_sq[:, None, :]

    d_qhat = _quat_rotmat_backward(proj.q_hat, dR3)
    dot = np.sum(proj.q_hat * d_qhat, axis=1, keepdims=True)
    d_q = (d_qhat - proj.q_hat * dot) / proj.q_norm[:, None]

    ab = proj.alpha_base
    d_opacity = d_alpha_base * ab * (1.0 - ab)

    # contract: culled primitives receive exactly zero gradients
    out = ~proj.in_frustum
    for arr in (d_mu, d_q, d_log_scales, d_color, d_mean2d):
        arr[out] = 0.0
    d_opacity[out] = 0.0

    grads = ParamGradients(
        positions=d_mu,
        rotations=d_q,
        log_scales=d_log_scales,
        opacity_logits=d_opacity,
        colors=d_color,
        mean2d=d_mean2d,
    )
    return grads, stats


def render(state_like, camera: CameraModel, pose, background, config: RasterConfig | None = None):
    """project + rasterize_forward in one call."""
    proj = project(state_like, camera, pose, config)
    return rasterize_forward(proj, camera, background, config)
