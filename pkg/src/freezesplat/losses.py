"""Photometric reconstruction loss with analytic pixel gradients.

Blend of mean absolute error and a structural dissimilarity term:
    (1 - w_ssim) * mean|r - t| + w_ssim * (1 - SSIM(r, t)) / 2
SSIM runs on luminance (channel mean) with an 11x11 Gaussian window
(sigma 1.5) over valid positions only; its gradient is derived by hand so the
whole training graph stays explicit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel(dtype):
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    k /= k.sum()
    return k.astype(dtype)


def _blur_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a symmetric kernel."""
    t = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(t, k.size, axis=1) @ k


def _blur_adjoint(grad: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_blur_valid` (maps valid-grid grads back to full size)."""
    pad = k.size - 1
    g = np.pad(grad, ((0, 0), (pad, pad)))
    g = sliding_window_view(g, k.size, axis=1) @ k
    g = np.pad(g, ((pad, pad), (0, 0)))
    return sliding_window_view(g, k.size, axis=0) @ k


def ssim_luminance(a: np.ndarray, b: np.ndarray, with_grad: bool = False):
    """Mean SSIM over valid windows of the channel-mean luminance.

    Returns the scalar, or (scalar, dSSIM/da pixels) when ``with_grad``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    H, W = a.shape[:2]
    if min(H, W) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px on each side for SSIM")
    ya = a.mean(axis=2) if a.ndim == 3 else a
    yb = b.mean(axis=2) if b.ndim == 3 else b
    k = _gaussian_kernel(ya.dtype)

    mu_a = _blur_valid(ya, k)
    mu_b = _blur_valid(yb, k)
    e_aa = _blur_valid(ya * ya, k)
    e_bb = _blur_valid(yb * yb, k)
    e_ab = _blur_valid(ya * yb, k)
    va = e_aa - mu_a * mu_a
    vb = e_bb - mu_b * mu_b
    vab = e_ab - mu_a * mu_b

    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    n1 = 2.0 * mu_a * mu_b + c1
    n2 = 2.0 * vab + c2
    d1 = mu_a * mu_a + mu_b * mu_b + c1
    d2 = va + vb + c2
    smap = (n1 * n2) / (d1 * d2)
    value = float(smap.mean())
    if not with_grad:
        return value

    npix = smap.size
    ds_dn1 = n2 / (d1 * d2) / npix
    ds_dn2 = n1 / (d1 * d2) / npix
    ds_dd1 = -smap / d1 / npix
    ds_dd2 = -smap / d2 / npix

    g_mu_a = ds_dn1 * 2.0 * mu_b - ds_dn2 * 2.0 * mu_b + ds_dd1 * 2.0 * mu_a - ds_dd2 * 2.0 * mu_a
    g_eaa = ds_dd2
    g_eab = 2.0 * ds_dn2

    grad_y = _blur_adjoint(g_mu_a, k) + 2.0 * ya * _blur_adjoint(g_eaa, k) + yb * _blur_adjoint(g_eab, k)
    if a.ndim == 3:
        grad = np.repeat(grad_y[:, :, None] / 3.0, 3, axis=2).astype(a.dtype)
    else:
        grad = grad_y.astype(a.dtype)
    return value, grad


def recon_loss(rendered: np.ndarray, target: np.ndarray, w_ssim: float = 0.2):
    """Photometric loss and its analytic gradient with respect to the rendered pixels."""
    rendered = np.asarray(rendered)
    target = np.asarray(target).astype(rendered.dtype, copy=False)
    if rendered.shape != target.shape:
        raise ContractViolation(f"shape mismatch {rendered.shape} vs {target.shape}")
    if not 0.0 <= w_ssim <= 1.0:
        raise ValueError("w_ssim must be in [0, 1]")

    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    loss = (1.0 - w_ssim) * l1
    grad = (1.0 - w_ssim) * grad
    if w_ssim > 0.0:
        s, ds = ssim_luminance(rendered, target, with_grad=True)
        loss += w_ssim * (1.0 - s) / 2.0
        grad = grad - (w_ssim / 2.0) * ds
    return loss, grad.astype(rendered.dtype, copy=False)
