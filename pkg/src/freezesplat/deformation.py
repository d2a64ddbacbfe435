"""Deformation field: an MLP mapping (canonical position, time) to parameter deltas.

Forward and reverse passes are hand-written over numpy so the whole training
graph stays dependency-free and bit-reproducible. Head output layers are
zero-initialized, which makes the net an exact identity at initialization.

Flat parameter layout (row-major weight matrices, then bias), in order:
  W0 (64 x 40), b0, W1 (64 x 64), b1, W2 (64 x 64), b2,
  W_mu (3 x 64), b_mu, W_q (4 x 64), b_q, W_s (3 x 64), b_s, W_o (1 x 64), b_o
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericError
from .scene import GaussianCloud, normalize_quaternions

POSITION_FREQS = 4
TIME_FREQS = 6
HIDDEN = 64
N_HIDDEN_LAYERS = 3

HEAD_DIMS = (("mu", 3), ("quat", 4), ("scale", 3), ("opacity", 1))


def encoding_dim(d: int, L: int) -> int:
    return d * (1 + 2 * L)


def encode(x: np.ndarray, L: int) -> np.ndarray:
    """Frequency-encode each component: [x, sin(2^l pi x), cos(2^l pi x)] for l < L.

    x: (..., d) -> (..., d * (1 + 2L)), per-component blocks concatenated.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x)
    d = x.shape[-1]
    out = np.empty(x.shape[:-1] + (d * (1 + 2 * L),), dtype=x.dtype)
    for c in range(d):
        base = c * (1 + 2 * L)
        xc = x[..., c]
        out[..., base] = xc
        for l in range(L):
            arg = (np.pi * (2.0**l)) * xc
            out[..., base + 1 + 2 * l] = np.sin(arg)
            out[..., base + 2 + 2 * l] = np.cos(arg)
    return out


def encode_backward(x: np.ndarray, L: int, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate d(encode)/dx^T @ grad_out back onto the raw components."""
    x = np.asarray(x)
    d = x.shape[-1]
    grad_x = np.zeros_like(x)
    for c in range(d):
        base = c * (1 + 2 * L)
        xc = x[..., c]
        g = grad_out[..., base].copy()
        for l in range(L):
            w = np.pi * (2.0**l)
            arg = w * xc
            g += grad_out[..., base + 1 + 2 * l] * (w * np.cos(arg))
            g += grad_out[..., base + 2 + 2 * l] * (-w * np.sin(arg))
        grad_x[..., c] = g
    return grad_x


def _layer_sizes():
    in_dim = encoding_dim(3, POSITION_FREQS) + encoding_dim(1, TIME_FREQS)
    sizes = []
    prev = in_dim
    for _ in range(N_HIDDEN_LAYERS):
        sizes.append((HIDDEN, prev))
        prev = HIDDEN
    for _, hd in HEAD_DIMS:
        sizes.append((hd, prev))
    return in_dim, sizes


class DeformationNet:
    """Time-conditioned delta predictor over all primitives at once.

    ``params`` is a single flat array; per-layer weights/biases are views into
    it, so optimizer updates on the flat array are visible to the forward pass.
    """

    def __init__(self, params: np.ndarray):
        in_dim, sizes = _layer_sizes()
        self.in_dim = in_dim
        expected = sum(o * i + o for o, i in sizes)
        params = np.asarray(params)
        if params.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {params.shape}")
        self.params = params
        self.weights = []
        self.biases = []
        off = 0
        for o, i in sizes:
            self.weights.append(params[off : off + o * i].reshape(o, i))
            off += o * i
            self.biases.append(params[off : off + o])
            off += o
        # forward invocation counter; freeze rendering asserts it stays at 1 per instant
        self.deform_calls = 0

    @classmethod
    def zeros(cls, dtype=np.float64) -> "DeformationNet":
        _, sizes = _layer_sizes()
        n = sum(o * i + o for o, i in sizes)
        return cls(np.zeros(n, dtype=dtype))

    @classmethod
    def initialized(cls, seed: int, dtype=np.float64) -> "DeformationNet":
        """He-initialized hidden layers, zero heads (identity at init)."""
        net = cls.zeros(dtype=dtype)
        rng = np.random.default_rng(seed)
        for li in range(N_HIDDEN_LAYERS):
            W = net.weights[li]
            W[...] = (rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[1])).astype(dtype)
        return net

    @property
    def num_params(self) -> int:
        return self.params.shape[0]

    def copy(self) -> "DeformationNet":
        other = DeformationNet(self.params.copy())
        other.deform_calls = self.deform_calls
        return other

    def astype(self, dtype) -> "DeformationNet":
        return DeformationNet(self.params.astype(dtype))

    def zero_grad_like(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def _check_finite(self):
        if not np.all(np.isfinite(self.params)):
            off = 0
            _, sizes = _layer_sizes()
            names = [f"hidden{i}" for i in range(N_HIDDEN_LAYERS)] + [f"head_{n}" for n, _ in HEAD_DIMS]
            for name, (o, i) in zip(names, sizes):
                block = self.params[off : off + o * i + o]
                off += o * i + o
                if not np.all(np.isfinite(block)):
                    raise NumericError(f"non-finite weights in layer {name}")
            raise NumericError("non-finite weights")


@dataclass
class DeformedState:
    """Per-primitive parameters at a fixed time t, plus the cache for backward.

    Rotations are stored post-normalization; ``as_param_matrix`` yields the
    (K, 14) layout shared with the canonical cloud, which is what anchoring
    compares.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    t: float
    cache: dict

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def as_param_matrix(self) -> np.ndarray:
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


def _forward_mlp(net: DeformationNet, cloud: GaussianCloud, t: float):
    enc_pos = encode(cloud.positions, POSITION_FREQS)
    t_arr = np.full((cloud.count, 1), t, dtype=cloud.positions.dtype)
    enc_t = encode(t_arr, TIME_FREQS)
    x = np.concatenate([enc_pos, enc_t], axis=1)
    acts = [x]
    h = x
    for li in range(N_HIDDEN_LAYERS):
        z = h @ net.weights[li].T + net.biases[li]
        h = np.maximum(z, 0.0)
        acts.append(h)
    heads = {}
    for hi, (name, _) in enumerate(HEAD_DIMS):
        li = N_HIDDEN_LAYERS + hi
        heads[name] = h @ net.weights[li].T + net.biases[li]
    return heads, acts


def deform(net: DeformationNet, cloud: GaussianCloud, t: float) -> DeformedState:
    """One batched forward pass over all K primitives at time t."""
    net._check_finite()
    net.deform_calls += 1
    heads, acts = _forward_mlp(net, cloud, t)

    positions = cloud.positions + heads["mu"]
    q_pre = cloud.rotations + heads["quat"]
    n2 = np.sum(q_pre * q_pre, axis=1, keepdims=True)
    norm = np.sqrt(n2)
    rotations = np.where(n2 == 1.0, q_pre, q_pre / norm)
    log_scales = cloud.log_scales + heads["scale"]
    opacity_logits = cloud.opacity_logits + heads["opacity"][:, 0]

    cache = {"acts": acts, "q_pre": q_pre, "q_norm": norm, "rotations": rotations, "K": cloud.count}
    return DeformedState(
        positions=positions,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=opacity_logits,
        colors=cloud.colors,
        t=float(t),
        cache=cache,
    )


def deform_backward(
    net: DeformationNet,
    cloud: GaussianCloud,
    state: DeformedState,
    grad_positions: np.ndarray,
    grad_rotations: np.ndarray,
    grad_log_scales: np.ndarray,
    grad_opacity_logits: np.ndarray,
    grad_colors: np.ndarray,
):
    """Reverse pass for :func:`deform`.

    Returns (grad wrt net.params flat array, dict of grads wrt canonical cloud
    arrays). Canonical positions get the identity path plus the encoder path;
    rotations flow through the post-delta normalization.
    """
    if state.count != cloud.count or state.cache.get("K") != cloud.count:
        raise ContractViolation("deformed state does not match this cloud")
    acts = state.cache["acts"]
    q_pre = state.cache["q_pre"]
    norm = state.cache["q_norm"]
    q_hat = state.cache["rotations"]

    # normalize backward: d(q/|q|) = (g - q_hat (q_hat . g)) / |q|
    dot = np.sum(q_hat * grad_rotations, axis=1, keepdims=True)
    grad_q_pre = (grad_rotations - q_hat * dot) / norm

    head_grads = {
        "mu": np.asarray(grad_positions),
        "quat": grad_q_pre,
        "scale": np.asarray(grad_log_scales),
        "opacity": np.asarray(grad_opacity_logits)[:, None],
    }

    param_grad = net.zero_grad_like()
    grads_flat = DeformationNet(param_grad)  # views into param_grad

    h_last = acts[-1]
    grad_h = np.zeros_like(h_last)
    for hi, (name, _) in enumerate(HEAD_DIMS):
        li = N_HIDDEN_LAYERS + hi
        g = head_grads[name]
        grads_flat.weights[li][...] = g.T @ h_last
        grads_flat.biases[li][...] = g.sum(axis=0)
        grad_h += g @ net.weights[li]

    for li in range(N_HIDDEN_LAYERS - 1, -1, -1):
        h_out = acts[li + 1]
        grad_z = grad_h * (h_out > 0.0)
        grads_flat.weights[li][...] = grad_z.T @ acts[li]
        grads_flat.biases[li][...] = grad_z.sum(axis=0)
        grad_h = grad_z @ net.weights[li]

    # encoder path back to canonical positions (time encoding grads are dropped)
    pos_dim = encoding_dim(3, POSITION_FREQS)
    grad_pos_enc = grad_h[:, :pos_dim]
    grad_positions_canon = np.asarray(grad_positions) + encode_backward(
        cloud.positions, POSITION_FREQS, grad_pos_enc
    )

    canonical = {
        "positions": grad_positions_canon,
        "rotations": grad_q_pre.copy(),
        "log_scales": np.asarray(grad_log_scales).copy(),
        "opacity_logits": np.asarray(grad_opacity_logits).copy(),
        "colors": np.asarray(grad_colors).copy(),
    }
    return param_grad, canonical
