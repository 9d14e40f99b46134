"""Scaled dot-product and multihead self-attention with Gaussian blurring.

Two blurring variants are supported. ``on_outputs`` convolves every head's
attention output along the sequence axis; ``on_values`` convolves the head's
values first and then applies the attention weights. The blur kernel is a
fixed, unnormalised Gaussian whose centre tap is exactly 1, so a window of
one tap leaves every head untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

BLUR_MODES = ("none", "on_outputs", "on_values")


@dataclass(frozen=True)
class AttentionConfig:
    """Dimensions and blur settings for one multihead attention sublayer.

    ``l`` is the maximum sequence length the layer is configured for; inputs
    may be shorter but must still be at least ``k`` long when blurring.
    """

    l: int
    d: int
    h: int
    blur_mode: str = "none"
    k: int = 3
    sigma: float = 0.1
    normalize_kernel: bool = False

    def __post_init__(self):
        if self.d <= 0 or self.h <= 0 or self.l <= 0:
            raise ConfigurationError(f"dimensions must be positive (l={self.l}, d={self.d}, h={self.h})")
        if self.d % self.h:
            raise ConfigurationError(f"model dimension d={self.d} is not divisible by head count h={self.h}")
        if self.blur_mode not in BLUR_MODES:
            raise ConfigurationError(f"blur_mode must be one of {BLUR_MODES}, got {self.blur_mode!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigurationError(f"window k must be a positive odd integer, got {self.k}")
        if self.k > self.l:
            raise ConfigurationError(f"window k={self.k} exceeds sequence length l={self.l}")
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    def kernel(self) -> "BlurKernel":
        return gaussian_kernel(self.k, self.sigma, normalize=self.normalize_kernel)


@dataclass(frozen=True)
class BlurKernel:
    taps: np.ndarray
    sigma: float

    @property
    def k(self) -> int:
        return int(self.taps.size)


@dataclass(frozen=True)
class AttentionOutput:
    """Concatenated output plus the per-head pieces it was built from."""

    output: Tensor
    weights: tuple[Tensor, ...]
    head_outputs: tuple[Tensor, ...]


def gaussian_kernel(k: int, sigma: float, normalize: bool = False) -> BlurKernel:
    """Taps ``exp(-(x - k//2)**2 / (2 sigma**2))`` for ``x = 0 .. k-1``.

    Left unnormalised by default, so the centre tap is exactly 1. Very small
    sigmas underflow the outer taps to 0.0.
    """
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {k!r}")
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma!r}")
    half = k // 2
    offsets = np.arange(k, dtype=np.float64) - half
    taps = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    if normalize:
        taps = taps / taps.sum()
    taps.flags.writeable = False
    return BlurKernel(taps=taps, sigma=float(sigma))


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(A, O)`` with ``A = softmax(Q K^T / sqrt(d'))`` and ``O = A V``.

    ``d'`` is the width of the queries actually passed in, so per-head calls
    scale by the head width.
    """
    if Q.shape[:-1] != V.shape[:-1]:
        raise DimensionError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    A = attention_weights(Q, K)
    return A, T.matmul(A, V)


def attention_weights(Q: Tensor, K: Tensor) -> Tensor:
    if Q.shape != K.shape:
        raise DimensionError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}")
    scores = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    return T.softmax_rows(scores)


def _check_window(x: Tensor, kernel: BlurKernel) -> None:
    if kernel.k > x.shape[-2]:
        raise ConfigurationError(f"window k={kernel.k} exceeds sequence length {x.shape[-2]}")


def blur_on_outputs(head_output: Tensor, kernel: BlurKernel) -> Tensor:
    """Convolve a head's output along the sequence axis, each feature column independently."""
    _check_window(head_output, kernel)
    return T.conv1d_same(head_output, kernel.taps, axis=-2)


def blur_on_values(values: Tensor, weights: Tensor, kernel: BlurKernel) -> Tensor:
    """Blur the head's values along the sequence axis, then apply attention weights."""
    _check_window(values, kernel)
    return T.matmul(weights, T.conv1d_same(values, kernel.taps, axis=-2))


def _project(X: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    out = T.matmul(X, weight)
    if bias is not None:
        out = T.add(out, T.broadcast_to(bias, out.shape))
    return out


def multihead_attention(X: Tensor, params: Mapping[str, Tensor], cfg: AttentionConfig) -> AttentionOutput:
    """Project ``X`` to queries/keys/values, attend per head, concatenate heads in order.

    ``params`` holds ``w_q``, ``w_k``, ``w_v`` (d x d) and optionally biases
    ``b_q``, ``b_k``, ``b_v``. ``X`` may carry leading batch axes.
    """
    if X.shape[-1] != cfg.d:
        raise DimensionError(f"input width {X.shape[-1]} does not match model dimension {cfg.d}")
    Q = _project(X, params["w_q"], params.get("b_q"))
    K = _project(X, params["w_k"], params.get("b_k"))
    V = _project(X, params["w_v"], params.get("b_v"))
    kernel = cfg.kernel() if cfg.blur_mode != "none" else None
    width = cfg.head_dim
    weights, heads = [], []
    for head in range(cfg.h):
        cols = (Ellipsis, slice(head * width, (head + 1) * width))
        Qh, Kh, Vh = Q[cols], K[cols], V[cols]
        if cfg.blur_mode == "on_values":
            A = attention_weights(Qh, Kh)
            Oh = blur_on_values(Vh, A, kernel)
        else:
            A, Oh = scaled_dot_attention(Qh, Kh, Vh)
            if cfg.blur_mode == "on_outputs":
                Oh = blur_on_outputs(Oh, kernel)
        weights.append(A)
        heads.append(Oh)
    output = heads[0] if cfg.h == 1 else T.concat(heads, axis=-1)
    return AttentionOutput(output=output, weights=tuple(weights), head_outputs=tuple(heads))
