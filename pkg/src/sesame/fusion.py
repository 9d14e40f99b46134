"""Squeeze-and-excitation over encoder layers, and layer pooling strategies.

The layer outputs are treated as channels: ``U`` has shape ``(..., l, d, n)``
and each of the ``n`` slices is squeezed to its mean, passed through a
bottlenecked ReLU/sigmoid gate, and rescaled by the resulting weight.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

POOLING_STRATEGIES = (
    "first",
    "second",
    "second_to_last",
    "last",
    "sum_last_four",
    "sum_all",
    "weighted_average",
)


@dataclass(frozen=True)
class SEConfig:
    n: int
    r: int
    bias: bool = False

    def __post_init__(self):
        if self.n < 1 or self.r < 1:
            raise ConfigurationError(f"n and r must be positive, got n={self.n}, r={self.r}")
        if self.n % self.r:
            raise ConfigurationError(f"layer count n={self.n} is not divisible by bottleneck r={self.r}")

    @property
    def hidden(self) -> int:
        return self.n // self.r

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"se.w1": (self.n, self.hidden), "se.w2": (self.hidden, self.n)}
        if self.bias:
            shapes.update({"se.b1": (self.hidden,), "se.b2": (self.n,)})
        return shapes


def default_ratio(n: int) -> int:
    """Bottleneck ratio used when none is configured: 4 if it divides n, else 2 if it does, else 1."""
    for r in (4, 2):
        if n % r == 0:
            return r
    return 1


@dataclass
class FusionState:
    z: Tensor
    s: Tensor
    u_tilde: Tensor
    pooled: Tensor


def squeeze(U: Tensor) -> Tensor:
    """Mean of each layer slice over positions and features: ``(..., l, d, n) -> (..., n)``."""
    if U.ndim < 3:
        raise DimensionError(f"squeeze expects (..., l, d, n), got {U.shape}")
    return T.mean(U, axis=(-3, -2))


def excite(z: Tensor, w1: Tensor, w2: Tensor, b1: Tensor | None = None, b2: Tensor | None = None) -> Tensor:
    """``sigmoid(relu(z W1 [+ b1]) W2 [+ b2])``; accepts ``z`` of shape ``(n,)`` or ``(batch, n)``."""
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, z.shape[0]))
    if z.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != z.shape[-1]:
        raise DimensionError(f"excite: z {z.shape}, W1 {w1.shape}, W2 {w2.shape} are inconsistent")
    hidden = T.matmul(z, w1)
    if b1 is not None:
        hidden = T.add(hidden, T.broadcast_to(b1, hidden.shape))
    gate = T.matmul(T.relu(hidden), w2)
    if b2 is not None:
        gate = T.add(gate, T.broadcast_to(b2, gate.shape))
    s = T.sigmoid(gate)
    return T.reshape(s, (s.shape[-1],)) if single else s


def _expand_weights(s: Tensor, U: Tensor) -> Tensor:
    if s.shape[-1] != U.shape[-1] or s.shape[:-1] != U.shape[:-3]:
        raise DimensionError(f"layer weights {s.shape} do not match feature maps {U.shape}")
    lead = s.shape[:-1]
    return T.broadcast_to(T.reshape(s, lead + (1, 1, s.shape[-1])), U.shape)


def rescale(U: Tensor, s: Tensor) -> Tensor:
    """Multiply layer slice ``k`` by ``s[k]``."""
    return T.mul(U, _expand_weights(s, U))


def weighted_average(U: Tensor, s: Tensor) -> Tensor:
    """``sum_k s[k] U[..., k] / sum_k s[k]``."""
    numerator = T.sum(rescale(U, s), axis=-1)
    total = T.sum(s, axis=-1)
    total = T.broadcast_to(T.reshape(total, total.shape + (1, 1)), numerator.shape)
    return T.div(numerator, total)


def _require_layers(strategy: str, n: int, needed: int) -> None:
    if n < needed:
        raise ConfigurationError(f"pooling strategy {strategy!r} needs at least {needed} layers, got {n}")


def pool(maps: Tensor, strategy: str, weights: Tensor | None = None) -> Tensor:
    """Reduce ``(..., l, d, n)`` feature maps to ``(..., l, d)`` by a named strategy.

    Layers are indexed from the bottom of the stack: ``first`` is the layer
    closest to the embeddings. ``weighted_average`` uses ``weights`` (all ones
    when omitted, i.e. a plain mean).
    """
    n = maps.shape[-1]
    if strategy == "first":
        return maps[..., 0]
    if strategy == "second":
        _require_layers(strategy, n, 2)
        return maps[..., 1]
    if strategy == "second_to_last":
        _require_layers(strategy, n, 2)
        return maps[..., n - 2]
    if strategy == "last":
        return maps[..., n - 1]
    if strategy == "sum_last_four":
        _require_layers(strategy, n, 4)
        return T.sum(maps[..., n - 4:], axis=-1)
    if strategy == "sum_all":
        return T.sum(maps, axis=-1)
    if strategy == "weighted_average":
        if weights is None:
            weights = T.Tensor(np.ones(maps.shape[:-3] + (n,)))
        return weighted_average(maps, weights)
    raise ConfigurationError(f"unknown pooling strategy {strategy!r}; choose from {POOLING_STRATEGIES}")


def se_fusion(U: Tensor, params: Mapping[str, Tensor], strategy: str = "weighted_average") -> FusionState:
    """Squeeze, excite and rescale ``U``, then pool.

    ``weighted_average`` is computed from ``U`` and the gate values directly;
    every other strategy selects from the rescaled maps.
    """
    z = squeeze(U)
    s = excite(z, params["se.w1"], params["se.w2"], params.get("se.b1"), params.get("se.b2"))
    u_tilde = rescale(U, s)
    if strategy == "weighted_average":
        pooled = weighted_average(U, s)
    else:
        pooled = pool(u_tilde, strategy)
    return FusionState(z=z, s=s, u_tilde=u_tilde, pooled=pooled)


def layer_weight_report(s) -> list[tuple[int, float]]:
    """``(layer, weight)`` rows, layers numbered from 1 at the bottom of the stack."""
    values = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64).reshape(-1)
    return [(k + 1, float(v)) for k, v in enumerate(values)]


def format_layer_weights_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "weight"])
    for layer, weight in rows:
        writer.writerow([layer, f"{weight:.17g}"])
    return buf.getvalue()


def write_layer_weights_csv(path, rows) -> Path:
    path = Path(path)
    path.write_text(format_layer_weights_csv(rows), encoding="utf-8")
    return path
