"""Encoder + layer fusion + classification head, as one parameter mapping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .encoder import INIT_STD, EncoderConfig, encoder_stack_forward, truncated_normal
from .encoder import init_params as init_encoder_params
from .encoder import param_shapes as encoder_shapes
from .errors import ConfigurationError, DimensionError
from .fusion import POOLING_STRATEGIES, FusionState, SEConfig, default_ratio, pool, se_fusion
from .tensor import Tensor

REDUCTIONS = ("first", "mean")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_len: int = 16
    d: int = 16
    h: int = 2
    n_layers: int = 2
    d_ff: int | None = None
    blur_mode: str = "none"
    k: int = 3
    sigma: float = 0.1
    normalize_kernel: bool = False
    init_std: float = INIT_STD
    se: bool = True
    r: int | None = None
    se_bias: bool = False
    pooling: str = "weighted_average"
    reduce: str = "first"
    n_classes: int = 2

    def __post_init__(self):
        self.encoder  # validates the encoder fields
        if self.se:
            self.se_config
        if self.pooling not in POOLING_STRATEGIES:
            raise ConfigurationError(f"unknown pooling strategy {self.pooling!r}; choose from {POOLING_STRATEGIES}")
        needed = {"second": 2, "second_to_last": 2, "sum_last_four": 4}.get(self.pooling, 1)
        if self.n_layers < needed:
            raise ConfigurationError(f"pooling strategy {self.pooling!r} needs at least {needed} layers, got {self.n_layers}")
        if self.reduce not in REDUCTIONS:
            raise ConfigurationError(f"reduce must be one of {REDUCTIONS}, got {self.reduce!r}")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size,
            max_len=self.max_len,
            d=self.d,
            h=self.h,
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            blur_mode=self.blur_mode,
            k=self.k,
            sigma=self.sigma,
            normalize_kernel=self.normalize_kernel,
            init_std=self.init_std,
        )

    @property
    def se_config(self) -> SEConfig:
        r = self.r if self.r is not None else default_ratio(self.n_layers)
        return SEConfig(n=self.n_layers, r=r, bias=self.se_bias)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class ModelOutput:
    logits: Tensor
    fusion: FusionState | None
    pooled: Tensor


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = dict(encoder_shapes(cfg.encoder))
    if cfg.se:
        shapes.update(cfg.se_config.shapes())
    shapes["head.w"] = (cfg.d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def init_model(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Encoder weights as in :func:`sesame.encoder.init_params`; SE and head weights truncated-normal too."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg.encoder, rng)
    if cfg.se:
        for name, shape in cfg.se_config.shapes().items():
            params[name] = np.zeros(shape) if name.startswith("se.b") else truncated_normal(rng, shape, cfg.init_std)
    params["head.w"] = truncated_normal(rng, (cfg.d, cfg.n_classes), cfg.init_std)
    params["head.b"] = np.zeros(cfg.n_classes)
    return params


def classify(pooled: Tensor, w: Tensor, b: Tensor, reduce: str = "first") -> Tensor:
    """Logits from an ``(..., l, d)`` representation.

    The sequence is reduced to one vector first: the first position (the
    classification token) or the mean over positions.
    """
    if pooled.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"head {w.shape}/{b.shape} does not fit representation {pooled.shape}")
    if reduce == "first":
        vec = pooled[..., 0, :]
    elif reduce == "mean":
        vec = T.mean(pooled, axis=-2)
    else:
        raise ConfigurationError(f"reduce must be one of {REDUCTIONS}, got {reduce!r}")
    single = vec.ndim == 1
    if single:
        vec = T.reshape(vec, (1, vec.shape[0]))
    logits = T.matmul(vec, w)
    logits = T.add(logits, T.broadcast_to(b, logits.shape))
    return T.reshape(logits, (logits.shape[-1],)) if single else logits


def forward(params: Mapping[str, Tensor], tokens, cfg: ModelConfig) -> ModelOutput:
    """Logits for token ids of shape ``(batch, l)`` or ``(l,)``."""
    stack = encoder_stack_forward(tokens, params, cfg.encoder)
    fusion = None
    if cfg.se:
        fusion = se_fusion(stack.U, params, cfg.pooling)
        pooled = fusion.pooled
    else:
        pooled = pool(stack.U, cfg.pooling)
    logits = classify(pooled, params["head.w"], params["head.b"], cfg.reduce)
    return ModelOutput(logits=logits, fusion=fusion, pooled=pooled)


def as_tensors(params: Mapping[str, np.ndarray], trainable: bool = False) -> dict[str, Tensor]:
    if trainable:
        return {k: T.parameter(v, name=k) for k, v in params.items()}
    return {k: T.Tensor(v) for k, v in params.items()}
