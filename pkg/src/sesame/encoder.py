"""Post-norm Transformer encoder stack that keeps every layer's output.

Parameters live in a flat ``{name: array}`` mapping so that the optimiser,
gradient checker and checkpoint writer can treat them uniformly. Layer ``i``
owns the names prefixed ``layer{i}.``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, multihead_attention
from .errors import ConfigurationError, DimensionError, FormatError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
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
    ln_eps: float = 1e-12
    init_std: float = INIT_STD

    def __post_init__(self):
        if not self.init_std > 0:
            raise ConfigurationError(f"init_std must be positive, got {self.init_std}")
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.vocab_size < 1 or self.max_len < 1:
            raise ConfigurationError("vocab_size and max_len must be positive")
        # validates d, h, k, sigma, blur_mode
        self.attention(self.max_len)

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d

    def attention(self, length: int) -> AttentionConfig:
        return AttentionConfig(
            l=length,
            d=self.d,
            h=self.h,
            blur_mode=self.blur_mode,
            k=self.k,
            sigma=self.sigma,
            normalize_kernel=self.normalize_kernel,
        )


@dataclass
class EncoderStackOutput:
    """Layer outputs stacked on a trailing axis: ``U[..., :, :, k]`` is layer ``k``."""

    U: Tensor
    layers: list[Tensor] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.U.shape[-1]


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def layer_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d, cfg.ff_dim
    return {
        "attn.w_q": (d, d),
        "attn.b_q": (d,),
        "attn.w_k": (d, d),
        "attn.b_k": (d,),
        "attn.w_v": (d, d),
        "attn.b_v": (d,),
        "attn.w_o": (d, d),
        "attn.b_o": (d,),
        "ln1.gain": (d,),
        "ln1.offset": (d,),
        "ffn.w1": (d, f),
        "ffn.b1": (f,),
        "ffn.w2": (f, d),
        "ffn.b2": (d,),
        "ln2.gain": (d,),
        "ln2.offset": (d,),
    }


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "embed.tokens": (cfg.vocab_size, cfg.d),
        "embed.positions": (cfg.max_len, cfg.d),
    }
    for i in range(cfg.n_layers):
        for name, shape in layer_param_shapes(cfg).items():
            shapes[f"layer{i}.{name}"] = shape
    return shapes


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Truncated-normal weights (std ``cfg.init_std``), zero biases and offsets, unit layer-norm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            params[name] = np.ones(shape)
        elif leaf.startswith("b_") or leaf in ("b1", "b2", "offset"):
            params[name] = np.zeros(shape)
        else:
            params[name] = truncated_normal(rng, shape, cfg.init_std)
    return params


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Strip ``prefix`` from every name that carries it."""
    return {name[len(prefix):]: value for name, value in params.items() if name.startswith(prefix)}


def embed(tokens, token_table: Tensor, position_table: Tensor) -> Tensor:
    """Token embedding plus positional embedding for ids of shape ``(..., l)``."""
    tokens = np.asarray(tokens)
    length = tokens.shape[-1]
    if length > position_table.shape[0]:
        raise DimensionError(f"sequence length {length} exceeds position table size {position_table.shape[0]}")
    words = T.embedding(token_table, tokens)
    positions = position_table[:length]
    return T.add(words, T.broadcast_to(positions, words.shape))


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = T.matmul(x, weight)
    return T.add(out, T.broadcast_to(bias, out.shape))


def encoder_layer_forward(X: Tensor, params: Mapping[str, Tensor], cfg: AttentionConfig, eps: float = 1e-12) -> Tensor:
    """``LN(X + Attn(X) W_o)`` followed by ``LN(Y + FFN(Y))`` with a ReLU feed-forward."""
    attn = multihead_attention(X, sub_params(params, "attn."), cfg)
    projected = _affine(attn.output, params["attn.w_o"], params["attn.b_o"])
    Y = T.layer_norm(T.add(X, projected), params["ln1.gain"], params["ln1.offset"], eps)
    hidden = T.relu(_affine(Y, params["ffn.w1"], params["ffn.b1"]))
    ff = _affine(hidden, params["ffn.w2"], params["ffn.b2"])
    return T.layer_norm(T.add(Y, ff), params["ln2.gain"], params["ln2.offset"], eps)


def encoder_stack_forward(tokens, params: Mapping[str, Tensor], cfg: EncoderConfig) -> EncoderStackOutput:
    tokens = np.asarray(tokens)
    X = embed(tokens, params["embed.tokens"], params["embed.positions"])
    attn_cfg = cfg.attention(tokens.shape[-1])
    layers = []
    for i in range(cfg.n_layers):
        X = encoder_layer_forward(X, sub_params(params, f"layer{i}."), attn_cfg, cfg.ln_eps)
        layers.append(X)
    U = T.stack(layers, axis=-1)
    return EncoderStackOutput(U=U, layers=layers)


# ---------------------------------------------------------------------------
# Checkpoints: the file holds tensors in manifest order; <file>.json is the manifest
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(params)
    arrays = [np.asarray(params[n].data if isinstance(params[n], Tensor) else params[n]) for n in names]
    path.write_bytes(T.tensors_to_bytes(arrays))
    manifest = {
        "format": "sesame-checkpoint-v1",
        "parameters": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "metadata": dict(metadata or {}),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads(manifest_path(path).read_text(encoding="utf-8"))
        entries = manifest["parameters"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read checkpoint manifest for {path}: {exc}") from None
    params = {}
    with path.open("rb") as fh:
        for entry in entries:
            arr = T.read_tensor(fh)
            if list(arr.shape) != list(entry["shape"]):
                raise FormatError(f"{entry['name']}: manifest shape {entry['shape']} but stored {list(arr.shape)}")
            params[entry["name"]] = arr
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {len(entries)} tensors")
    return params, manifest.get("metadata", {})


def check_shapes(params: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> list[str]:
    """Human-readable list of every mismatch between stored and expected parameter shapes."""
    problems = []
    for name, shape in expected.items():
        if name not in params:
            problems.append(f"{name}: missing (expected {tuple(shape)})")
        elif tuple(np.shape(params[name])) != tuple(shape):
            problems.append(f"{name}: stored {tuple(np.shape(params[name]))}, expected {tuple(shape)}")
    for name in params:
        if name not in expected:
            problems.append(f"{name}: unexpected parameter")
    return problems


def config_dict(cfg) -> dict:
    return asdict(cfg)
