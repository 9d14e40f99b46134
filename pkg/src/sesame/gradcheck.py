"""Finite-difference gradient checks for the blur, SE, attention and full-model graphs.

Each scope builds a small random problem, reduces it to a scalar and compares
the tape gradient with central differences. Evaluation points are drawn from
seeded streams and redrawn when any ReLU input lies within ``KINK_MARGIN`` of
zero: there the central difference straddles the kink and measures the
secant instead of the derivative.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, blur_on_outputs, blur_on_values, gaussian_kernel, multihead_attention
from .errors import ConfigurationError
from .fusion import se_fusion
from .model import ModelConfig, forward, init_model

SCOPES = ("blur", "se", "attention", "full")
THRESHOLD = 1e-4
STEP = 1e-5
KINK_MARGIN = 1e-3
MAX_DRAWS = 32

Objective = Callable[[Mapping[str, T.Tensor]], T.Tensor]


@dataclass
class ScopeReport:
    scope: str
    errors: dict[str, float]
    seconds: float
    draw: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return self.max_error < THRESHOLD


def _readout(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    # a random linear readout makes every output coordinate matter
    return T.sum(T.mul(out, T.Tensor(weights)))


def _blur_problem(rng: np.random.Generator):
    l, dv = 6, 4
    kernel = gaussian_kernel(3, 0.5)
    params = {
        "head_output": rng.normal(0.0, 0.1, (l, dv)),
        "values": rng.normal(0.0, 0.1, (l, dv)),
        "weights": rng.normal(0.0, 0.1, (l, l)),
    }
    r1, r2 = rng.normal(size=(l, dv)), rng.normal(size=(l, dv))

    def f(p):
        a = blur_on_outputs(p["head_output"], kernel)
        b = blur_on_values(p["values"], p["weights"], kernel)
        return T.add(_readout(a, r1), _readout(b, r2))

    return f, params


def _se_problem(rng: np.random.Generator):
    l, d, n, hidden = 4, 3, 4, 2
    params = {
        "U": rng.normal(0.0, 0.1, (2, l, d, n)),
        "se.w1": rng.normal(0.0, 1.0, (n, hidden)),
        "se.w2": rng.normal(0.0, 1.0, (hidden, n)),
    }
    r = rng.normal(size=(2, l, d))

    def f(p):
        fused = se_fusion(p["U"], p, "weighted_average")
        rescaled = se_fusion(p["U"], p, "sum_all")
        return T.add(_readout(fused.pooled, r), _readout(rescaled.pooled, r))

    return f, params


def _attention_problem(rng: np.random.Generator):
    l, d, h = 6, 8, 2
    params = {"X": rng.normal(0.0, 0.1, (l, d))}
    for name in ("w_q", "w_k", "w_v"):
        params[name] = rng.normal(0.0, 0.3, (d, d))
        params["b" + name[1:]] = rng.normal(0.0, 0.1, (d,))
    r = rng.normal(size=(l, d))

    def f(p):
        total = None
        for mode in ("on_outputs", "on_values"):
            cfg = AttentionConfig(l=l, d=d, h=h, blur_mode=mode, k=3, sigma=0.5)
            out = _readout(multihead_attention(p["X"], p, cfg).output, r)
            total = out if total is None else T.add(total, out)
        return total

    return f, params


FULL_CONFIG = ModelConfig(
    vocab_size=12,
    max_len=6,
    d=16,
    h=2,
    n_layers=2,
    blur_mode="on_outputs",
    k=3,
    sigma=0.1,
    se=True,
)


def _full_problem(rng: np.random.Generator, cfg: ModelConfig = FULL_CONFIG):
    params = init_model(cfg, int(rng.integers(2**31)))
    # move off the symmetric initial point: unit gains and zero biases hide bugs
    params = {k: v + rng.normal(0.0, 0.1, v.shape) for k, v in params.items()}
    tokens = rng.integers(0, cfg.vocab_size, size=(2, cfg.max_len))
    labels = np.array([0, 1])

    def f(p):
        return T.cross_entropy(forward(p, tokens, cfg).logits, labels)

    return f, params


PROBLEMS = {
    "blur": _blur_problem,
    "se": _se_problem,
    "attention": _attention_problem,
    "full": _full_problem,
}


def kink_distance(f: Objective, params: Mapping[str, np.ndarray]) -> float:
    """Smallest ``|x|`` over all ReLU inputs seen while evaluating ``f`` (inf if none)."""
    with T.recording_relu_inputs() as seen:
        f({k: T.Tensor(v) for k, v in params.items()})
    return min((float(np.min(np.abs(x))) for x in seen if x.size), default=float("inf"))


def build_problem(scope: str, seed: int = 0):
    """Objective and parameters for ``scope``; returns ``(f, params, draw)``.

    Draw ``i`` uses the stream ``default_rng([seed, i])``; the first draw whose
    ReLU inputs all clear :data:`KINK_MARGIN` is used.
    """
    if scope not in PROBLEMS:
        raise ConfigurationError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    for draw in range(MAX_DRAWS):
        f, params = PROBLEMS[scope](np.random.default_rng([seed, draw]))
        if kink_distance(f, params) >= KINK_MARGIN:
            return f, params, draw
    raise ConfigurationError(f"no kink-free evaluation point for scope {scope!r} in {MAX_DRAWS} draws")


def run_scope(scope: str, seed: int = 0, inject_fault: bool = False) -> ScopeReport:
    """Check one scope. ``inject_fault`` perturbs one analytic gradient entry so the check must fail."""
    start = time.perf_counter()
    f, params, draw = build_problem(scope, seed)
    analytic = None
    if inject_fault:
        leaves = {k: T.parameter(v, name=k) for k, v in params.items()}
        analytic = T.gradients(f(leaves), leaves)
        first = next(iter(analytic))
        analytic[first] = analytic[first].copy()
        analytic[first].flat[0] += 1.0
    errors = T.grad_check_detailed(f, params, h=STEP, analytic=analytic)
    return ScopeReport(scope=scope, errors=errors, seconds=time.perf_counter() - start, draw=draw)
