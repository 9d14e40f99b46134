"""Seeded training, evaluation and the blur-sigma sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import LABELS, Case, encode_all, heuristic_rows, label_index, score_by_heuristic
from .errors import ConfigurationError, DivergenceError, InputError
from .fusion import layer_weight_report
from .model import ModelConfig, as_tensors, forward, init_model

log = logging.getLogger(__name__)

DEFAULT_SIGMA_GRID = (1e-2, 1e-1, 3e-1, 5e-1)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class Metrics:
    per_step_loss: list[float] = field(default_factory=list)
    split_accuracies: dict[str, float] = field(default_factory=dict)
    heuristic_table: list[dict] | None = None
    layer_weights: list[dict] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: Metrics


class Adam:
    """Adam without weight decay; parameters are replaced, never updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name, value in params.items():
            g = grads[name]
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def _sub_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _targets(cases: Sequence[Case], task: str) -> np.ndarray:
    return np.array([label_index(c.label, task) for c in cases], dtype=np.int64)


def batch_loss(params: Mapping[str, T.Tensor], tokens: np.ndarray, targets: np.ndarray, cfg: ModelConfig) -> T.Tensor:
    return T.cross_entropy(forward(params, tokens, cfg).logits, targets)


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    cases: Sequence[Case],
    task: str,
    params: Mapping[str, np.ndarray] | None = None,
) -> TrainResult:
    """Mini-batch Adam on softmax cross-entropy.

    Examples are reshuffled every epoch from a stream derived from
    ``tcfg.seed``; the last batch of an epoch may be short. Raises
    :class:`DivergenceError` as soon as a batch loss is not finite.
    """
    if not cases:
        raise InputError("training data is empty")
    if params is None:
        params = init_model(cfg, tcfg.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tokens = encode_all(cases, cfg.max_len)
    targets = _targets(cases, task)
    rng = _sub_rng(tcfg.seed, 1)
    opt = Adam(tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    metrics = Metrics()
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(cases))
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            leaves = as_tensors(params, trainable=True)
            loss = batch_loss(leaves, tokens[idx], targets[idx], cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            metrics.per_step_loss.append(value)
            params = opt.step(params, T.gradients(loss, leaves))
            step += 1
        log.debug("epoch %d done, last loss %.6f", epoch, metrics.per_step_loss[-1])
    return TrainResult(params=params, metrics=metrics)


def predict(params: Mapping[str, np.ndarray], cfg: ModelConfig, cases: Sequence[Case], batch_size: int = 64):
    """Class predictions plus per-example layer weights (``None`` without SE)."""
    consts = as_tensors(params)
    tokens = encode_all(cases, cfg.max_len)
    preds, weights = [], []
    for start in range(0, len(cases), batch_size):
        out = forward(consts, tokens[start:start + batch_size], cfg)
        preds.append(np.argmax(out.logits.data, axis=-1))
        if out.fusion is not None:
            weights.append(out.fusion.s.data)
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return preds, (np.concatenate(weights) if weights else None)


def accuracy(predictions: Sequence[int], targets: Sequence[int]) -> float:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if predictions.shape != targets.shape:
        raise InputError(f"{predictions.size} predictions for {targets.size} targets")
    if targets.size == 0:
        raise InputError("cannot score an empty split")
    return float(np.mean(predictions == targets))


@dataclass
class Evaluation:
    accuracy: float
    predictions: np.ndarray
    heuristic_table: list[dict] | None
    layer_weights: np.ndarray | None


def evaluate(params: Mapping[str, np.ndarray], cfg: ModelConfig, cases: Sequence[Case], task: str) -> Evaluation:
    """Accuracy on a split; adds the six-cell heuristic table when cases carry cell tags."""
    if not cases:
        raise InputError("evaluation split is empty")
    preds, weights = predict(params, cfg, cases)
    acc = accuracy(preds, _targets(cases, task))
    table = None
    if task == "hans-style" and any(c.subset for c in cases):
        table = heuristic_rows(score_by_heuristic(preds, cases))
    mean_weights = weights.mean(axis=0) if weights is not None else None
    return Evaluation(accuracy=acc, predictions=preds, heuristic_table=table, layer_weights=mean_weights)


def weights_rows(weights) -> list[dict] | None:
    if weights is None:
        return None
    return [{"layer": layer, "weight": w} for layer, w in layer_weight_report(weights)]


def run_experiment(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_cases: Sequence[Case],
    splits: Mapping[str, Sequence[Case]],
    task: str,
) -> TrainResult:
    """Train, then evaluate on every named split.

    The heuristic table and layer weights come from the ``diagnostic`` split
    when present, else the last split evaluated.
    """
    result = train(cfg, tcfg, train_cases, task)
    metrics = result.metrics
    source = "diagnostic" if splits.get("diagnostic") else None
    for name, split in splits.items():
        if not split:
            continue
        ev = evaluate(result.params, cfg, split, task)
        metrics.split_accuracies[name] = ev.accuracy
        if source is None or name == source:
            metrics.heuristic_table = ev.heuristic_table
            metrics.layer_weights = weights_rows(ev.layer_weights)
    return result


@dataclass
class SweepCell:
    sigma: float
    status: str
    dev_accuracy: float | None
    result: TrainResult | None = None
    error: str | None = None


def best_cell(cells: Sequence[SweepCell]) -> SweepCell | None:
    """Highest dev accuracy among successful cells; ties go to the smaller sigma."""
    ok = [c for c in cells if c.status == "ok"]
    if not ok:
        return None
    return min(ok, key=lambda c: (-c.dev_accuracy, c.sigma))


def sweep_cell(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    sigma: float,
    train_cases: Sequence[Case],
    dev_cases: Sequence[Case],
    task: str,
    extra_splits: Mapping[str, Sequence[Case]] | None = None,
) -> SweepCell:
    cell_cfg = replace(cfg, sigma=float(sigma))
    splits = {"dev": dev_cases, **(extra_splits or {})}
    try:
        result = run_experiment(cell_cfg, tcfg, train_cases, splits, task)
    except DivergenceError as exc:
        log.warning("sigma=%g diverged: %s", sigma, exc)
        return SweepCell(sigma=float(sigma), status="failed", dev_accuracy=None, error=str(exc))
    return SweepCell(
        sigma=float(sigma),
        status="ok",
        dev_accuracy=result.metrics.split_accuracies["dev"],
        result=result,
    )


def sigma_sweep(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_cases: Sequence[Case],
    dev_cases: Sequence[Case],
    task: str,
    grid: Sequence[float] = DEFAULT_SIGMA_GRID,
) -> tuple[list[SweepCell], SweepCell | None]:
    """Train one model per blur sigma and pick the best by dev accuracy.

    Cell ``i`` trains with seed ``tcfg.seed + i`` so cells are independent
    and may run in any order. A diverging cell is marked ``failed`` and the
    sweep carries on.
    """
    if not grid:
        raise ConfigurationError("sigma grid is empty")
    if not dev_cases:
        raise InputError("sweep needs a non-empty dev split")
    cells = [
        sweep_cell(cfg, cell_train_config(tcfg, i), s, train_cases, dev_cases, task)
        for i, s in enumerate(grid)
    ]
    return cells, best_cell(cells)


def cell_train_config(tcfg: TrainConfig, index: int) -> TrainConfig:
    """Training settings for sweep cell ``index``: the base seed offset by the cell index."""
    return replace(tcfg, seed=tcfg.seed + index)


def task_labels(task: str) -> tuple[str, ...]:
    try:
        return LABELS[task]
    except KeyError:
        raise ConfigurationError(f"unknown task {task!r}") from None
