"""Adam optimisation of per-task parameters under a step-decay schedule."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import ModulationSpec, TaskRecord
from .data import Dataset
from .errors import EmptyDatasetError, NonFiniteLossError, ShapeError, TrainingError
from .nn import ModulatedLinear, Network, bn_snapshot, init_linear

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 10
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 5
    batch_size: int = 64
    seed: int = 0
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    val_fraction: float = 0.2
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (train-mode batch norm)")
        self.lr_grid = tuple(float(v) for v in self.lr_grid)

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """30 epochs with one 0.1 decay at epoch 15."""
        return cls(**{"epochs": 30, "lr_decay_epoch": 15, **kw})

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay_factor if epoch >= self.lr_decay_epoch else 1.0)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_config(path).get("train", read_config(path)))


def read_config(path) -> dict:
    """Load a TOML or JSON file into a dict."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(path.read_text())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameter arrays are replaced rather than mutated so tensors already
    recorded on an earlier graph keep their values.
    """
    if set(grads) != set(params):
        raise ShapeError(f"grads keys {sorted(grads)} != params keys {sorted(params)}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(state.beta1) * m + dt(1 - state.beta1) * g
        v = dt(state.beta2) * v + dt(1 - state.beta2) * (g * g)
        m_hat = m / dt(1 - state.beta1**t)
        v_hat = v / dt(1 - state.beta2**t)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        state.m[name] = m
        state.v[name] = v


# ---------------------------------------------------------------------------
# generic loop

LossFn = Callable[[Network, Tensor, np.ndarray], Tensor]


def default_loss(model: Network, x: Tensor, y: np.ndarray) -> Tensor:
    return ad.cross_entropy(model(x), y)


def fit(
    model: Network,
    params: Mapping[str, Tensor],
    data: Dataset,
    cfg: TrainConfig,
    loss_fn: LossFn = default_loss,
    bn_train: bool = True,
) -> int:
    """Run ``cfg.epochs`` of minibatch Adam over ``params``; returns the step count."""
    if len(data) == 0:
        raise EmptyDatasetError("training set is empty")
    if not params:
        raise TrainingError("nothing to train: empty parameter set")
    rng = np.random.default_rng(cfg.seed)
    state = OptimState()
    step = 0
    value = float("nan")
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = rng.permutation(len(data))
            for lo in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    return step
                idx = order[lo : lo + cfg.batch_size]
                if bn_train and len(idx) < 2:
                    continue
                model.train(bn_train)
                xb = Tensor(data.x[idx].astype(model.dtype, copy=False))
                loss = loss_fn(model, xb, data.y[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(step, value)
                for p in params.values():
                    p.grad = None
                ad.backward(loss)
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
                adam_step(params, grads, state, lr)
                step += 1
            log.debug("epoch %d lr %.3g last loss %.4f", epoch, lr, value)
    finally:
        model.eval()
    return step


def fresh_head(fan_in: int, num_classes: int, seed: int, dtype=np.float32) -> ModulatedLinear:
    w, b = init_linear(num_classes, fan_in, np.random.default_rng([seed, 0x4EAD]), dtype)
    return ModulatedLinear(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def trainable_grid_params(model: Network) -> dict[str, Tensor]:
    params = {}
    for name, layer in model.weight_layers():
        if layer.mod_slot is not None:
            params[f"{name}.grid"] = layer.mod_slot.values
        if layer.mask_slot is not None:
            params[f"{name}.scores"] = layer.mask_slot.scores
    params["head.weight"] = model.head.weight
    params["head.bias"] = model.head.bias
    return params


def attach_ones(model: Network, spec: ModulationSpec) -> None:
    for _, layer in model.weight_layers():
        layer.attach_grid(np.ones(layer.grid_shape(spec.m1, spec.m2), dtype=model.dtype), spec.method)


def train_task(
    base: Network,
    spec: ModulationSpec,
    data: Dataset,
    cfg: TrainConfig,
    task_id: str = "task",
    num_classes: int | None = None,
) -> TaskRecord:
    """Train modulation grids (initialised to exactly 1.0) and a new head.

    BN layers run in train mode on a task-local copy of the running statistics,
    which are snapshotted after the last epoch. ``base`` is never touched.
    """
    if len(data) == 0:
        raise EmptyDatasetError("training set is empty")
    num_classes = num_classes or data.num_classes
    model = base.clone()
    model.set_base_trainable(False)
    model.clear_slots()
    attach_ones(model, spec)
    model.head = fresh_head(base.head.weight.shape[1], num_classes, cfg.seed, model.dtype)
    fit(model, trainable_grid_params(model), data, cfg)
    return TaskRecord(
        task_id=task_id,
        method="zfcl",
        spec=spec,
        grids={name: layer.mod_slot.values.data for name, layer in model.weight_layers()},
        head_weight=model.head.weight.data,
        head_bias=model.head.bias.data,
        bn=bn_snapshot(model),
    )


def predict_logits(model: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if model.training:
        raise TrainingError("model must be in eval mode for evaluation")
    out = [model(Tensor(x[lo : lo + batch_size].astype(model.dtype, copy=False))).data for lo in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.head.weight.shape[0]), model.dtype)


def evaluate(model: Network, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy."""
    if len(data) == 0:
        raise EmptyDatasetError("evaluation set is empty")
    logits = predict_logits(model, data.x, batch_size)
    acc = float(np.mean(logits.argmax(axis=1) == data.y))
    loss = ad.cross_entropy(Tensor(logits.astype(np.float64)), data.y).item()
    return acc, loss


@dataclass
class SearchResult:
    config: TrainConfig
    record: TaskRecord
    scores: dict[float, float]
    failures: dict[float, str]


def lr_search(
    base: Network,
    spec: ModulationSpec,
    data: Dataset,
    cfg: TrainConfig,
    task_id: str = "task",
    train_fn: Callable[..., TaskRecord] | None = None,
) -> SearchResult:
    """Grid search over ``cfg.lr_grid`` on a seeded held-out split.

    The highest validation accuracy wins; ties go to the smaller learning rate.
    A grid point that fails to train is recorded and skipped.
    """
    if not cfg.lr_grid:
        raise ValueError("lr_grid is empty")
    from .bank import apply_record

    train_fn = train_fn or train_task
    fit_part, val_part = data.split(cfg.val_fraction, seed=cfg.seed)
    scores: dict[float, float] = {}
    failures: dict[float, str] = {}
    best = None
    for lr in sorted(cfg.lr_grid):
        run_cfg = cfg.replace(lr=lr)
        try:
            record = train_fn(base, spec, fit_part, run_cfg, task_id=task_id, num_classes=data.num_classes)
        except TrainingError as exc:
            failures[lr] = str(exc)
            log.warning("lr %.3g failed: %s", lr, exc)
            continue
        acc, _ = evaluate(apply_record(base, record), val_part)
        scores[lr] = acc
        if best is None or acc > best[0]:
            best = (acc, run_cfg, record)
    if best is None:
        raise TrainingError(f"every learning rate failed: {failures}")
    return SearchResult(best[1], best[2], scores, failures)


def all_params(model: Network) -> dict[str, Tensor]:
    return {name: t for name, t in model.base_tensors()}


def pretrain(model: Network, data: Dataset, cfg: TrainConfig) -> Network:
    """Train every parameter of ``model`` in place (the base task)."""
    model.clear_slots()
    model.set_base_trainable(True)
    fit(model, all_params(model), data, cfg)
    model.set_base_trainable(False)
    return model.eval()
