"""Comparison methods: binary masking, LwF, readout-only transfer and full fine-tuning."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import TaskRecord
from .data import Dataset
from .errors import EmptyDatasetError, ZFCLError
from .nn import ModulatedLinear, Network, bn_snapshot
from .trainer import TrainConfig, evaluate, fit, fresh_head, trainable_grid_params

log = logging.getLogger(__name__)

METHODS = ("zfcl", "mask", "lwf", "readout", "finetune")


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskConfig:
    tau: float = 0.0
    s0: float = 0.01

    def __post_init__(self):
        if not self.s0 > self.tau:
            raise ValueError(f"initial score s0={self.s0} must exceed tau={self.tau} so the first mask is all ones")


def install_masks(model: Network, cfg: MaskConfig = MaskConfig()) -> None:
    for _, layer in model.weight_layers():
        layer.attach_mask(np.full(layer.weight.shape, cfg.s0, dtype=model.dtype), cfg.tau)


def mask_forward(layer, x: Tensor) -> Tensor:
    """Forward through ``layer`` with its weight gated by the realised mask."""
    if layer.mask_slot is None:
        raise ZFCLError("layer has no mask slot")
    return layer(x)


def _new_task_model(base: Network, data: Dataset, cfg: TrainConfig, num_classes: int | None) -> Network:
    if len(data) == 0:
        raise EmptyDatasetError("training set is empty")
    model = base.clone()
    model.set_base_trainable(False)
    model.clear_slots()
    model.head = fresh_head(base.head.weight.shape[1], num_classes or data.num_classes, cfg.seed, model.dtype)
    return model


def train_mask_task(
    base: Network,
    data: Dataset,
    cfg: TrainConfig,
    mask_cfg: MaskConfig = MaskConfig(),
    task_id: str = "task",
    num_classes: int | None = None,
) -> TaskRecord:
    """Learn one binary mask per backbone weight with the straight-through estimator."""
    model = _new_task_model(base, data, cfg, num_classes)
    install_masks(model, mask_cfg)
    fit(model, trainable_grid_params(model), data, cfg)
    return TaskRecord(
        task_id=task_id,
        method="mask",
        masks={name: layer.mask_slot.realize() for name, layer in model.weight_layers()},
        head_weight=model.head.weight.data,
        head_bias=model.head.bias.data,
        bn=bn_snapshot(model),
    )


def train_readout_task(
    base: Network, data: Dataset, cfg: TrainConfig, task_id: str = "task", num_classes: int | None = None
) -> TaskRecord:
    """Train only a new linear head on frozen features (BN statistics untouched)."""
    model = _new_task_model(base, data, cfg, num_classes)
    fit(model, {"head.weight": model.head.weight, "head.bias": model.head.bias}, data, cfg, bn_train=False)
    return TaskRecord(
        task_id=task_id,
        method="readout",
        head_weight=model.head.weight.data,
        head_bias=model.head.bias.data,
        bn=bn_snapshot(model),
    )


def base_record(base: Network, task_id: str = "base") -> TaskRecord:
    """The pretraining task as a record: no per-weight state, base head, base statistics."""
    return TaskRecord(
        task_id=task_id,
        method="base",
        head_weight=base.head.weight.data,
        head_bias=base.head.bias.data,
        bn=bn_snapshot(base),
    )


# ---------------------------------------------------------------------------
# LwF


@dataclass(frozen=True)
class LwFConfig:
    lam: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def distillation(student: Tensor, teacher: np.ndarray, temperature: float) -> Tensor:
    """Mean over the batch of -sum_c softmax(teacher/T)_c * log_softmax(student/T)_c."""
    t = teacher.astype(student.dtype) / student.dtype.type(temperature)
    t = np.exp(t - t.max(axis=1, keepdims=True))
    p_teacher = t / t.sum(axis=1, keepdims=True)
    logp = ad.log_softmax(ad.scale(student, 1.0 / temperature))
    return ad.scale(ad.tensor_sum(ad.mul(logp, Tensor(p_teacher))), -1.0 / student.shape[0])


def lwf_loss(
    new_logits: Tensor,
    student_old: Mapping[str, Tensor],
    teacher_old: Mapping[str, np.ndarray],
    labels,
    cfg: LwFConfig,
) -> Tensor:
    """Cross-entropy on the new head plus lambda times the distillation terms of old heads."""
    missing = set(student_old) - set(teacher_old)
    if missing:
        raise ZFCLError(f"no teacher logits for old heads {sorted(missing)}")
    loss = ad.cross_entropy(new_logits, labels)
    if cfg.lam == 0 or not student_old:
        return loss
    reg = None
    for name in student_old:
        term = distillation(student_old[name], teacher_old[name], cfg.temperature)
        reg = term if reg is None else ad.add(reg, term)
    return ad.add(loss, ad.scale(reg, cfg.lam))


# ---------------------------------------------------------------------------
# accuracy matrices


@dataclass
class AccuracyMatrix:
    """R[i][j]: accuracy on task j after phase i; None where j > i."""

    tasks: list[str]
    rows: list[list[float | None]] = field(default_factory=list)

    def add_phase(self, accs: Sequence[float]) -> None:
        i = len(self.rows)
        if len(accs) != i + 1:
            raise ValueError(f"phase {i} must report {i + 1} accuracies, got {len(accs)}")
        self.rows.append(list(accs) + [None] * (len(self.tasks) - i - 1))

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    @property
    def phases(self) -> int:
        return len(self.rows)

    def to_json(self) -> dict:
        return {"tasks": list(self.tasks), "rows": [list(r) for r in self.rows]}

    @classmethod
    def from_json(cls, d: dict) -> "AccuracyMatrix":
        return cls(list(d["tasks"]), [list(r) for r in d["rows"]])

    @classmethod
    def mean(cls, matrices: Sequence["AccuracyMatrix"]) -> "AccuracyMatrix":
        first = matrices[0]
        rows = []
        for i, row in enumerate(first.rows):
            rows.append(
                [None if v is None else float(np.mean([m.rows[i][j] for m in matrices])) for j, v in enumerate(row)]
            )
        return cls(list(first.tasks), rows)


def forgetting(matrix: AccuracyMatrix) -> list[list[float | None]]:
    """F[i][j] = R[j][j] - R[i][j] for j <= i."""
    out = []
    for i, row in enumerate(matrix.rows):
        out.append([None if j > i else matrix.rows[j][j] - row[j] for j in range(len(row))])
    return out


def max_forgetting(matrix: AccuracyMatrix) -> float:
    """Method-level summary: worst forgetting after the final phase."""
    last = forgetting(matrix)[-1]
    return max(v for v in last if v is not None)


# ---------------------------------------------------------------------------
# shared-weight sequences (fine-tune and LwF)


@dataclass
class TaskData:
    name: str
    train: Dataset
    test: Dataset


class MultiHead:
    """A shared backbone with one linear head per task."""

    def __init__(self, backbone: Network, first_task: str):
        self.backbone = backbone
        self.heads: dict[str, ModulatedLinear] = {first_task: backbone.head}

    def logits(self, task: str, x: Tensor) -> Tensor:
        return self.heads[task](self.backbone.features(x))

    def view(self, task: str) -> Network:
        return Network(self.backbone.layers, self.heads[task], self.backbone.arch)


def _run_shared_sequence(
    base: Network, tasks: Sequence[TaskData], cfg: TrainConfig, lwf: LwFConfig | None
) -> AccuracyMatrix:
    if not tasks:
        raise ValueError("need at least one task")
    backbone = base.clone()
    backbone.clear_slots()
    backbone.set_base_trainable(True)
    model = MultiHead(backbone, tasks[0].name)
    matrix = AccuracyMatrix([t.name for t in tasks])
    matrix.add_phase([evaluate(model.view(tasks[0].name).eval(), tasks[0].test)[0]])

    for phase, task in enumerate(tasks[1:], start=1):
        old_names = list(model.heads)
        new_head = fresh_head(backbone.head.weight.shape[1], task.train.num_classes, cfg.seed + phase, backbone.dtype)
        params = {n: t for n, t in backbone.base_tensors() if not n.startswith("head.")}
        params["new.weight"] = new_head.weight
        params["new.bias"] = new_head.bias

        if lwf is None:
            def loss_fn(net, x, y, head=new_head):
                return ad.cross_entropy(head(net.features(x)), y)

            fit(backbone, params, task.train, cfg.replace(seed=cfg.seed + phase), loss_fn, bn_train=True)
        else:
            teacher = copy.deepcopy(model)
            for h in teacher.heads.values():
                h.weight.requires_grad = False
                h.bias.requires_grad = False
            teacher.backbone.set_base_trainable(False)
            teacher.backbone.eval()
            for name in old_names:
                params[f"{name}.weight"] = model.heads[name].weight
                params[f"{name}.bias"] = model.heads[name].bias
                model.heads[name].weight.requires_grad = True
                model.heads[name].bias.requires_grad = True

            def loss_fn(net, x, y, head=new_head, teacher=teacher):
                feats = net.features(x)
                t_feats = teacher.backbone.features(x)
                student = {n: model.heads[n](feats) for n in old_names}
                targets = {n: teacher.heads[n](t_feats).data for n in old_names}
                return lwf_loss(head(feats), student, targets, y, lwf)

            # batch norm stays in eval mode: running statistics never move
            fit(backbone, params, task.train, cfg.replace(seed=cfg.seed + phase), loss_fn, bn_train=False)

        model.heads[task.name] = new_head
        backbone.eval()
        matrix.add_phase([evaluate(model.view(t.name), t.test)[0] for t in tasks[: phase + 1]])
        log.info("phase %d (%s): %s", phase, task.name, matrix.rows[-1])
    return matrix


def run_finetune_sequence(base: Network, tasks: Sequence[TaskData], cfg: TrainConfig) -> AccuracyMatrix:
    """Train every shared weight on each new task in turn with a fresh head."""
    return _run_shared_sequence(base, tasks, cfg, None)


def run_lwf_sequence(base: Network, tasks: Sequence[TaskData], cfg: TrainConfig, lwf: LwFConfig) -> AccuracyMatrix:
    """Sequential LwF: CE on the new head plus distillation towards the pre-phase model."""
    return _run_shared_sequence(base, tasks, cfg, lwf)
