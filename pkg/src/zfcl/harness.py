"""Sequential-task protocols, the zero-forgetting verifier, resolution sweeps and reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bank import (
    ModulationSpec,
    TaskBank,
    activate_task,
    masking_equivalent_bits,
    register_task,
    storage_bits,
)
from .baselines import (
    METHODS,
    AccuracyMatrix,
    LwFConfig,
    MaskConfig,
    TaskData,
    base_record,
    forgetting,
    run_finetune_sequence,
    run_lwf_sequence,
    train_mask_task,
    train_readout_task,
)
from .data import Dataset, DatasetSpec, fingerprint, load_dataset, make_probe
from .errors import TrainingError, VerificationError
from .interp import InterpMethod
from .nn import Network
from .trainer import TrainConfig, evaluate, fit, fresh_head, predict_logits, read_config, train_task

log = logging.getLogger(__name__)

DATASET_NOTE = (
    "desk-scale substitution: the full-scale image benchmarks are replaced by the 8x8 digits set "
    "(or user IDX files) and rotate/permute/class-split variants of it"
)


@dataclass
class TaskEntry:
    dataset: DatasetSpec
    resolution: tuple[int, int] = (4, 4)
    interp: InterpMethod = InterpMethod.BICUBIC

    def __post_init__(self):
        self.interp = InterpMethod.parse(self.interp)
        self.resolution = tuple(self.resolution)

    @property
    def spec(self) -> ModulationSpec:
        return ModulationSpec(self.resolution[0], self.resolution[1], self.interp)


@dataclass
class ProtocolSpec:
    """A base task plus an ordered list of tasks added one phase at a time."""

    method: str
    base_task: DatasetSpec
    tasks: list[TaskEntry]
    seeds: list[int] = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    lwf: LwFConfig = field(default_factory=LwFConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    probe_size: int = 256
    probe_seed: int = 12345

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolSpec":
        tasks = [
            TaskEntry(
                DatasetSpec.from_json(t["dataset"]),
                tuple(t.get("resolution", (4, 4))),
                InterpMethod.parse(t.get("interp", "bicubic")),
            )
            for t in d.get("tasks", [])
        ]
        return cls(
            method=d.get("method", "zfcl"),
            base_task=DatasetSpec.from_json(d["base_task"]),
            tasks=tasks,
            seeds=list(d.get("seeds", [0])),
            train=TrainConfig.from_dict(d.get("train", {})),
            lwf=LwFConfig(**d.get("lwf", {})),
            mask=MaskConfig(**d.get("mask", {})),
            probe_size=d.get("probe_size", 256),
            probe_seed=d.get("probe_seed", 12345),
        )

    @classmethod
    def from_file(cls, path) -> "ProtocolSpec":
        return cls.from_dict(read_config(path))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "base_task": self.base_task.to_json(),
            "tasks": [
                {"dataset": t.dataset.to_json(), "resolution": list(t.resolution), "interp": t.interp.value}
                for t in self.tasks
            ],
            "seeds": list(self.seeds),
            "train": {**dataclasses.asdict(self.train), "lr_grid": list(self.train.lr_grid)},
            "lwf": dataclasses.asdict(self.lwf),
            "mask": dataclasses.asdict(self.mask),
            "probe_size": self.probe_size,
            "probe_seed": self.probe_seed,
        }


@dataclass
class ProtocolResult:
    method: str
    seed: int
    matrix: AccuracyMatrix
    bank: TaskBank | None = None
    probe: Dataset | None = None
    storage: list[dict] = field(default_factory=list)
    verification: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def zero_forgetting_verified(self) -> bool | None:
        if self.method not in ("zfcl", "mask", "readout"):
            return None
        return bool(self.verification) and all(all(v["passed"].values()) for v in self.verification)


# ---------------------------------------------------------------------------
# hashing and verification


def logits_hash(model: Network, x: np.ndarray) -> str:
    """SHA-256 of the exact bytes of the model's logits on ``x``."""
    logits = np.ascontiguousarray(predict_logits(model, x, batch_size=max(1, len(x))))
    return hashlib.sha256(logits.tobytes()).hexdigest()


def record_probe_hash(bank: TaskBank, base: Network, task_id: str, probe: Dataset) -> str:
    fp = fingerprint(probe.x)
    if bank.probe_fingerprint is None:
        bank.probe_fingerprint = fp
    elif bank.probe_fingerprint != fp:
        raise VerificationError("probe set differs from the one this bank was hashed with")
    digest = logits_hash(activate_task(bank, base, task_id), probe.x)
    bank.probe_hashes[task_id] = digest
    return digest


def verify_zero_forgetting(
    bank: TaskBank, base: Network, probe: Dataset, hashes: dict[str, str] | None = None
) -> dict[str, bool]:
    """Recompute each task's probe logits and compare to the hash taken at registration."""
    hashes = bank.probe_hashes if hashes is None else hashes
    if bank.probe_fingerprint is not None and fingerprint(probe.x) != bank.probe_fingerprint:
        raise VerificationError("probe set differs from the one the hashes were recorded on")
    result = {}
    for task_id in bank.task_ids:
        if task_id not in hashes:
            raise VerificationError(f"no recorded probe hash for task {task_id!r}")
        result[task_id] = logits_hash(activate_task(bank, base, task_id), probe.x) == hashes[task_id]
    return result


def check_probe_hygiene(probe: Dataset, training_sets: Sequence[Dataset]) -> None:
    used = set()
    for ds in training_sets:
        used.update(ds.ids.tolist())
    overlap = used.intersection(probe.ids.tolist())
    if overlap:
        raise VerificationError(f"{len(overlap)} probe inputs appear in training data")


# ---------------------------------------------------------------------------
# protocols


def _task_data(spec: DatasetSpec) -> TaskData:
    train, test = load_dataset(spec)
    return TaskData(spec.name, train, test)


def run_protocol(base: Network, protocol: ProtocolSpec, seed: int | None = None) -> ProtocolResult:
    """Run every phase of ``protocol`` once, evaluating all learned tasks after each phase."""
    seed = protocol.seeds[0] if seed is None else seed
    cfg = protocol.train.replace(seed=seed)
    tasks = [_task_data(protocol.base_task)] + [_task_data(t.dataset) for t in protocol.tasks]
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError(f"task names must be unique, got {names}")

    if protocol.method in ("finetune", "lwf"):
        matrix = AccuracyMatrix(names)
        try:
            if protocol.method == "finetune":
                matrix = run_finetune_sequence(base, tasks, cfg)
            else:
                matrix = run_lwf_sequence(base, tasks, cfg, protocol.lwf)
        except TrainingError as exc:
            return ProtocolResult(protocol.method, seed, matrix, error=str(exc))
        return ProtocolResult(protocol.method, seed, matrix)

    probe = make_probe(tasks[0].train.x.shape[1:], protocol.probe_size, protocol.probe_seed)
    check_probe_hygiene(probe, [t.train for t in tasks])
    bank = TaskBank(base.content_hash())
    result = ProtocolResult(protocol.method, seed, AccuracyMatrix(names), bank, probe)

    for phase, task in enumerate(tasks):
        try:
            if phase == 0:
                record = base_record(base, task.name)
            elif protocol.method == "zfcl":
                record = train_task(base, protocol.tasks[phase - 1].spec, task.train, cfg.replace(seed=seed + phase), task.name)
            elif protocol.method == "mask":
                record = train_mask_task(base, task.train, cfg.replace(seed=seed + phase), protocol.mask, task.name)
            else:
                record = train_readout_task(base, task.train, cfg.replace(seed=seed + phase), task.name)
        except TrainingError as exc:
            result.error = f"phase {phase} ({task.name}): {exc}"
            log.error(result.error)
            return result
        register_task(bank, record, base)
        record_probe_hash(bank, base, task.name, probe)
        result.verification.append({"phase": phase, "passed": verify_zero_forgetting(bank, base, probe)})
        result.matrix.add_phase([evaluate(activate_task(bank, base, t.name), t.test)[0] for t in tasks[: phase + 1]])
        result.storage.append(
            {
                "task": task.name,
                "method": record.method,
                "resolution": "" if record.spec is None else f"{record.spec.m1}x{record.spec.m2}",
                "storage_bits": storage_bits(record),
                "mask_equivalent_bits": masking_equivalent_bits(base, record),
            }
        )
    return result


def run_protocol_seeds(base: Network, protocol: ProtocolSpec) -> list[ProtocolResult]:
    return [run_protocol(base, protocol, seed) for seed in protocol.seeds]


# ---------------------------------------------------------------------------
# resolution sweep


def finetune_reference(base: Network, train: Dataset, test: Dataset, cfg: TrainConfig) -> float:
    """Accuracy of training every weight of a copy of ``base`` plus a fresh head."""
    model = base.clone()
    model.clear_slots()
    model.head = fresh_head(base.head.weight.shape[1], train.num_classes, cfg.seed, model.dtype)
    model.set_base_trainable(True)
    fit(model, dict(model.base_tensors()), train, cfg)
    model.set_base_trainable(False)
    return evaluate(model, test)[0]


def sweep_resolution(
    base: Network,
    train: Dataset,
    test: Dataset,
    resolutions: Sequence[tuple[int, int]],
    methods: Sequence[str],
    cfg: TrainConfig,
    precision_bits: int = 16,
    reference: bool = True,
) -> list[dict]:
    """Train one task per (resolution, interpolation) cell with a fixed seed."""
    from .bank import apply_record

    if not resolutions or not methods:
        raise ValueError("resolutions and methods must be non-empty")
    weight_count = sum(layer.weight.size for _, layer in base.weight_layers())
    rows = []
    for method in methods:
        method = InterpMethod.parse(method)
        for m1, m2 in resolutions:
            row = {"m1": m1, "m2": m2, "interp": method.value}
            try:
                record = train_task(base, ModulationSpec(m1, m2, method), train, cfg, f"sweep-{m1}x{m2}")
                row["accuracy"] = evaluate(apply_record(base, record), test)[0]
                row["grid_elements"] = sum(g.size for g in record.grids.values())
                row["trainable"] = record.trainable_count()
                row["storage_bits"] = storage_bits(record, precision_bits)
                row["error"] = ""
            except TrainingError as exc:
                row.update(accuracy=None, grid_elements=None, trainable=None, storage_bits=None, error=str(exc))
            rows.append(row)
    if reference:
        acc = finetune_reference(base, train, test, cfg)
        head = base.head.weight.shape[1] * train.num_classes + train.num_classes
        rows.append(
            {
                "m1": 0,
                "m2": 0,
                "interp": "full-finetune",
                "accuracy": acc,
                "grid_elements": 0,
                "trainable": weight_count + head,
                "storage_bits": (weight_count + head) * precision_bits,
                "error": "",
            }
        )
    return rows


# ---------------------------------------------------------------------------
# reports


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _pct(v):
    return "" if v is None else f"{v * 100:.4f}"


def render_phase_table(matrix: AccuracyMatrix) -> str:
    """Phase-by-task table (percentages), blank where a task is not yet learned."""
    return _csv(["phase"] + matrix.tasks, [[f"Phase {i + 1}"] + [_pct(v) for v in row] for i, row in enumerate(matrix.rows)])


def emit_report(matrix: AccuracyMatrix, storage: Sequence[dict], out_dir, summary: dict | None = None) -> dict[str, Path]:
    """Write accuracy_matrix.csv, forgetting.csv, storage.csv and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    files["accuracy_matrix.csv"] = render_phase_table(matrix)
    f = forgetting(matrix)
    files["forgetting.csv"] = _csv(
        ["phase"] + matrix.tasks, [[f"Phase {i + 1}"] + [_pct(v) for v in row] for i, row in enumerate(f)]
    )
    cols = sorted({k for row in storage for k in row})
    files["storage.csv"] = _csv(cols, [[_cell(row.get(c)) for c in cols] for row in storage])
    files["summary.json"] = json.dumps(summary or {}, indent=2, sort_keys=True) + "\n"
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
    return paths


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(results: Sequence[ProtocolResult]) -> dict:
    """Mean and range across seeds of final accuracies and worst forgetting."""
    matrices = [r.matrix for r in results if r.matrix.phases == len(r.matrix.tasks)]
    summary = {
        "method": results[0].method,
        "seeds": [r.seed for r in results],
        "datasets": DATASET_NOTE,
        "errors": [r.error for r in results if r.error],
    }
    if matrices:
        finals = np.array([m.rows[-1] for m in matrices], dtype=float)
        worst = np.array([max(v for v in forgetting(m)[-1] if v is not None) for m in matrices])
        summary["final_accuracy"] = {
            t: {"mean": float(finals[:, j].mean()), "min": float(finals[:, j].min()), "max": float(finals[:, j].max())}
            for j, t in enumerate(matrices[0].tasks)
        }
        summary["max_forgetting"] = {"mean": float(worst.mean()), "min": float(worst.min()), "max": float(worst.max())}
    verified = [r.zero_forgetting_verified for r in results]
    summary["zero_forgetting_verified"] = None if any(v is None for v in verified) else all(verified)
    return summary


def write_run(results: Sequence[ProtocolResult], run_dir, protocol: ProtocolSpec | None = None) -> Path:
    """Persist raw per-seed results so ``report`` can render them later."""
    from .bank import save_bank

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "method": results[0].method,
        "protocol": None if protocol is None else protocol.to_json(),
        "runs": [
            {
                "seed": r.seed,
                "matrix": r.matrix.to_json(),
                "storage": r.storage,
                "verification": r.verification,
                "error": r.error,
            }
            for r in results
        ],
    }
    for r in results:
        if r.bank is not None:
            save_bank(r.bank, run_dir / f"bank-seed{r.seed}.zfcb")
    path = run_dir / "run.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def report_from_run(run_dir, out_dir) -> dict[str, Path]:
    payload = json.loads((Path(run_dir) / "run.json").read_text())
    if "sweep" in payload:
        return emit_sweep(payload["sweep"], out_dir)
    results = [
        ProtocolResult(
            payload["method"], r["seed"], AccuracyMatrix.from_json(r["matrix"]),
            storage=r["storage"], verification=r["verification"], error=r["error"],
        )
        for r in payload["runs"]
    ]
    return bundle_report(results, out_dir)


def bundle_report(results: Sequence[ProtocolResult], out_dir) -> dict[str, Path]:
    complete = [r.matrix for r in results if r.matrix.phases == len(r.matrix.tasks)] or [results[0].matrix]
    return emit_report(AccuracyMatrix.mean(complete), results[0].storage, out_dir, summarize(results))


def emit_sweep(rows: Sequence[dict], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["m1", "m2", "interp", "accuracy", "grid_elements", "trainable", "storage_bits", "error"]
    p = out / "sweep.csv"
    p.write_text(_csv(cols, [[_cell(r.get(c)) for c in cols] for r in rows]))
    return {"sweep.csv": p}
