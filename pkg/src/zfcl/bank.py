"""Per-task parameter registry, storage accounting and the binary container.

Container layout (shared by bank files ``ZFCB`` and base checkpoints ``ZFCK``)::

    magic      4 bytes
    version    uint32 little-endian
    hdr_len    uint64 little-endian
    header     hdr_len bytes of UTF-8 JSON (sorted keys, compact separators)
    payload    raw little-endian tensors at the offsets listed in the header

Header entries are ``{"name", "dtype" (f16|f32), "shape", "offset", "length"}``
with offsets relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    BadMagicError,
    BankFormatError,
    DuplicateTaskError,
    GridShapeError,
    HashMismatchError,
    TruncatedFileError,
    UnknownTaskError,
    VersionMismatchError,
)
from .interp import InterpMethod
from .nn import BNSnapshot, ModulatedLinear, Network, bn_restore

BANK_MAGIC = b"ZFCB"
BASE_MAGIC = b"ZFCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f16": np.dtype("<f2"), "f32": np.dtype("<f4")}


# ---------------------------------------------------------------------------
# container


def write_container(path, magic: bytes, tensors: Iterable[tuple[str, np.ndarray, str]], meta: dict) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr, tag in tensors:
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, **meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def read_container(path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        if blob[:4] and blob[:4] != magic[: len(blob[:4])]:
            raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
        raise TruncatedFileError(f"{path}: {len(blob)} bytes is shorter than the {_PREFIX.size}-byte prefix")
    got_magic, version, hdr_len = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise BadMagicError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + hdr_len
    if start > len(blob):
        raise TruncatedFileError(f"{path}: header claims {hdr_len} bytes, file has {len(blob) - _PREFIX.size}")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BankFormatError(f"{path}: unreadable header ({exc})") from exc
    tensors = {}
    for e in header.pop("entries"):
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise BankFormatError(f"{path}: unsupported dtype {e['dtype']!r} for {e['name']}")
        lo = start + e["offset"]
        hi = lo + e["length"]
        if hi > len(blob):
            raise TruncatedFileError(f"{path}: payload for {e['name']} ends at byte {hi}, file has {len(blob)}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["length"]:
            raise BankFormatError(f"{path}: {e['name']} length {e['length']} does not match shape {e['shape']}")
        tensors[e["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=lo).reshape(e["shape"]).astype(np.float32)
    return tensors, header


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class ModulationSpec:
    m1: int
    m2: int
    method: InterpMethod = InterpMethod.BICUBIC

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError(f"modulation resolution must be positive, got ({self.m1}, {self.m2})")
        object.__setattr__(self, "method", InterpMethod.parse(self.method))

    @classmethod
    def parse(cls, resolution: str, method="bicubic") -> "ModulationSpec":
        try:
            m1, m2 = (int(v) for v in resolution.lower().split("x"))
        except ValueError:
            raise ValueError(f"resolution must look like MxN, got {resolution!r}") from None
        return cls(m1, m2, method)

    def to_json(self) -> dict:
        return {"m1": self.m1, "m2": self.m2, "method": self.method.value}

    @classmethod
    def from_json(cls, d: dict | None) -> "ModulationSpec | None":
        return None if d is None else cls(d["m1"], d["m2"], d["method"])


def _frozen(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TaskRecord:
    """Everything needed to re-activate one task on the frozen base.

    ``method`` is ``zfcl`` (modulation grids), ``mask`` (binary masks),
    ``readout`` (head only) or ``base`` (the pretraining task itself).
    Grid values are rounded to float16 on construction, which is the precision
    they are stored at, so activations before and after a save agree bitwise.
    """

    task_id: str
    method: str
    head_weight: np.ndarray
    head_bias: np.ndarray
    bn: BNSnapshot
    spec: ModulationSpec | None = None
    grids: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "grids", {k: _frozen(np.asarray(v, dtype=np.float16)) for k, v in self.grids.items()})
        object.__setattr__(self, "masks", {k: _frozen((np.asarray(v) > 0)) for k, v in self.masks.items()})
        object.__setattr__(self, "head_weight", _frozen(self.head_weight))
        object.__setattr__(self, "head_bias", _frozen(self.head_bias))
        object.__setattr__(
            self, "bn", BNSnapshot(tuple((n, _frozen(m), _frozen(v)) for n, m, v in self.bn.entries))
        )
        if self.method == "zfcl" and self.spec is None:
            raise ValueError("a zfcl record needs a ModulationSpec")

    @property
    def class_count(self) -> int:
        return self.head_weight.shape[0]

    def trainable_count(self) -> int:
        return (
            sum(g.size for g in self.grids.values())
            + sum(m.size for m in self.masks.values())
            + self.head_weight.size
            + self.head_bias.size
        )


@dataclass
class TaskBank:
    """Append-only ordered collection of task records tied to one base model."""

    base_hash: str
    records: list[TaskRecord] = field(default_factory=list)
    probe_hashes: dict[str, str] = field(default_factory=dict)
    probe_fingerprint: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def task_ids(self) -> list[str]:
        return [r.task_id for r in self.records]

    def get(self, task_id: str) -> TaskRecord:
        for r in self.records:
            if r.task_id == task_id:
                return r
        raise UnknownTaskError(f"no task {task_id!r} in bank (have {self.task_ids})")


def _check_geometry(base: Network, record: TaskRecord) -> None:
    layers = dict(base.weight_layers())
    for name, grid in record.grids.items():
        if name not in layers:
            raise GridShapeError(f"{record.task_id}: grid for unknown layer {name!r}")
        expected = layers[name].grid_shape(record.spec.m1, record.spec.m2)
        if tuple(grid.shape) != expected:
            raise GridShapeError(f"{record.task_id}/{name}: grid {grid.shape} != expected {expected} for {record.spec}")
    if record.method == "zfcl" and set(record.grids) != set(layers):
        raise GridShapeError(f"{record.task_id}: grids cover {sorted(record.grids)}, base has {sorted(layers)}")
    for name, mask in record.masks.items():
        if name not in layers or mask.shape != layers[name].weight.shape:
            raise GridShapeError(f"{record.task_id}/{name}: mask shape {mask.shape} does not fit base")
    if record.head_weight.shape[1] != base.head.weight.shape[1]:
        raise GridShapeError(
            f"{record.task_id}: head fan-in {record.head_weight.shape[1]} != {base.head.weight.shape[1]}"
        )
    bn_names = [n for n, _ in base.bn_layers()]
    if [n for n, _, _ in record.bn.entries] != bn_names:
        raise GridShapeError(f"{record.task_id}: BN snapshot layers do not match base")


def register_task(bank: TaskBank, record: TaskRecord, base: Network | None = None) -> TaskBank:
    if record.task_id in bank.task_ids:
        raise DuplicateTaskError(f"task id {record.task_id!r} already registered")
    if base is not None:
        _check_base(bank, base)
        _check_geometry(base, record)
    bank.records.append(record)
    return bank


def _check_base(bank: TaskBank, base: Network) -> None:
    live = base.content_hash()
    if live != bank.base_hash:
        raise HashMismatchError(f"base model hash {live[:12]}... does not match bank's {bank.base_hash[:12]}...")


def activate_task(bank: TaskBank, base: Network, task_id: str) -> Network:
    """A fresh eval-mode model for ``task_id``; neither bank nor base is modified."""
    record = bank.get(task_id)
    _check_base(bank, base)
    return apply_record(base, record)


def apply_record(base: Network, record: TaskRecord) -> Network:
    model = base.clone()
    model.clear_slots()
    model.set_base_trainable(False)
    layers = dict(model.weight_layers())
    for name, grid in record.grids.items():
        layers[name].attach_grid(grid, record.spec.method, trainable=False)
    for name, mask in record.masks.items():
        # scores of +-1 around tau=0 realise exactly the stored mask
        layers[name].attach_mask(np.where(mask, 1.0, -1.0), tau=0.0, trainable=False)
    model.head = ModulatedLinear(np.array(record.head_weight), np.array(record.head_bias))
    bn_restore(model, record.bn)
    return model.eval()


# ---------------------------------------------------------------------------
# storage accounting


def grid_elements(weight_shape: tuple[int, ...], m1: int, m2: int) -> int:
    from .interp import grid_dims

    g_out, g_in = grid_dims(weight_shape[0], weight_shape[1], m1, m2)
    return g_out * g_in * int(np.prod(weight_shape[2:], dtype=np.int64))


def modulation_bits(weight_shapes: Iterable[tuple[int, ...]], m1: int, m2: int, precision_bits: int = 16) -> int:
    return sum(grid_elements(s, m1, m2) for s in weight_shapes) * precision_bits


def mask_bits(weight_shapes: Iterable[tuple[int, ...]]) -> int:
    return sum(int(np.prod(s, dtype=np.int64)) for s in weight_shapes)


def parity_ratio(weight_shapes, m1: int, m2: int, precision_bits: int = 16) -> float:
    """Modulation storage over one-bit-per-weight mask storage."""
    shapes = list(weight_shapes)
    return modulation_bits(shapes, m1, m2, precision_bits) / mask_bits(shapes)


def _extras_bits(record: TaskRecord, precision_bits: int) -> int:
    return (record.head_weight.size + record.head_bias.size + record.bn.element_count()) * precision_bits


def storage_bits(record: TaskRecord, precision_bits: int = 16) -> int:
    """Bits to store one task: per-weight state plus head and BN statistics."""
    if record.method == "mask":
        core = sum(m.size for m in record.masks.values())
    else:
        core = sum(g.size for g in record.grids.values()) * precision_bits
    return core + _extras_bits(record, precision_bits)


def masking_equivalent_bits(base: Network, record: TaskRecord, precision_bits: int = 16) -> int:
    """What a mask on every base weight layer would cost for the same task."""
    return mask_bits(l.weight.shape for _, l in base.weight_layers()) + _extras_bits(record, precision_bits)


# ---------------------------------------------------------------------------
# files


def save_bank(bank: TaskBank, path) -> None:
    tensors = []
    tasks = []
    for r in bank.records:
        tid = r.task_id
        for name, g in r.grids.items():
            tensors.append((f"{tid}/grid/{name}", g, "f16"))
        for name, m in r.masks.items():
            tensors.append((f"{tid}/mask/{name}", m.astype(np.float32), "f16"))
        tensors.append((f"{tid}/head.weight", r.head_weight, "f32"))
        tensors.append((f"{tid}/head.bias", r.head_bias, "f32"))
        for name, mu, var in r.bn.entries:
            tensors.append((f"{tid}/bn/{name}/mean", mu, "f32"))
            tensors.append((f"{tid}/bn/{name}/var", var, "f32"))
        tasks.append(
            {
                "task_id": tid,
                "method": r.method,
                "spec": None if r.spec is None else r.spec.to_json(),
                "grids": list(r.grids),
                "masks": list(r.masks),
                "bn": [n for n, _, _ in r.bn.entries],
            }
        )
    meta = {
        "base_hash": bank.base_hash,
        "tasks": tasks,
        "probe_hashes": bank.probe_hashes,
        "probe_fingerprint": bank.probe_fingerprint,
    }
    write_container(path, BANK_MAGIC, tensors, meta)


def load_bank(path, base: Network | None = None) -> TaskBank:
    tensors, meta = read_container(path, BANK_MAGIC)
    try:
        records = []
        for t in meta["tasks"]:
            tid = t["task_id"]
            records.append(
                TaskRecord(
                    task_id=tid,
                    method=t["method"],
                    spec=ModulationSpec.from_json(t["spec"]),
                    grids={n: tensors[f"{tid}/grid/{n}"] for n in t["grids"]},
                    masks={n: tensors[f"{tid}/mask/{n}"] for n in t["masks"]},
                    head_weight=tensors[f"{tid}/head.weight"],
                    head_bias=tensors[f"{tid}/head.bias"],
                    bn=BNSnapshot(
                        tuple((n, tensors[f"{tid}/bn/{n}/mean"], tensors[f"{tid}/bn/{n}/var"]) for n in t["bn"])
                    ),
                )
            )
        bank = TaskBank(meta["base_hash"], records, dict(meta["probe_hashes"]), meta["probe_fingerprint"])
    except KeyError as exc:
        raise BankFormatError(f"{path}: missing header field or tensor {exc}") from exc
    if base is not None:
        _check_base(bank, base)
    return bank


def save_base(model: Network, path) -> str:
    digest = model.content_hash()
    write_container(
        path, BASE_MAGIC, [(n, a, "f32") for n, a in model.state_arrays()], {"arch": model.arch, "hash": digest}
    )
    return digest


def load_base(path) -> Network:
    from .nn import build_from_arch

    tensors, meta = read_container(path, BASE_MAGIC)
    model = build_from_arch(meta["arch"])
    try:
        model.load_state_arrays(tensors)
    except KeyError as exc:
        raise BankFormatError(f"{path}: checkpoint lacks tensor {exc}") from exc
    if model.content_hash() != meta["hash"]:
        raise HashMismatchError(f"{path}: checkpoint content does not match its recorded hash")
    return model.eval()
