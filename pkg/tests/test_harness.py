import json

import numpy as np
import pytest

from zfcl.bank import TaskBank, load_bank, save_bank
from zfcl.baselines import AccuracyMatrix
from zfcl.data import DatasetSpec, Transform, make_probe
from zfcl.errors import VerificationError
from zfcl.harness import (
    ProtocolSpec,
    TaskEntry,
    bundle_report,
    check_probe_hygiene,
    emit_report,
    render_phase_table,
    report_from_run,
    run_protocol,
    sweep_resolution,
    verify_zero_forgetting,
    write_run,
)
from zfcl.trainer import TrainConfig

FAST = TrainConfig(epochs=1, batch_size=64)


def protocol(method, n_tasks=2, res=(2, 2)):
    base = DatasetSpec("digits", n_train=300, n_test=150)
    tasks = [
        TaskEntry(base.with_transform("rot90", Transform("rotate", angle=90)), res),
        TaskEntry(base.with_transform("perm", Transform("permute", seed=2)), res, "nearest"),
        TaskEntry(base.with_transform("rot180", Transform("rotate", angle=180)), res),
    ][:n_tasks]
    return ProtocolSpec(method, base, tasks, seeds=[0], train=FAST, probe_size=32)


def test_one_phase_protocol(tiny_base):
    res = run_protocol(tiny_base, protocol("zfcl", 0))
    assert res.matrix.phases == 1 and len(res.matrix.tasks) == 1
    assert res.zero_forgetting_verified


@pytest.mark.parametrize("method", ["zfcl", "mask", "readout"])
def test_isolated_methods_never_forget(tiny_base, method):
    res = run_protocol(tiny_base, protocol(method, 3))
    f = [[None if j > i else res.matrix[j, j] - res.matrix[i, j] for j in range(4)] for i in range(4)]
    assert all(v == 0.0 for row in f for v in row if v is not None)
    assert res.zero_forgetting_verified
    assert len(res.verification) == 4


def test_finetune_protocol_forgets(tiny_base):
    spec = protocol("finetune", 3)
    spec.train = TrainConfig(epochs=3, lr_decay_epoch=2)
    res = run_protocol(tiny_base, spec)
    f = [res.matrix[j, j] - res.matrix[3, j] for j in range(3)]
    assert max(f) > 0
    assert res.zero_forgetting_verified is None


def test_verifier_flags_flipped_byte(tiny_base, tmp_path):
    res = run_protocol(tiny_base, protocol("zfcl", 2))
    path = tmp_path / "bank.zfcb"
    save_bank(res.bank, path)
    assert all(verify_zero_forgetting(load_bank(path, tiny_base), tiny_base, res.probe).values())

    blob = bytearray(path.read_bytes())
    hdr_len = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16 : 16 + hdr_len])
    entry = next(e for e in header["entries"] if e["name"].startswith("rot90/grid/"))
    pos = 16 + hdr_len + entry["offset"] + 1
    blob[pos] ^= 0x01
    path.write_bytes(bytes(blob))
    result = verify_zero_forgetting(load_bank(path, tiny_base), tiny_base, res.probe)
    assert result == {"digits": True, "rot90": False, "perm": True}


def test_verifier_probe_mismatch(tiny_base):
    res = run_protocol(tiny_base, protocol("zfcl", 1))
    with pytest.raises(VerificationError):
        verify_zero_forgetting(res.bank, tiny_base, make_probe((1, 8, 8), 32, seed=999))
    with pytest.raises(VerificationError):
        verify_zero_forgetting(res.bank, tiny_base, res.probe, hashes={})


def test_probe_hygiene():
    from zfcl.data import Dataset

    probe = make_probe((1, 8, 8), 4)
    clash = Dataset(np.zeros((1, 1, 8, 8)), [0], ids=[probe.ids[0]])
    with pytest.raises(VerificationError):
        check_probe_hygiene(probe, [clash])


def test_protocol_spec_round_trip(tmp_path):
    spec = protocol("lwf", 2)
    (tmp_path / "p.json").write_text(json.dumps(spec.to_json()))
    back = ProtocolSpec.from_file(tmp_path / "p.json")
    assert back.to_json() == spec.to_json()
    with pytest.raises(ValueError):
        ProtocolSpec("ewc", spec.base_task, [])


def test_report_single_phase(tmp_path):
    m = AccuracyMatrix(["a"], [[0.5]])
    assert render_phase_table(m) == "phase,a\nPhase 1,50.0000\n"
    paths = emit_report(m, [], tmp_path)
    assert paths["accuracy_matrix.csv"].read_text().count("\n") == 2
    assert set(paths) == {"accuracy_matrix.csv", "forgetting.csv", "storage.csv", "summary.json"}


def test_report_blank_cells(tmp_path):
    m = AccuracyMatrix(["a", "b"], [[0.5, None], [0.25, 0.75]])
    text = emit_report(m, [], tmp_path)["forgetting.csv"].read_text()
    assert text == "phase,a,b\nPhase 1,0.0000,\nPhase 2,25.0000,0.0000\n"


def test_report_determinism(tiny_base, tmp_path):
    spec = protocol("zfcl", 2)
    for name in ("r1", "r2"):
        res = [run_protocol(tiny_base, spec)]
        write_run(res, tmp_path / name, spec)
        bundle_report(res, tmp_path / name / "report")
    for f in ("accuracy_matrix.csv", "forgetting.csv", "storage.csv", "summary.json"):
        assert (tmp_path / "r1/report" / f).read_bytes() == (tmp_path / "r2/report" / f).read_bytes()
    assert (tmp_path / "r1/bank-seed0.zfcb").read_bytes() == (tmp_path / "r2/bank-seed0.zfcb").read_bytes()
    report_from_run(tmp_path / "r1", tmp_path / "again")
    assert (tmp_path / "again/summary.json").read_bytes() == (tmp_path / "r1/report/summary.json").read_bytes()


def test_sweep_rows(tiny_base):
    from zfcl.data import load_dataset

    train, test = load_dataset(DatasetSpec("digits", n_train=200, n_test=100))
    rows = sweep_resolution(tiny_base, train, test, [(1, 1), (2, 2), (4, 4), (8, 8)], ["bicubic"], FAST)
    assert len(rows) == 5 and rows[-1]["interp"] == "full-finetune"
    weights = sum(l.weight.size for _, l in tiny_base.weight_layers())
    assert rows[0]["grid_elements"] == weights
    bits = [r["storage_bits"] for r in rows[1:4]]
    assert bits[0] > bits[1] > bits[2]


def test_sweep_records_cell_failure(tiny_base, monkeypatch):
    import zfcl.harness as h
    from zfcl.data import load_dataset
    from zfcl.errors import TrainingError

    real = h.train_task

    def flaky(base, spec, *a, **k):
        if spec.m1 == 2:
            raise TrainingError("boom")
        return real(base, spec, *a, **k)

    monkeypatch.setattr(h, "train_task", flaky)
    train, test = load_dataset(DatasetSpec("digits", n_train=100, n_test=50))
    rows = sweep_resolution(tiny_base, train, test, [(1, 1), (2, 2)], ["nearest"], FAST, reference=False)
    assert rows[1]["error"] == "boom" and rows[1]["accuracy"] is None
    assert rows[0]["accuracy"] is not None
