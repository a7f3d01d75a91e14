"""Command-line entry point: ``zfcl <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 zero-forgetting verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bank import ModulationSpec, TaskBank, load_bank, load_base, register_task, save_bank, save_base, storage_bits
from .baselines import METHODS, MaskConfig, train_mask_task, train_readout_task
from .data import Dataset, DatasetSpec, load_dataset, make_probe
from .errors import ZFCLError
from .harness import (
    ProtocolSpec,
    bundle_report,
    emit_sweep,
    record_probe_hash,
    report_from_run,
    run_protocol_seeds,
    sweep_resolution,
    verify_zero_forgetting,
    write_run,
)
from .nn import small_cnn
from .trainer import TrainConfig, evaluate, pretrain, read_config, train_task

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def env_seed(default: int) -> int:
    value = os.environ.get("ZFCL_SEED", "")
    return int(value) if value.strip() else default


def parse_data(arg: str) -> DatasetSpec:
    """A dataset spec file (TOML/JSON) or one of the built-in names."""
    p = Path(arg)
    if p.suffix in (".toml", ".json") and p.exists():
        d = read_config(p)
        return DatasetSpec.from_json(d.get("dataset", d))
    if arg in ("digits", "synthetic"):
        return DatasetSpec(arg, source=arg)
    raise ZFCLError(f"cannot interpret dataset argument {arg!r}")


def parse_probe(arg: str, shape) -> Dataset:
    """``.npy`` file of inputs, or ``noise:N[:SEED]`` for a generated probe set."""
    if arg.startswith("noise:"):
        parts = arg.split(":")
        return make_probe(shape, int(parts[1]), int(parts[2]) if len(parts) > 2 else 0)
    x = np.load(arg).astype(np.float32)
    return Dataset(x, np.zeros(len(x), dtype=np.int64), -np.arange(1, len(x) + 1), name="probe")


def _train_cfg(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        d = read_config(args.config)
        cfg = TrainConfig.from_dict(d.get("train", {}))
    overrides = {k: getattr(args, k) for k in ("lr", "epochs", "batch_size", "seed") if getattr(args, k, None) is not None}
    cfg = cfg.replace(**overrides)
    return cfg.replace(seed=env_seed(cfg.seed))


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_pretrain(args) -> int:
    d = read_config(args.config) if args.config else {}
    model_cfg = d.get("model", {})
    cfg = _train_cfg(args)
    data = DatasetSpec.from_json(d["data"]) if "data" in d else DatasetSpec("digits")
    train, test = load_dataset(data)
    model = small_cnn(
        in_channels=train.x.shape[1],
        num_classes=model_cfg.get("num_classes", train.num_classes),
        widths=tuple(model_cfg.get("widths", (16, 32, 64))),
        hidden=model_cfg.get("hidden", 64),
        seed=cfg.seed,
    )
    model.arch["input_shape"] = list(train.x.shape[1:])
    pretrain(model, train, cfg)
    digest = save_base(model, args.out)
    acc, loss = evaluate(model, test)
    _print({"out": str(args.out), "hash": digest, "test_accuracy": acc, "test_loss": loss})
    return EXIT_OK


def cmd_add_task(args) -> int:
    base = load_base(args.base)
    bank = load_bank(args.bank, base) if Path(args.bank).exists() else TaskBank(base.content_hash())
    spec = parse_data(args.data)
    train, test = load_dataset(spec)
    cfg = _train_cfg(args)
    task_id = args.task_id or spec.name
    if args.method == "zfcl":
        record = train_task(base, ModulationSpec.parse(args.resolution, args.interp), train, cfg, task_id)
    elif args.method == "mask":
        record = train_mask_task(base, train, cfg, MaskConfig(), task_id)
    else:
        record = train_readout_task(base, train, cfg, task_id)
    register_task(bank, record, base)
    if args.probe:
        record_probe_hash(bank, base, task_id, parse_probe(args.probe, train.x.shape[1:]))
    save_bank(bank, args.bank)
    from .bank import apply_record

    acc, loss = evaluate(apply_record(base, record), test)
    _print({"task": task_id, "test_accuracy": acc, "test_loss": loss, "storage_bits": storage_bits(record), "bank_size": len(bank)})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bank import activate_task

    base = load_base(args.base)
    bank = load_bank(args.bank, base)
    _, test = load_dataset(parse_data(args.data))
    acc, loss = evaluate(activate_task(bank, base, args.task), test)
    _print({"task": args.task, "accuracy": acc, "loss": loss})
    return EXIT_OK


def cmd_verify(args) -> int:
    base = load_base(args.base)
    bank = load_bank(args.bank, base)
    shape = tuple(base.arch.get("input_shape", (base.arch.get("in_channels", 1), 8, 8)))
    result = verify_zero_forgetting(bank, base, parse_probe(args.probe, shape))
    _print({"passed": result, "all_passed": all(result.values())})
    return EXIT_OK if all(result.values()) else EXIT_VERIFY


def _resolutions(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        spec = ModulationSpec.parse(item.strip())
        out.append((spec.m1, spec.m2))
    return out


def cmd_sweep(args) -> int:
    base = load_base(args.base)
    train, test = load_dataset(parse_data(args.data))
    rows = sweep_resolution(base, train, test, _resolutions(args.resolutions), args.interp.split(","), _train_cfg(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps({"method": "zfcl", "sweep": rows, "runs": []}, indent=2, sort_keys=True) + "\n")
    emit_sweep(rows, out)
    _print(rows)
    return EXIT_OK


def cmd_baseline(args) -> int:
    protocol = ProtocolSpec.from_file(args.protocol)
    protocol.method = args.method
    if os.environ.get("ZFCL_SEED", "").strip():
        protocol.seeds = [env_seed(0)]
    if args.base:
        base = load_base(args.base)
    else:
        train, _ = load_dataset(protocol.base_task)
        base = pretrain(small_cnn(train.x.shape[1], train.num_classes, seed=protocol.seeds[0]), train, protocol.train)
    results = run_protocol_seeds(base, protocol)
    out = Path(args.out)
    write_run(results, out, protocol)
    bundle_report(results, out / "report")
    verified = [r.zero_forgetting_verified for r in results]
    _print({"run": str(out), "errors": [r.error for r in results if r.error], "zero_forgetting_verified": verified})
    if any(v is False for v in verified):
        return EXIT_VERIFY
    return EXIT_OK if not any(r.error for r in results) else EXIT_USAGE


def cmd_report(args) -> int:
    paths = report_from_run(args.inp, args.out)
    _print({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zfcl", description="Zero-forgetting continual learning by weight modulation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def train_flags(sp):
        sp.add_argument("--config", help="TOML/JSON file with a [train] table")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("pretrain", help="train a base network and write a ZFCK checkpoint")
    train_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("add-task", help="train one task and append it to a bank")
    train_flags(sp)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--resolution", default="4x4")
    sp.add_argument("--interp", default="bicubic", choices=["nearest", "nearest-exact", "nearest_exact", "bicubic"])
    sp.add_argument("--method", default="zfcl", choices=["zfcl", "mask", "readout"])
    sp.add_argument("--task-id", dest="task_id")
    sp.add_argument("--probe", help=".npy inputs or noise:N[:SEED]; records a logit hash for verify-zf")
    sp.set_defaults(func=cmd_add_task)

    sp = sub.add_parser("eval", help="evaluate one task from a bank")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify-zf", help="recheck every task's probe-logit hash")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--probe", required=True)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sweep", help="accuracy and storage across modulation resolutions")
    train_flags(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--data", default="digits")
    sp.add_argument("--resolutions", default="1x1,2x2,4x4,8x8")
    sp.add_argument("--interp", default="bicubic")
    sp.add_argument("--out", default="sweep-run")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("baseline", help="run a sequential protocol with one method")
    sp.add_argument("--method", required=True, choices=list(METHODS))
    sp.add_argument("--protocol", required=True)
    sp.add_argument("--base")
    sp.add_argument("--out", default="run")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("report", help="render CSV/JSON tables from a run directory")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ZFCLError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"zfcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
