"""Command line interface: ``cgmq train | report | bop``.

Exit codes: 0 success, 2 configuration error, 3 infeasible bound, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .bop import InfeasibleBudget, floor_report, network_bop
from .checkpoint import CheckpointError
from .gates import GRANULARITIES, RULES
from .mnist import DataMissingError, IdxFormatError
from .nn import attach_quantizers, lenet5
from .pipeline import PHASES, PRESETS, ConfigError, TrainConfig, run

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DATA = 0, 2, 3, 4

REFERENCE_FLOOR = 0.392
TABLE_HEADER = ["Method", "Hyperpar.", "Acc (%)", "Rel. GBOPs (%)", "Bound (%)"]

# flag name -> TrainConfig field
_OVERRIDES = {
    "dir": "direction", "granularity": "granularity", "bound": "bound", "seed": "seed",
    "epochs_float": "epochs_float", "epochs_calibrate": "epochs_calibrate",
    "epochs_ranges": "epochs_ranges", "epochs_cgmq": "epochs_cgmq", "lr": "lr",
    "gate_lr": "gate_lr", "batch_size": "batch_size", "train_subset": "train_subset",
    "init_from": "init_from", "data_dir": "data_dir", "out": "out_dir",
}


def _phases(text):
    phases = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in phases if p not in PHASES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown phase(s) {bad}; choose from {PHASES}")
    return phases


def resolve_config(args) -> TrainConfig:
    """Preset, then config file keys, then explicit flags."""
    values = dict(PRESETS[args.preset])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        values.update(loaded)
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    if args.phases is not None:
        values["phases"] = args.phases
    if args.fixed_ranges:
        values["learn_ranges"] = False
    cfg = TrainConfig.from_dict(values)
    if not cfg.out_dir:
        cfg.out_dir = str(Path("runs") / f"{cfg.direction}-{cfg.granularity}-b{cfg.bound:g}"
                                          f"-s{cfg.seed}")
    try:
        return cfg.validate()
    except TypeError as e:
        raise ConfigError(f"invalid config value: {e}") from e


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    record = run(cfg)
    final = record.final
    print(f"run directory: {cfg.out_dir}")
    print(f"accuracy: {final['accuracy']:.2f}%  rbop: {final['rbop_percent']:.4f}%"
          + (f"  bound: {cfg.bound}%  satisfied: {final['satisfied']}"
             if final.get("satisfied") is not None else ""))
    return EXIT_OK


def _fmt(v, digits=2):
    return "-" if v is None else f"{v:.{digits}f}"


def report_rows(run_dirs) -> list[list[str]]:
    rows = []
    for d in run_dirs:
        path = Path(d) / "final_report.json"
        if not path.exists():
            rows.append([f"incomplete ({d})", "-", "-", "-", "-"])
            continue
        rep = json.loads(path.read_text())
        if rep.get("method") == "CGMQ":
            hyper = f"{rep['direction']}, {rep['granularity']}"
            rows.append(["CGMQ", hyper, _fmt(rep["accuracy"]), _fmt(rep["rbop_percent"]),
                         _fmt(rep["bound_percent"])])
        else:
            rows.append([rep.get("method", "FP32"), "-", _fmt(rep["accuracy"]),
                         _fmt(rep.get("rbop_percent", 100.0)), "-"])
    return rows


def markdown_table(rows) -> str:
    lines = ["| " + " | ".join(TABLE_HEADER) + " |",
             "|" + "|".join("---" for _ in TABLE_HEADER) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def csv_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    rows = report_rows(args.runs)
    print(markdown_table(rows))
    if args.csv:
        Path(args.csv).write_text(csv_table(rows))
    return EXIT_OK


def cmd_bop(args) -> int:
    if args.checkpoint:
        net, _ = ckpt.load(args.checkpoint)
        if not net.is_quantized:
            attach_quantizers(net, "layer")
    else:
        net = lenet5()
        attach_quantizers(net, args.granularity)
    if args.bits is not None:
        g = {2: 0.5, 4: 1.5, 8: 2.5, 16: 3.5, 32: 5.5}[args.bits]
        for gate in net.gates().values():
            gate.value[...] = g
    rep = network_bop(net, args.bound)
    floor = floor_report(net)
    if args.json:
        out = rep.to_dict()
        out["floor_percent"] = floor.rbop_percent
        print(json.dumps(out, indent=1, sort_keys=True))
        return EXIT_OK
    print(f"{'layer':<8} {'BOP':>16}")
    for name, v in rep.per_layer.items():
        print(f"{name:<8} {v:>16,d}")
    print(f"{'total':<8} {rep.total:>16,d}")
    print(f"{'32-bit':<8} {rep.total_32:>16,d}")
    print(f"RBOP: {rep.rbop_percent:.6g}%")
    print(f"floor (all 2-bit): {floor.rbop_percent:.6g}%  "
          f"(reference value {REFERENCE_FLOOR}%; acceptance tolerance 0.01pp)")
    if rep.satisfied is not None:
        print(f"bound {rep.bound_percent}%: {'satisfied' if rep.satisfied else 'violated'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgmq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training phases and write a run directory")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--dir", choices=RULES, help="gate direction rule")
    t.add_argument("--granularity", choices=GRANULARITIES)
    t.add_argument("--bound", type=float, help="relative BOP bound in percent")
    t.add_argument("--seed", type=int)
    t.add_argument("--phases", type=_phases, help=f"comma list from {','.join(PHASES)}")
    t.add_argument("--epochs-float", type=int)
    t.add_argument("--epochs-calibrate", type=int)
    t.add_argument("--epochs-ranges", type=int)
    t.add_argument("--epochs-cgmq", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--gate-lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--train-subset", type=int)
    t.add_argument("--fixed-ranges", action="store_true", help="skip range learning")
    t.add_argument("--init-from", help="checkpoint to start from (e.g. run/checkpoints/ranges)")
    t.add_argument("--data-dir", help="MNIST directory (default $CGMQ_DATA_DIR or ./data/mnist)")
    t.add_argument("--out", help="run directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="tabulate final reports of run directories")
    r.add_argument("runs", nargs="*")
    r.add_argument("--csv", help="also write the table as CSV to this path")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("bop", help="BOP cost of a checkpoint or a fresh model")
    b.add_argument("--checkpoint")
    b.add_argument("--bits", type=int, choices=(2, 4, 8, 16, 32),
                   help="override every gate to this bit-width")
    b.add_argument("--bound", type=float)
    b.add_argument("--granularity", choices=GRANULARITIES, default="layer")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bop)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except InfeasibleBudget as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataMissingError, IdxFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
