"""Training phases and the constrained bit-width search loop.

A run goes through up to four phases:

``float``      train LeNet-5 in floating point (Adam on weights).
``calibrate``  attach fake-quant blocks with all gates at 32 bits and set
               ranges from weight extrema and running activation extrema.
``ranges``     learn the ranges with Adam; weights stay frozen.
``cgmq``       learn weights and ranges with Adam while every mini-batch moves
               the gates along the direction rule.  The budget is checked at
               each epoch end and the resulting Sat/Unsat state is used for
               all gate updates of the following epoch.

The model returned by the search is the last epoch-end model that satisfied
the budget, so a run that satisfied it at least once always reports a
feasible model.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .bop import CostReport, check_budget, check_feasible, network_bop
from .calibration import calibrate_activation_ranges, calibrate_weight_ranges
from .gates import DEFAULT_GATE_LR, GRANULARITIES, RULES, step_gates
from .mnist import PIXEL_RANGE, DataSet, batches, load_split, resolve_data_dir
from .nn import Adam, Network, attach_quantizers, cross_entropy_loss, init_weights, lenet5

log = logging.getLogger("cgmq")

PHASES = ("float", "calibrate", "ranges", "cgmq")
EVAL_BATCH = 1000


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs_float: int = 10
    epochs_calibrate: int = 1
    epochs_ranges: int = 3
    epochs_cgmq: int = 15
    lr: float = 0.001
    gate_lr: float | None = None
    direction: str = "dir1"
    granularity: str = "layer"
    bound: float = 0.40
    batch_size: int = 128
    seed: int = 42
    train_subset: int | None = None
    learn_ranges: bool = True
    phases: list = field(default_factory=lambda: list(PHASES))
    init_from: str | None = None
    data_dir: str | None = None
    out_dir: str | None = None

    @property
    def effective_gate_lr(self) -> float:
        return self.gate_lr if self.gate_lr is not None else DEFAULT_GATE_LR[self.direction]

    def validate(self) -> "TrainConfig":
        for name in ("epochs_float", "epochs_calibrate", "epochs_ranges", "epochs_cgmq"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.gate_lr is not None and not self.gate_lr > 0:
            raise ConfigError(f"gate_lr must be positive, got {self.gate_lr}")
        if self.direction not in RULES:
            raise ConfigError(f"direction must be one of {RULES}, got {self.direction!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, "
                              f"got {self.granularity!r}")
        if not 0 < self.bound <= 100:
            raise ConfigError(f"bound must lie in (0, 100] percent, got {self.bound}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if self.train_subset is not None and self.train_subset < 1:
            raise ConfigError(f"train_subset must be positive, got {self.train_subset}")
        unknown = [p for p in self.phases if p not in PHASES]
        if unknown or not self.phases:
            raise ConfigError(f"phases must be a non-empty subset of {PHASES}, got {self.phases}")
        order = [PHASES.index(p) for p in self.phases]
        if order != sorted(set(order)):
            raise ConfigError(f"phases must be unique and in order {PHASES}, got {self.phases}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)


PRESETS = {
    "desk": {},
    "ci": {"train_subset": 6000},
    "full": {"epochs_float": 250, "epochs_ranges": 20, "epochs_cgmq": 250},
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig.from_dict({**PRESETS[name], **overrides})


def _batch_epoch(phase: str, epoch: int) -> int:
    # each phase draws its own shuffles regardless of earlier phase lengths
    return PHASES.index(phase) * 100_000 + epoch


def evaluate(net: Network, data: DataSet, batch_size: int = EVAL_BATCH) -> float:
    """Top-1 accuracy in percent on the forward path used for training."""
    correct = 0
    for x, y in batches(data, batch_size, 0, 0, shuffle=False):
        correct += int(np.count_nonzero(net.forward(x).argmax(axis=1) == y))
    return 100.0 * correct / len(data)


def predict_logits(net: Network, images, batch_size: int = EVAL_BATCH) -> np.ndarray:
    return np.concatenate([net.forward(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def train_step(net: Network, opt: Adam, x, y, include_weights=True, include_ranges=True):
    """Forward, loss, backward and one Adam step.  Returns ``(loss, logits)``
    where the logits are those of the pre-update parameters."""
    logits = net.forward(x)
    loss, dlogits = cross_entropy_loss(logits, y)
    net.backward(dlogits, input_grad=False)
    opt.step(net.named_params(include_ranges, include_weights),
             net.named_grads(include_ranges, include_weights))
    if include_ranges:
        net.clamp_ranges()
    return loss, logits


def _run_epoch(net, opt, data, cfg, phase, epoch, include_weights, include_ranges,
               after_step=None) -> float:
    total, count = 0.0, 0
    for x, y in batches(data, cfg.batch_size, cfg.seed, _batch_epoch(phase, epoch)):
        loss, _ = train_step(net, opt, x, y, include_weights, include_ranges)
        if after_step is not None:
            after_step()
        total += loss * len(y)
        count += len(y)
    return total / max(count, 1)


def _noop(record):
    pass


def run_phase_float(cfg: TrainConfig, train: DataSet, test: DataSet, net=None,
                    on_epoch=_noop) -> tuple[Network, float]:
    if net is None:
        net = lenet5()
        init_weights(net, cfg.seed)
    if net.is_quantized:
        raise ConfigError("float phase needs an unquantized network")
    opt = Adam(cfg.lr)
    for epoch in range(cfg.epochs_float):
        loss = _run_epoch(net, opt, train, cfg, "float", epoch, True, False)
        acc = evaluate(net, test)
        log.info("float epoch %d: loss %.4f acc %.2f%%", epoch, loss, acc)
        on_epoch({"phase": "float", "epoch": epoch, "train_loss": loss, "test_accuracy": acc})
    return net, evaluate(net, test)


def run_phase_calibrate(cfg: TrainConfig, train: DataSet, net: Network) -> Network:
    """Attach quantizers at 32 bits and calibrate all ranges."""
    if not net.is_quantized:
        attach_quantizers(net, cfg.granularity, input_range=PIXEL_RANGE)
    calibrate_weight_ranges(net)

    def stream():
        for epoch in range(cfg.epochs_calibrate):
            yield from batches(train, cfg.batch_size, cfg.seed, _batch_epoch("calibrate", epoch))

    if cfg.epochs_calibrate:
        calibrate_activation_ranges(net, stream())
    return net


def run_phase_ranges(cfg: TrainConfig, train: DataSet, test: DataSet, net: Network,
                     on_epoch=_noop) -> tuple[Network, float]:
    if not net.is_quantized:
        raise ConfigError("ranges phase needs a calibrated network")
    if cfg.learn_ranges:
        opt = Adam(cfg.lr)
        for epoch in range(cfg.epochs_ranges):
            loss = _run_epoch(net, opt, train, cfg, "ranges", epoch, False, True)
            acc = evaluate(net, test)
            log.info("ranges epoch %d: loss %.4f acc %.2f%%", epoch, loss, acc)
            on_epoch({"phase": "ranges", "epoch": epoch, "train_loss": loss,
                      "test_accuracy": acc})
    return net, evaluate(net, test)


@dataclass
class CgmqResult:
    net: Network
    accuracy: float
    report: CostReport
    selected_epoch: int | None
    last_epoch_satisfied: bool
    epochs: list


def run_phase_cgmq(cfg: TrainConfig, train: DataSet, test: DataSet, net: Network,
                   on_epoch=_noop, on_report=_noop) -> CgmqResult:
    if not net.is_quantized:
        raise ConfigError("cgmq phase needs a calibrated network")
    check_feasible(net, cfg.bound)
    report = network_bop(net, cfg.bound)
    on_report(0, report)
    state = check_budget(report)
    best = None
    if report.satisfied:
        best = (None, net.state_dict(), report)
    quantizers = net.quantizers()
    opt = Adam(cfg.lr)
    gate_lr = cfg.effective_gate_lr
    epochs = []
    for epoch in range(cfg.epochs_cgmq):
        used = []

        def gate_step(state=state):
            step_gates(quantizers, cfg.direction, state, gate_lr, cfg.granularity)
            used.append(state)

        loss = _run_epoch(net, opt, train, cfg, "cgmq", epoch, True, True, gate_step)
        if any(s is not state for s in used):
            raise AssertionError("sat state changed within an epoch")
        report = network_bop(net, cfg.bound)
        acc = evaluate(net, test)
        record = {"phase": "cgmq", "epoch": epoch, "train_loss": loss, "test_accuracy": acc,
                  "sat_state_used": state.value, "gate_updates": len(used),
                  "rbop_percent": report.rbop_percent, "satisfied": report.satisfied,
                  "gate_bits": {n: g.histogram() for n, g in net.gates().items()}}
        log.info("cgmq epoch %d [%s]: loss %.4f acc %.2f%% rbop %.4f%% %s", epoch,
                 state.value, loss, acc, report.rbop_percent,
                 "sat" if report.satisfied else "unsat")
        on_report(epoch + 1, report)
        on_epoch(record)
        epochs.append(record)
        if report.satisfied:
            best = (epoch, net.state_dict(), report)
        state = check_budget(report)

    last_ok = bool(epochs[-1]["satisfied"]) if epochs else bool(report.satisfied)
    if best is None:
        return CgmqResult(net, evaluate(net, test), report, None, last_ok, epochs)
    selected, state_dict, sel_report = best
    net.load_state_dict(state_dict)
    return CgmqResult(net, evaluate(net, test), sel_report, selected, last_ok, epochs)


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    net: Network | None = None


class RunWriter:
    """Run directory: config, per-epoch metrics, cost reports, checkpoints,
    final report.  Does nothing when ``root`` is ``None``."""

    def __init__(self, root):
        self.root = Path(root) if root else None
        if self.root:
            (self.root / "cost_reports").mkdir(parents=True, exist_ok=True)
            (self.root / "checkpoints").mkdir(exist_ok=True)
            (self.root / "epoch_metrics.jsonl").write_text("")

    def json(self, name, obj):
        if self.root:
            (self.root / name).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def epoch(self, record):
        if self.root:
            with open(self.root / "epoch_metrics.jsonl", "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def report(self, index, report: CostReport):
        self.json(f"cost_reports/{index:03d}.json", report.to_dict())

    def checkpoint(self, name, net, meta):
        if self.root:
            ckpt.save(self.root / "checkpoints" / name, net, meta)


def load_data(cfg: TrainConfig) -> tuple[DataSet, DataSet]:
    data_dir = resolve_data_dir(cfg.data_dir)
    train = load_split(data_dir, "train")
    test = load_split(data_dir, "test")
    if cfg.train_subset:
        train = train.subset(cfg.train_subset)
    return train, test


def run(cfg: TrainConfig, train: DataSet | None = None, test: DataSet | None = None) -> RunRecord:
    """Run the configured phases end to end and write the run directory."""
    cfg.validate()
    phases = list(cfg.phases)
    meta = {}
    net = None
    if cfg.init_from:
        net, meta = ckpt.load(cfg.init_from)
        meta = {k: v for k, v in meta.items() if k != "quant"}
    if "cgmq" in phases:
        # the floor depends only on the architecture: fail before training
        probe = lenet5()
        attach_quantizers(probe, "layer")
        check_feasible(probe, cfg.bound)
    if train is None or test is None:
        train, test = load_data(cfg)

    writer = RunWriter(cfg.out_dir)
    writer.json("config.json", cfg.to_dict())
    record = RunRecord(cfg.to_dict())
    timing = {}

    def on_epoch(r):
        record.epochs.append(r)
        writer.epoch(r)

    if "float" in phases:
        t = time.perf_counter()
        net, acc = run_phase_float(cfg, train, test, net, on_epoch)
        timing["float"] = time.perf_counter() - t
        meta["float_accuracy"] = acc
        writer.checkpoint("float", net, meta)
    if net is None:
        raise ConfigError("no float phase and no init_from checkpoint: nothing to start from")
    if "calibrate" in phases:
        t = time.perf_counter()
        run_phase_calibrate(cfg, train, net)
        meta["calibrated_accuracy"] = evaluate(net, test)
        timing["calibrate"] = time.perf_counter() - t
        writer.checkpoint("calibrated", net, meta)
    if "ranges" in phases:
        t = time.perf_counter()
        net, acc = run_phase_ranges(cfg, train, test, net, on_epoch)
        timing["ranges"] = time.perf_counter() - t
        meta["ranges_accuracy"] = acc
        writer.checkpoint("ranges", net, meta)

    final = {"float_accuracy": meta.get("float_accuracy"),
             "calibrated_accuracy": meta.get("calibrated_accuracy"),
             "ranges_accuracy": meta.get("ranges_accuracy")}
    if "cgmq" in phases:
        t = time.perf_counter()
        res = run_phase_cgmq(cfg, train, test, net, on_epoch, writer.report)
        timing["cgmq"] = time.perf_counter() - t
        net = res.net
        final.update({
            "method": "CGMQ", "direction": cfg.direction, "granularity": cfg.granularity,
            "bound_percent": cfg.bound, "accuracy": res.accuracy,
            "rbop_percent": res.report.rbop_percent, "satisfied": bool(res.report.satisfied),
            "selected_epoch": res.selected_epoch,
            "last_epoch_satisfied": res.last_epoch_satisfied,
            "cost_report": res.report.to_dict(),
        })
        meta["cgmq_accuracy"] = res.accuracy
        writer.checkpoint("final", net, meta)
    else:
        acc = evaluate(net, test)
        report = network_bop(net) if net.is_quantized else None
        final.update({"method": "FP32" if not net.is_quantized else "quantized-32",
                      "accuracy": acc, "rbop_percent": report.rbop_percent if report else 100.0,
                      "bound_percent": None, "satisfied": None})
    writer.json("final_report.json", final)
    writer.json("timing.json", timing)
    record.final = final
    record.net = net
    return record
