"""Command-line entry points.

Exit codes: 0 success, 1 usage or input error, 2 overflow with ``--strict``,
3 numeric failure (non-finite loss or activations).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, cost, data, io, lab
from .engine import IntegerModel
from .graph import GraphError, RangeObserver, mlp, small_cnn
from .kernels import AccumulatorConfig
from .qoat import CalibConfig, NumericError, TrainConfig, accuracy, observe_only, predict_float, train_toy

EXIT_OK, EXIT_USAGE, EXIT_OVERFLOW, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("oaq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def int_list(text: str) -> list:
    """``"4..8"`` -> [4, 5, 6, 7, 8]; ``"9,64"`` -> [9, 64]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out += list(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def float_list(text: str) -> list:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _labels(y):
    if y is None:
        raise UsageError("this command needs labelled data (a 'y' tensor)")
    return y


def _load_config(path) -> tuple:
    if path is None:
        return CalibConfig(), TrainConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    calib_keys = {f.name for f in fields(CalibConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    calib = dict(doc.pop("calib", {}))
    train = dict(doc.pop("train", {}))
    # flat keys are accepted when they name a field of exactly one config
    for k, v in doc.items():
        if k in calib_keys and k in train_keys:
            raise UsageError(f"config key {k!r} is ambiguous; put it under 'calib' or 'train'")
        if k in calib_keys:
            calib[k] = v
        elif k in train_keys:
            train[k] = v
        else:
            raise UsageError(f"unknown config key {k!r}")
    bad = sorted(set(calib) - calib_keys) + sorted(set(train) - train_keys)
    if bad:
        raise UsageError(f"unknown config keys {bad}")
    try:
        return CalibConfig(**calib), TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(a) -> int:
    kw = {}
    if a.features is not None:
        kw["features"] = a.features
    x, y = data.make(a.dataset, n=a.n, seed=a.seed, **kw)
    meta = {"dataset": a.dataset, "seed": a.seed}
    if a.test_out:
        (xt, yt), (xe, ye) = data.split(x, y, a.test_fraction)
        io.save_data(a.out, xt, yt, meta)
        io.save_data(a.test_out, xe, ye, meta)
        print(f"wrote {len(xt)} training and {len(xe)} test examples")
    else:
        io.save_data(a.out, x, y, meta)
        print(f"wrote {len(x)} examples to {a.out}")
    return EXIT_OK


def cmd_init_model(a) -> int:
    kw = {"bits": a.bits, "symmetric_weights": not a.asymmetric_weights}
    if a.arch == "mlp":
        g = mlp(int(np.prod(a.input_shape)), a.hidden, a.classes, seed=a.seed, **kw)
    else:
        g = small_cnn(tuple(a.input_shape), a.classes, seed=a.seed, **kw)
    io.save_model(g, a.out)
    print(f"wrote {a.arch} with {len(g.layers)} layers to {a.out}")
    return EXIT_OK


def _reshape_for(g, x):
    return np.asarray(x, dtype=np.float32).reshape((len(x),) + tuple(g.input_shape))


def cmd_train(a) -> int:
    g = io.load_model(a.model)
    x, y, _ = io.load_data(a.data)
    x = _reshape_for(g, x)
    train = TrainConfig(lr=a.lr, batch_size=a.batch_size, seed=a.seed)
    train_toy(g, (x, _labels(y)), a.epochs, train=train, quant=False, max_steps=a.max_steps)
    io.save_model(g, a.out)
    print(f"float training accuracy {accuracy(predict_float(g, x, quant=False), y):.4f}")
    return EXIT_OK


def cmd_quantize(a) -> int:
    g = io.load_model(a.model)
    x, _, _ = io.load_data(a.calib_data)
    for slot in g.slots.values():
        slot.bits = a.bits
        slot.alpha = 1.0
        slot.frozen = False
        slot.observer = RangeObserver(momentum=slot.observer.momentum)
        if slot.role == "weight":
            slot.symmetric = a.symmetric_weights
    observe_only(g, _reshape_for(g, x))
    io.save_model(g, a.out)
    print(f"quantized to {a.bits} bits using {len(x)} calibration examples")
    return EXIT_OK


def cmd_calibrate(a) -> int:
    g = io.load_model(a.model)
    x, y, _ = io.load_data(a.data)
    x = _reshape_for(g, x)
    calib, train = _load_config(a.config)
    train = replace(train, seed=a.seed)
    g.history = []
    train_toy(g, (x, _labels(y)), a.epochs, calib, train, quant=True, max_steps=a.max_steps)
    io.save_model(g, a.out)
    res = IntegerModel(g).run(x, AccumulatorConfig(calib.acc_bits), threads=a.threads)
    final = {
        "float_accuracy": accuracy(predict_float(g, x), y),
        "integer_accuracy": lab.metric(g, res.outputs, y),
        "overflow": {k: r.events for k, r in res.reports.items()},
    }
    if a.report:
        io.write_report(a.report, "calibration", {
            "config": {"calib": calib.__dict__, "train": train.__dict__},
            "trajectory": g.history,
            "alpha": [r.to_dict() for r in lab.alpha_report(g)],
            "final": final,
        })
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_infer(a) -> int:
    g = io.load_model(a.model)
    x, y, _ = io.load_data(a.input)
    model = IntegerModel(g)
    acc = AccumulatorConfig(a.acc_bits, a.policy)
    res = model.run(_reshape_for(g, x), acc, threads=a.threads)
    total = res.total
    summary = total.summary()
    if g.task == "classification":
        preds = res.predictions()
        print("predictions: " + " ".join(str(int(p)) for p in preds))
        if y is not None:
            summary["accuracy"] = lab.metric(g, res.outputs, y)
    else:
        print("outputs: " + " ".join(f"{v:.6g}" for v in np.ravel(res.outputs)))
    print("overflow: " + json.dumps(summary, sort_keys=True))
    if a.report:
        io.write_report(a.report, "inference", {
            "acc_bits": a.acc_bits,
            "policy": a.policy,
            "summary": summary,
            "layers": {k: r.summary() for k, r in res.reports.items()},
            "outputs": res.outputs,
        })
    if a.strict and total.events > 0:
        print(f"error: {total.events} overflow events with --strict", file=sys.stderr)
        return EXIT_OVERFLOW
    return EXIT_OK


def cmd_simulate(a) -> int:
    cfg = lab.McConfig(tuple(a.bits), tuple(a.depths), a.trials, a.acc_bits, a.seed, a.distribution)
    rows = lab.mc_rows(cfg, lab.mc_non_overflow_ratio(cfg, threads=a.threads))
    io.write_csv(a.out, rows, ["bits", "depth", "trials", "non_overflow_ratio", "std_error"])
    for r in rows:
        print(f"bits={r['bits']} depth={r['depth']} non_overflow_ratio={r['non_overflow_ratio']:.5f}")
    return EXIT_OK


def cmd_inject(a) -> int:
    g = io.load_model(a.model)
    x, y, _ = io.load_data(a.data)
    spec = lab.InjectionSpec(a.layers, 0.0, a.mode, a.level, a.seed)
    rows = lab.inject_overflow(g, spec, (_reshape_for(g, x), _labels(y)), a.ratios, threads=a.threads)
    for r in rows:
        r["layers"] = ";".join(r["layers"])
        print(f"ratio={r['ratio']:g} metric={r['metric']:.4f} events={r['events']}")
    io.write_csv(a.out, rows, ["ratio", "metric", "events", "steps", "layers"])
    return EXIT_OK


def cmd_cost(a) -> int:
    try:
        res = cost.compare(a.register_bits, a.operand_bits)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if a.json:
        print(json.dumps(res, sort_keys=True))
    else:
        print(f"32-bit accumulator: {res['macs_per_instruction_acc32']} MACs/instruction")
        print(f"16-bit accumulator: {res['macs_per_instruction_acc16']} MACs/instruction")
        print(f"ratio: {res['ratio']:.1f}")
    return EXIT_OK


def cmd_alpha_report(a) -> int:
    g = io.load_model(a.model)
    x = None
    if a.data:
        x = _reshape_for(g, io.load_data(a.data)[0])
    rows = [r.to_dict() for r in lab.alpha_report(g, x, sort_by=a.sort, threads=a.threads)]
    for r in rows:
        print(f"{r['layer']}: weight_alpha={r['weight_alpha']:.4f} activation_alpha={r['activation_alpha']:.4f} "
              f"effective_bits={r['weight_effective_bits']:.3f}/{r['activation_effective_bits']:.3f}"
              + ("" if r["overflow"] is None else f" overflow={r['overflow']}"))
    if a.out:
        io.write_csv(a.out, rows)
    if a.report:
        io.write_report(a.report, "alpha", {"layers": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oaq", description="Overflow-aware quantization with 16-bit accumulators.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = cmd("gen-data", cmd_gen_data, "generate a toy dataset")
    sp.add_argument("--dataset", choices=data.DATASETS, default="blobs")
    sp.add_argument("--n", type=int, default=4096)
    sp.add_argument("--features", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--test-out")
    sp.add_argument("--test-fraction", type=float, default=0.25)

    sp = cmd("init-model", cmd_init_model, "create a randomly initialised model")
    sp.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    sp.add_argument("--input-shape", type=int_list, default=[64])
    sp.add_argument("--hidden", type=int_list, default=[1024, 32])
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--bits", type=int, default=8)
    sp.add_argument("--asymmetric-weights", action="store_true")
    sp.add_argument("--out", required=True)

    sp = cmd("train", cmd_train, "float training")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = cmd("quantize", cmd_quantize, "post-training quantization with alpha = 1")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib-data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bits", type=int, default=8)
    sp.add_argument("--symmetric-weights", action="store_true")

    sp = cmd("calibrate", cmd_calibrate, "overflow-aware training of the range factors")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.add_argument("--threads", type=int, default=1)

    sp = cmd("infer", cmd_infer, "integer-only inference")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--acc-bits", type=int, choices=(16, 32), default=16)
    sp.add_argument("--policy", choices=("wrap", "saturate"), default="wrap")
    sp.add_argument("--report")
    sp.add_argument("--strict", action="store_true")
    sp.add_argument("--threads", type=int, default=1)

    sp = cmd("simulate-overflow", cmd_simulate, "Monte Carlo non-overflow ratio")
    sp.add_argument("--bits", type=int_list, default=[4, 5, 6, 7, 8])
    sp.add_argument("--depths", type=int_list, default=[9, 64, 256, 1024])
    sp.add_argument("--trials", type=int, default=100_000)
    sp.add_argument("--acc-bits", type=int, choices=(16, 32), default=16)
    sp.add_argument("--distribution", choices=lab.DISTRIBUTIONS, default="uniform")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = cmd("inject", cmd_inject, "accuracy under injected accumulator overflow")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--layers", default="all")
    sp.add_argument("--ratios", type=float_list, default=[0.0, 0.0005, 0.05])
    sp.add_argument("--mode", choices=("wrap", "saturate"), default="wrap")
    sp.add_argument("--level", choices=("step", "output"), default="step")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = cmd("cost-model", cmd_cost, "MACs per SIMD instruction for 16- vs 32-bit accumulators")
    sp.add_argument("--register-bits", type=int, default=128)
    sp.add_argument("--operand-bits", type=int, default=8)
    sp.add_argument("--json", action="store_true")

    sp = cmd("alpha-report", cmd_alpha_report, "per-layer range factors and effective bits")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data")
    sp.add_argument("--sort", choices=("layer", "weight_alpha", "activation_alpha"))
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out")
    sp.add_argument("--report")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, io.FormatError, GraphError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
