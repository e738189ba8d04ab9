"""Command-line interface.

Subcommands cover the whole workflow:

    gen-synthetic   write a seeded synthetic IDX dataset
    train           quantization-aware training of a layer graph
    convert         fold batchnorm and map the graph onto a spiking net
    simulate        run a spiking net over a dataset split
    eval            accuracy of either container type
    finetune        layer-wise repair of a pipelined spiking net
    count-ops       synaptic-op accounting for graph vs spiking net
    pipeline        train/load, convert, simulate all variants, report

`pipeline` is the report path: it writes report.csv / report.json plus
rendered PNG figures into --outdir.  Flags are long-form only; `train`
and `pipeline` also accept --config with a JSON file whose keys are flag
names (explicit flags win over the file).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, convert as conv, data as datamod, finetune as ftmod, model as modelmod
from . import report as reportmod, serialize
from .numerics import REAL, SgdConfig
from .qat import BaselineThresholdConfig, estimate_baseline_threshold
from .snn_sim import count_ops, simulate

VERSION_STRING = f"spikequant {__version__}"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _shape(text: str) -> tuple:
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected like 1x28x28")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected like 1x28x28")
    return dims


_SUBPARSERS = {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikequant", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)

    def new(name, **kw):
        p = sub.add_parser(name, **kw)
        _SUBPARSERS[name] = p
        return p

    p = new("gen-synthetic", help="write a seeded synthetic IDX dataset")
    p.add_argument("--outdir", required=True)
    p.add_argument("--classes", type=_positive_int, default=10)
    p.add_argument("--shape", type=_shape, default=(1, 28, 28), help="CxHxW, e.g. 1x28x28")
    p.add_argument("--train-count", type=_positive_int, default=2000)
    p.add_argument("--test-count", type=_positive_int, default=1000)
    p.add_argument("--noise", type=float, default=0.35)
    p.add_argument("--modes-per-class", type=_positive_int, default=1)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--mean", type=float, default=0.5)
    p.add_argument("--std", type=float, default=0.5)

    p = new("train", help="quantization-aware training")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--arch", choices=sorted(modelmod.ARCHITECTURES), default="mlp3")
    p.add_argument("--bits", type=_positive_int, default=2)
    p.add_argument("--weight-bits", type=_positive_int, default=None)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--epochs", type=_nonneg_int, default=60)
    p.add_argument("--learning-rate", type=float, default=0.04)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--lr-drop", type=_nonneg_int, action="append", default=None,
                   help="epoch at which to multiply the learning rate by --lr-drop-factor; repeatable")
    p.add_argument("--lr-drop-factor", type=float, default=0.1)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--metrics", help="per-epoch metrics CSV")

    p = new("convert", help="fold batchnorm and build a spiking network")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--neuron", choices=[conv.NEURON_IF, conv.NEURON_SIGNED_IF],
                   default=conv.NEURON_IF)
    p.add_argument("--schedule", choices=[conv.FULL_WAIT, conv.PIPELINED],
                   default=conv.FULL_WAIT)
    p.add_argument("--neg-threshold", type=float, default=conv.DEFAULT_NEG_THRESHOLD)
    p.add_argument("--threshold-mode", choices=["learned", "max", "percentile"],
                   default="learned")
    p.add_argument("--percentile", type=float, default=99.0)
    p.add_argument("--calibration-size", type=_positive_int, default=128)
    p.add_argument("--data-dir", help="needed for max/percentile threshold modes")
    p.add_argument("--check", type=_positive_int, default=None,
                   help="verify rate/activation equivalence on this many test samples")

    p = new("simulate", help="run a spiking network over a dataset split")
    p.add_argument("--snn", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=_positive_int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=256)
    p.add_argument("--trace", help="directory for per-stage spike CSVs + summary")
    p.add_argument("--trace-sample", type=_nonneg_int, default=0)

    p = new("eval", help="accuracy of a saved graph or spiking network")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=_positive_int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=256)

    p = new("finetune", help="layer-wise fine-tuning against the source graph")
    p.add_argument("--graph", required=True, help="folded source graph file")
    p.add_argument("--snn", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--passes", type=_positive_int, default=1)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--shuffle-seed", type=_nonneg_int, default=0)
    p.add_argument("--loss-csv", help="per-stage loss curve CSV")

    p = new("count-ops", help="synaptic ops: static graph vs recorded spikes")
    p.add_argument("--graph", required=True)
    p.add_argument("--snn", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=_positive_int, default=256)
    p.add_argument("--json", dest="json_out", help="write counters to this JSON file")

    p = new("pipeline", help="train/load, convert, simulate variants, report")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--model", help="existing trained graph; skips training")
    p.add_argument("--arch", choices=sorted(modelmod.ARCHITECTURES), default="mlp3")
    p.add_argument("--bits", type=_positive_int, default=2)
    p.add_argument("--weight-bits", type=_positive_int, default=None)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--epochs", type=_nonneg_int, default=30)
    p.add_argument("--learning-rate", type=float, default=0.04)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--lr-drop", type=_nonneg_int, action="append", default=None)
    p.add_argument("--lr-drop-factor", type=float, default=0.1)
    p.add_argument("--full-wait", action="store_true",
                   help="evaluate variants under the lossless full-wait schedule")
    p.add_argument("--neg-threshold", type=float, default=conv.DEFAULT_NEG_THRESHOLD)
    p.add_argument("--finetune-passes", type=_positive_int, default=1)
    p.add_argument("--finetune-lr", type=float, default=1e-4)
    p.add_argument("--finetune-batch-size", type=_positive_int, default=64)
    p.add_argument("--eval-limit", type=_positive_int, default=None)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list):
    """Let --config supply defaults; explicit flags still win."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    with open(path) as f:
        cfg = json.load(f)
    sub = _SUBPARSERS[args.command]
    valid = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise ValueError(f"unknown config key {key!r} for {args.command}")
        defaults[dest] = tuple(value) if dest == "shape" else value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# shared helpers


def _sgd_from_args(args) -> SgdConfig:
    schedule = {}
    for epoch in args.lr_drop or []:
        schedule[epoch] = schedule.get(epoch, 1.0) * args.lr_drop_factor
    return SgdConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                     weight_decay=args.weight_decay, lr_schedule=schedule)


def _ensure_folded(net: modelmod.NetworkDef) -> modelmod.NetworkDef:
    if any(l.kind == "batchnorm" for l in net.layers):
        return modelmod.fold_batchnorm(net)
    return net


def _snn_eval(snn, dataset, batch_size=256, limit=None):
    """Accuracy plus aggregated op counters and mean per-stage rates."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    hits = 0
    ann_ops = snn_ops = 0
    per_stage_spikes = None
    rate_sums = None
    for start in range(0, n, batch_size):
        xb = dataset.images[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        readout, trace, ops = simulate(snn, xb)
        hits += int((readout.argmax(axis=1) == yb).sum())
        ann_ops += ops.ann_ops
        snn_ops += ops.snn_ops
        if per_stage_spikes is None:
            per_stage_spikes = list(ops.per_stage_spikes)
            rate_sums = [float(r.sum()) for r in trace.rates]
            rate_elems = [r.size for r in trace.rates]
        else:
            per_stage_spikes = [a + b for a, b in zip(per_stage_spikes, ops.per_stage_spikes)]
            for i, r in enumerate(trace.rates):
                rate_sums[i] += float(r.sum())
                rate_elems[i] += r.size
    acc = hits / n
    counters = {"ann_ops": ann_ops, "snn_ops": snn_ops, "samples": n,
                "ratio": (snn_ops / ann_ops) if ann_ops else float("nan"),
                "per_stage_spikes": per_stage_spikes or []}
    mean_rates = [s / e for s, e in zip(rate_sums or [], rate_elems or [])]
    return acc, counters, mean_rates


def _estimate_overrides(net, dataset, mode, percentile, calibration_size):
    """One threshold per spiking stage from a single calibration batch."""
    xb = dataset.images[:calibration_size]
    pre = modelmod.quantizer_inputs(net, xb)
    cfg = BaselineThresholdConfig(mode="max" if mode == "max" else "percentile",
                                  percentile=percentile)
    return [estimate_baseline_threshold(pre[i], cfg) for i in net.quant_layers()]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> int:
    train_x, train_y, test_x, test_y = datamod.make_synthetic(
        classes=args.classes, shape=args.shape, train_count=args.train_count,
        test_count=args.test_count, noise=args.noise,
        modes_per_class=args.modes_per_class, seed=args.seed)
    datamod.write_dataset_dir(args.outdir, train_x, train_y, test_x, test_y,
                              mean=args.mean, std=args.std,
                              meta={"shape": list(args.shape), "seed": args.seed,
                                    "noise": args.noise})
    print(f"wrote {args.train_count} train / {args.test_count} test samples to {args.outdir}")
    return 0


def cmd_train(args) -> int:
    train_ds, test_ds, meta = datamod.load_dataset_dir(args.data_dir)
    net = modelmod.build(args.arch, bits=args.bits, seed=args.seed,
                         input_shape=tuple(train_ds.images.shape[1:]))
    net.weight_bits = args.weight_bits
    cfg = _sgd_from_args(args)
    net, history = modelmod.train(net, train_ds, cfg, epochs=args.epochs,
                                  batch_size=args.batch_size, eval_data=test_ds,
                                  log=lambda row: print(
                                      f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  "
                                      f"train {row['train_acc']:.4f}  test {row.get('test_acc', 0):.4f}"))
    modelmod.save(net, args.out)
    if args.metrics:
        reportmod.write_metrics_csv(history, args.metrics)
    final = history[-1]["test_acc"] if history else modelmod.evaluate(net, test_ds)
    print(f"saved {args.out} (test accuracy {final:.4f})")
    return 0


def cmd_convert(args) -> int:
    net = _ensure_folded(modelmod.load(args.model))
    overrides = None
    if args.threshold_mode != "learned":
        if not args.data_dir:
            raise ValueError("--threshold-mode max/percentile needs --data-dir for calibration")
        train_ds, _, _ = datamod.load_dataset_dir(args.data_dir)
        overrides = _estimate_overrides(net, train_ds, args.threshold_mode,
                                        args.percentile, args.calibration_size)
        print("threshold overrides:", " ".join(f"{t:.4f}" for t in overrides))
    snn = conv.convert(net, neuron_model=args.neuron, schedule_mode=args.schedule,
                       neg_threshold=args.neg_threshold, clip_overrides=overrides)
    conv.save(snn, args.out)
    print(f"saved {args.out}: {len(snn.stages)} stages, window {snn.steps} steps, "
          f"total {snn.schedule.total_steps} ({snn.schedule.mode})")
    if args.check:
        if args.schedule != conv.FULL_WAIT:
            raise ValueError("--check requires --schedule full_wait")
        _, test_ds, _ = datamod.load_dataset_dir(args.data_dir) if args.data_dir else (None, None, None)
        if test_ds is None:
            raise ValueError("--check needs --data-dir")
        rep = conv.equivalence_check(net, snn, test_ds.images[: args.check])
        print(rep)
        if not rep.ok:
            return 1
    return 0


def cmd_simulate(args) -> int:
    snn = conv.load(args.snn)
    train_ds, test_ds, _ = datamod.load_dataset_dir(args.data_dir)
    ds = test_ds if args.split == "test" else train_ds
    acc, counters, mean_rates = _snn_eval(snn, ds, batch_size=args.batch_size,
                                          limit=args.limit)
    print(f"accuracy {acc:.4f} on {counters['samples']} {args.split} samples "
          f"({snn.schedule.mode}, {snn.neuron_model}, T={snn.steps})")
    print(f"synaptic ops: graph {counters['ann_ops']}, spiking {counters['snn_ops']} "
          f"(ratio {counters['ratio']:.4f})")
    if args.trace:
        sample = ds.images[args.trace_sample : args.trace_sample + 1]
        _, trace, _ = simulate(snn, sample)
        reportmod.dump_trace(trace, args.trace, sample=0)
        print(f"trace written to {args.trace}")
    return 0


def cmd_eval(args) -> int:
    obj = serialize.load_any(args.model)
    train_ds, test_ds, _ = datamod.load_dataset_dir(args.data_dir)
    ds = test_ds if args.split == "test" else train_ds
    if isinstance(obj, modelmod.NetworkDef):
        n = len(ds) if args.limit is None else min(args.limit, len(ds))
        sub = datamod.Dataset(ds.images[:n], ds.labels[:n], split=ds.split)
        acc = modelmod.evaluate(obj, sub, batch_size=args.batch_size)
        print(f"graph accuracy {acc:.4f} on {n} {args.split} samples")
    else:
        acc, counters, _ = _snn_eval(obj, ds, batch_size=args.batch_size, limit=args.limit)
        print(f"spiking accuracy {acc:.4f} on {counters['samples']} {args.split} samples")
    return 0


def cmd_finetune(args) -> int:
    ann = _ensure_folded(modelmod.load(args.graph))
    snn = conv.load(args.snn)
    if snn.schedule.mode != conv.PIPELINED:
        print("note: fine-tuning a full_wait net is a no-op beyond float noise",
              file=sys.stderr)
    train_ds, _, _ = datamod.load_dataset_dir(args.data_dir)
    cfg = ftmod.FinetuneConfig(
        optimizer=SgdConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                            weight_decay=0.0),
        passes=args.passes, batch_size=args.batch_size, shuffle_seed=args.shuffle_seed)
    tuned, curves = ftmod.finetune(ann, snn, train_ds, cfg)
    conv.save(tuned, args.out)
    if args.loss_csv:
        reportmod.write_loss_curves(curves, args.loss_csv)
    print(f"saved {args.out} ({len(curves)} stages tuned)")
    return 0


def cmd_count_ops(args) -> int:
    ann = _ensure_folded(modelmod.load(args.graph))
    snn = conv.load(args.snn)
    train_ds, test_ds, _ = datamod.load_dataset_dir(args.data_dir)
    ds = test_ds if args.split == "test" else train_ds
    xb = ds.images[: args.limit]
    _, trace, _ = simulate(snn, xb)
    counters = count_ops(ann, trace, samples=xb.shape[0])
    print(f"samples {counters.samples}")
    print(f"graph ops   {counters.ann_ops}")
    print(f"spiking ops {counters.snn_ops}")
    print(f"ratio       {counters.ratio:.6f}")
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump({"samples": counters.samples, "ann_ops": counters.ann_ops,
                       "snn_ops": counters.snn_ops, "ratio": counters.ratio,
                       "per_stage_spikes": counters.per_stage_spikes},
                      f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_pipeline(args) -> int:
    config_echo = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    rep = reportmod.RunReport(config=config_echo, version=VERSION_STRING)
    os.makedirs(args.outdir, exist_ok=True)
    stage = "load-data"
    try:
        t_all = time.perf_counter()
        train_ds, test_ds, _ = datamod.load_dataset_dir(args.data_dir)

        stage = "train"
        t0 = time.perf_counter()
        if args.model:
            net = modelmod.load(args.model)
        else:
            net = modelmod.build(args.arch, bits=args.bits, seed=args.seed,
                                 input_shape=tuple(train_ds.images.shape[1:]))
            net.weight_bits = args.weight_bits
            net, history = modelmod.train(net, train_ds, _sgd_from_args(args),
                                          epochs=args.epochs, batch_size=args.batch_size,
                                          eval_data=test_ds)
            reportmod.write_metrics_csv(history, os.path.join(args.outdir, "metrics.csv"))
            modelmod.save(net, os.path.join(args.outdir, "graph.net"))
        rep.timing["train_s"] = time.perf_counter() - t0

        stage = "fold-batchnorm"
        folded = _ensure_folded(net)

        stage = "eval-graph"
        n_eval = len(test_ds) if args.eval_limit is None else min(args.eval_limit, len(test_ds))
        eval_ds = datamod.Dataset(test_ds.images[:n_eval], test_ds.labels[:n_eval], split="test")
        ann_acc = modelmod.evaluate(folded, eval_ds)
        rep.add_row("ann", ann_acc, ann_acc)

        stage = "convert"
        schedule = conv.FULL_WAIT if args.full_wait else conv.PIPELINED
        snn = conv.convert(folded, neuron_model=conv.NEURON_IF, schedule_mode=schedule,
                           neg_threshold=args.neg_threshold)
        conv.save(snn, os.path.join(args.outdir, "converted.snn"))

        stage = "simulate-alpha"
        t0 = time.perf_counter()
        alpha_acc, _, _ = _snn_eval(snn, eval_ds)
        rep.add_row("snn_alpha", alpha_acc, ann_acc)
        rep.timing["alpha_s"] = time.perf_counter() - t0

        stage = "simulate-beta"
        t0 = time.perf_counter()
        beta = conv.with_neuron_model(snn, conv.NEURON_SIGNED_IF)
        beta_acc, _, _ = _snn_eval(beta, eval_ds)
        rep.add_row("snn_beta", beta_acc, ann_acc)
        rep.timing["beta_s"] = time.perf_counter() - t0

        stage = "finetune"
        t0 = time.perf_counter()
        ft_cfg = ftmod.FinetuneConfig(
            optimizer=SgdConfig(learning_rate=args.finetune_lr, momentum=0.9,
                                weight_decay=0.0),
            passes=args.finetune_passes, batch_size=args.finetune_batch_size,
            shuffle_seed=args.seed)
        gamma, curves = ftmod.finetune(folded, beta, train_ds, ft_cfg)
        conv.save(gamma, os.path.join(args.outdir, "finetuned.snn"))
        reportmod.write_loss_curves(curves, os.path.join(args.outdir, "finetune_loss.csv"))
        rep.timing["finetune_s"] = time.perf_counter() - t0

        stage = "simulate-gamma"
        t0 = time.perf_counter()
        gamma_acc, counters, mean_rates = _snn_eval(gamma, eval_ds)
        rep.add_row("snn_gamma", gamma_acc, ann_acc)
        rep.timing["gamma_s"] = time.perf_counter() - t0
        rep.ops = counters
        rep.extras["mean_rates"] = mean_rates
        rep.extras["finetune_curves"] = {str(k): v for k, v in curves.items()}
        rep.extras["schedule"] = schedule
        rep.extras["window_steps"] = snn.steps
        rep.extras["total_steps"] = snn.schedule.total_steps
        rep.timing["total_s"] = time.perf_counter() - t_all

        stage = "report"
        paths = reportmod.write_report(rep, args.outdir)
        for row in rep.rows:
            print(f"{row['variant']:10s} accuracy {row['accuracy']:.4f} "
                  f"(delta {row['delta_acc']:+.4f})")
        print(f"ops ratio {counters['ratio']:.4f} "
              f"({counters['snn_ops']} spiking / {counters['ann_ops']} graph)")
        print(f"report written to {paths['csv']} and {paths['json']}")
        return 0
    except Exception as e:  # noqa: BLE001 - partial report then non-zero exit
        rep.failed_stage = stage
        rep.error = f"{type(e).__name__}: {e}"
        reportmod.write_report(rep, args.outdir, figures=False)
        print(f"pipeline failed at stage {stage}: {e}", file=sys.stderr)
        return 1


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "convert": cmd_convert,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "count-ops": cmd_count_ops,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
