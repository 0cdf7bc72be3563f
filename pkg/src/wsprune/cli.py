"""Command-line entry point: ``wsprune {train,ws,prune,knee,sweep,analyze}``.

Errors exit with status 1 (2 for usage errors) and print one JSON line,
``{"error": <code>, "message": ...}``, on standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import Curve2D, kneedle, prune_knee
from .archzoo import ArchSpec, count_parameters
from .harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .harness.experiment import (AugmentSpec, ConfigError, DatasetSpec, ExperimentConfig, analyze_rows,
                                 read_scatter_csv, run_experiment, train_sparse)
from .nncore import TrainingConfig, evaluate, one_hot
from .pruner import PruneStrategy, PruningCurve, iterative_prune
from .sparsity import collect_gammas, sparsity_report

log = logging.getLogger("wsprune")


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _dataset_from_args(args):
    return DatasetSpec(num_classes=args.classes, samples_per_class=args.samples_per_class, frames=args.frames,
                       noise_level=args.noise, seed=args.data_seed, path=args.features)


def _add_data_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--features", help=".npz feature file (default: synthetic data)")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--samples-per-class", type=int, default=200)
    g.add_argument("--frames", type=int, default=128)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--data-seed", type=int, default=0)


def cmd_train(args):
    if args.arch == "mobilenet":
        spec = ArchSpec("mobilenet", None, args.width if args.width is not None else 1.0, args.classes,
                        input_shape=(1, 40, args.frames), base_channels=args.base)
    else:
        if args.width is not None:
            raise CLIError("usage", f"{args.arch} takes --depth, not --width")
        spec = ArchSpec(args.arch, args.depth or {"vgg": 16, "resnet": 20}[args.arch], None, args.classes,
                        input_shape=(1, 40, args.frames), base_channels=args.base)
    config = ExperimentConfig(arch=spec, lambda_grid=[args.lam], seed=args.seed,
                              training=TrainingConfig(learning_rate=args.lr, epochs=args.epochs,
                                                      batch_size=args.batch_size),
                              dataset=_dataset_from_args(args),
                              augment=AugmentSpec(args.mixup, args.freq_mask, min(args.time_mask, args.frames)))
    config.validate()
    dataset = config.dataset.load(config.split[0])
    result = train_sparse(config, dataset, args.lam, args.seed)
    meta = {"lambda": args.lam, "epochs": args.epochs, "seed": args.seed,
            "final_accuracy": result.final_accuracy, "best_accuracy": result.best_accuracy}
    path = save_checkpoint(result.net, meta, args.out)
    if args.best_out:
        save_checkpoint(result.best_net, meta, args.best_out)
    _emit({"checkpoint": str(path), "ws": result.report.ws, **meta})


def cmd_ws(args):
    net = load_checkpoint(args.ckpt)
    report = sparsity_report(collect_gammas(net), args.bins, args.zero_threshold)
    _emit(report.to_dict())


def cmd_prune(args):
    net, meta = load_checkpoint(args.ckpt, with_metadata=True)
    frames = net.input_shape[-1]
    args.frames = frames
    dataset = _dataset_from_args(args).load(0.7)
    if dataset.feature_shape != tuple(net.input_shape):
        raise CLIError("shape_mismatch", f"dataset features {dataset.feature_shape} do not fit the network "
                                         f"input {tuple(net.input_shape)}")
    seed = int(meta.get("seed", 0))
    cfg = TrainingConfig(learning_rate=args.lr, batch_size=args.batch_size, seed=seed)
    curve = iterative_prune(net, args.step, args.finetune_epochs,
                            lambda n: evaluate(n, dataset.x_val, dataset.y_val),
                            PruneStrategy(args.strategy), train_data=(dataset.x_train,
                                                                      one_hot(dataset.y_train, dataset.num_classes)),
                            config=cfg, augment=AugmentSpec(args.mixup, args.freq_mask,
                                                            min(args.time_mask, frames)).build(),
                            seed=seed, keep_nets=args.save_pruned is not None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out)
    if args.save_pruned is not None:
        pk = prune_knee(curve, args.psi)
        i = int(next(k for k, p in enumerate(curve.points) if p.param_prune_fraction == pk.pk))
        save_checkpoint(curve.nets[i], {**meta, "pk": pk.pk}, args.save_pruned)
    _emit({"curve": str(out), "steps": len(curve.points) - 1, "complete": curve.complete,
           "params": count_parameters(net)})


def cmd_knee(args):
    curve = PruningCurve.from_csv(args.curve)
    if args.raw:
        x = curve.column("param_prune_fraction")
        y = curve.column("accuracy")
        result = kneedle(Curve2D(x, y, "decreasing", "concave"), args.psi, strict_threshold=args.strict)
        _emit(result.to_dict())
        return
    pk = prune_knee(curve, args.psi, strict_threshold=args.strict)
    _emit({"pk": pk.pk, "knee_found": pk.knee_found, "accuracy_at_pk": pk.accuracy_at_pk,
           "accuracy_loss_at_pk": pk.accuracy_loss_at_pk, "psi": args.psi})


def cmd_sweep(args):
    config = ExperimentConfig.from_json(args.config)
    out = args.out or Path(args.config).with_suffix("")
    manifest = run_experiment(config, out)
    _emit({"out": str(out), "status": manifest["status"], "analysis": manifest["analysis"]})


def cmd_analyze(args):
    root = Path(args.results_dir)
    scatter = root / "ws_pk.csv"
    if not scatter.exists():
        raise CLIError("missing_results", f"{scatter} not found")
    rows = read_scatter_csv(scatter)
    _emit(analyze_rows(rows))


def build_parser():
    parser = argparse.ArgumentParser(prog="wsprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one sparse network and save a checkpoint")
    p.add_argument("--arch", choices=("vgg", "resnet", "mobilenet"), required=True)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--width", type=float, default=None, help="mobilenet width multiplier")
    p.add_argument("--base", type=int, default=16, help="base channel count")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mixup", type=float, default=0.4)
    p.add_argument("--freq-mask", type=int, default=4)
    p.add_argument("--time-mask", type=int, default=40)
    p.add_argument("--out", required=True)
    p.add_argument("--best-out", help="also save the best-validation checkpoint here")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ws", help="weight skewness report of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--zero-threshold", type=float, default=1e-3)
    p.set_defaults(func=cmd_ws)

    p = sub.add_parser("prune", help="iterative channel pruning with fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--strategy", choices=("global_gamma", "layer_quota"), default="global_gamma")
    p.add_argument("--lr", type=float, default=1e-3, help="training rate; fine-tuning uses a tenth of it")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--mixup", type=float, default=0.4)
    p.add_argument("--freq-mask", type=int, default=4)
    p.add_argument("--time-mask", type=int, default=40)
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--save-pruned", help="save the network at the prune knee here")
    p.add_argument("--out", required=True, help="curve CSV path")
    _add_data_args(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("knee", help="prune knee of a curve CSV")
    p.add_argument("--curve", required=True)
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--strict", action="store_true", help="use the literal threshold formula")
    p.add_argument("--raw", action="store_true", help="print the full kneedle result")
    p.set_defaults(func=cmd_knee)

    p = sub.add_parser("sweep", help="run a lambda sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config path without suffix)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="regression and correlation over a sweep's ws_pk.csv")
    p.add_argument("--results-dir", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def _error_code(err):
    if isinstance(err, CLIError):
        return err.code
    code = getattr(err, "code", None)
    if isinstance(code, str):
        return code
    if isinstance(err, FileNotFoundError):
        return "file_not_found"
    if isinstance(err, json.JSONDecodeError):
        return "invalid_json"
    if isinstance(err, ValueError):
        return "invalid_input"
    return "internal_error"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print(json.dumps({"error": "usage", "message": "invalid arguments"}), file=sys.stderr)
        return exc.code if isinstance(exc.code, int) else 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, CheckpointError, ConfigError, OSError, ValueError, RuntimeError) as err:
        print(json.dumps({"error": _error_code(err), "message": str(err)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
