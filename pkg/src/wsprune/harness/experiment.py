"""Sparse-training lambda sweeps: train, prune, find the knee, correlate.

Every run in a sweep owns its RNG stream, seeded as ``seed ^ run_index``;
network initialisation uses the sweep seed so that runs differ only in
lambda. All artifacts land in one directory with a hashed manifest.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..analysis import DegenerateInputError, correlate, prune_knee
from ..archzoo import ArchSpec, build_network, count_parameters
from ..nncore import DivergenceError, TrainingConfig, evaluate, fit, one_hot
from ..pruner import PruneStrategy, iterative_prune
from ..sparsity import DegenerateDistributionError, collect_gammas, sparsity_report, write_snapshot_csv
from .augment import make_augmenter
from .checkpoint import save_checkpoint
from .data import load_feature_file, synth_dataset

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2)


class ConfigError(ValueError):
    code = "config_error"


@dataclass
class DatasetSpec:
    """Synthetic dataset parameters, or a ``.npz`` feature file when ``path`` is set."""

    num_classes: int = 10
    samples_per_class: int = 200
    frames: int = 128
    noise_level: float = 0.1
    seed: int = 0
    path: str | None = None

    def load(self, train_fraction):
        if self.path:
            return load_feature_file(self.path, train_fraction, self.seed)
        return synth_dataset(self.num_classes, self.samples_per_class, self.frames, self.noise_level,
                             self.seed, train_fraction)


@dataclass
class AugmentSpec:
    mixup_alpha: float = 0.4
    freq_mask: int = 4
    time_mask: int = 40

    def build(self):
        if not (self.mixup_alpha or self.freq_mask or self.time_mask):
            return None
        return make_augmenter(self.mixup_alpha, self.freq_mask, self.time_mask)


@dataclass
class ExperimentConfig:
    arch: ArchSpec = field(default_factory=lambda: ArchSpec("vgg", 16))
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    prune_step: float = 0.05
    finetune_epochs: int = 5
    psi: float = 1.0
    strategy: str = "global_gamma"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: tuple = (0.7, 0.3)
    seed: int = 0
    max_accuracy_drop: float = 0.03
    truncate_on_drop: bool = True
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    network: str = ""
    variant: str = ""
    method: str = "slimming"

    def validate(self):
        grid = [float(v) for v in self.lambda_grid]
        if not grid:
            raise ConfigError("lambda_grid must not be empty")
        if any(v < 0 for v in grid):
            raise ConfigError("lambda values must be nonnegative")
        if grid != sorted(grid):
            raise ConfigError("lambda_grid must be sorted ascending")
        if len(self.split) != 2 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {self.split}")
        if not 0 < self.prune_step < 1:
            raise ConfigError("prune_step must lie in (0, 1)")
        if self.finetune_epochs < 0 or self.psi <= 0:
            raise ConfigError("finetune_epochs must be >= 0 and psi > 0")
        if not 0 <= self.max_accuracy_drop <= 1:
            raise ConfigError("max_accuracy_drop must lie in [0, 1]")
        PruneStrategy(self.strategy)
        self.arch.validate()
        if not self.dataset.path:
            if self.arch.num_classes != self.dataset.num_classes:
                raise ConfigError(f"arch has {self.arch.num_classes} classes, dataset {self.dataset.num_classes}")
            if self.arch.input_shape != (1, 40, self.dataset.frames):
                raise ConfigError(f"arch input {self.arch.input_shape} does not match (1, 40, {self.dataset.frames})")
        return self

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["arch"] = self.arch.to_dict()
        out["training"] = asdict(self.training)
        out["dataset"] = asdict(self.dataset)
        out["augment"] = asdict(self.augment)
        out["lambda_grid"] = [float(v) for v in self.lambda_grid]
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "arch" in data:
                data["arch"] = ArchSpec.from_dict(data["arch"])
            if "training" in data:
                data["training"] = TrainingConfig(**data["training"])
            if "dataset" in data:
                data["dataset"] = DatasetSpec(**data["dataset"])
            if "augment" in data:
                data["augment"] = AugmentSpec(**data["augment"])
            if "split" in data:
                data["split"] = tuple(data["split"])
            return cls(**data).validate()
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from None

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @property
    def label(self):
        return self.network or f"{self.arch.family}-{self.arch.depth}"


@dataclass
class TrainResult:
    net: object
    best_net: object
    best_accuracy: float
    final_accuracy: float
    report: object
    losses: list
    flagged: bool = False


def train_sparse(config, dataset, lam, run_seed, baseline_accuracy=None):
    """Train one network with penalty ``lam``; WS is measured on the final weights.

    The run is flagged when its final accuracy trails ``baseline_accuracy``
    by more than ``config.max_accuracy_drop``.
    """
    cfg = TrainingConfig(**{**asdict(config.training), "lam": float(lam), "seed": run_seed})
    net = build_network(config.arch, seed=config.seed)
    rng = np.random.default_rng(run_seed)
    targets = one_hot(dataset.y_train, dataset.num_classes)
    best = {"acc": -1.0, "net": None}

    def track(epoch, loss):
        acc = evaluate(net, dataset.x_val, dataset.y_val)
        log.debug("lambda %g epoch %d: loss %.4f val %.4f", lam, epoch, loss, acc)
        if acc > best["acc"]:
            best["acc"], best["net"] = acc, net.clone()

    losses = fit(net, dataset.x_train, targets, cfg, rng=rng, augment=config.augment.build(), on_epoch=track)
    final = evaluate(net, dataset.x_val, dataset.y_val)
    if best["net"] is None:  # zero epochs
        best["acc"], best["net"] = final, net.clone()
    report = sparsity_report(collect_gammas(net))
    flagged = baseline_accuracy is not None and baseline_accuracy - final > config.max_accuracy_drop
    return TrainResult(net, best["net"], best["acc"], final, report, losses, flagged)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _run_dir_name(index, lam):
    return f"run{index:02d}_lambda{lam:g}"


def run_experiment(config, out_dir):
    """Sweep ``config.lambda_grid``; returns the manifest dict (also written to ``manifest.json``).

    Layout::

        config.json  ws_pk.csv  summary.txt  correlation.json  manifest.json
        runs/runNN_lambdaX/{final,best}.{json,bin} gammas.csv curve.csv knee.json sparsity.json
    """
    config.validate()
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    dataset = config.dataset.load(config.split[0])
    strategy = PruneStrategy(config.strategy)
    targets = one_hot(dataset.y_train, dataset.num_classes)
    stages, rows, baseline = [], [], None
    truncated_at = None

    for index, lam in enumerate(config.lambda_grid):
        lam = float(lam)
        run_seed = config.seed ^ index
        run_dir = out / "runs" / _run_dir_name(index, lam)
        run_dir.mkdir(parents=True, exist_ok=True)
        status = {"index": index, "lambda": lam, "seed": run_seed, "dir": str(run_dir.relative_to(out))}
        stages.append(status)
        if truncated_at is not None:
            status.update(train="skipped", prune="skipped", knee="skipped",
                          reason=f"grid truncated at lambda {truncated_at:g}")
            continue
        started = time.perf_counter()
        try:
            tr = train_sparse(config, dataset, lam, run_seed, baseline)
        except (DivergenceError, FloatingPointError, DegenerateDistributionError) as err:
            status.update(train="failed", error=f"{type(err).__name__}: {err}")
            log.error("lambda %g: training failed: %s", lam, err)
            continue
        if baseline is None:
            baseline = tr.final_accuracy
        meta = {"lambda": lam, "epochs": config.training.epochs, "seed": run_seed,
                "final_accuracy": tr.final_accuracy, "best_accuracy": tr.best_accuracy}
        save_checkpoint(tr.net, meta, run_dir / "final")
        save_checkpoint(tr.best_net, meta, run_dir / "best")
        write_snapshot_csv(collect_gammas(tr.net), run_dir / "gammas.csv")
        _write_json(run_dir / "sparsity.json", tr.report.to_dict())
        status.update(train="ok", final_accuracy=tr.final_accuracy, best_accuracy=tr.best_accuracy,
                      ws=tr.report.ws, flagged=tr.flagged)
        if tr.flagged:
            status["reason"] = f"accuracy drop above {config.max_accuracy_drop:g} versus the first run"
            if config.truncate_on_drop:
                truncated_at = lam
                status.update(prune="skipped", knee="skipped")
                continue

        curve = iterative_prune(tr.net, config.prune_step, config.finetune_epochs,
                                lambda n: evaluate(n, dataset.x_val, dataset.y_val), strategy,
                                train_data=(dataset.x_train, targets),
                                config=TrainingConfig(**{**asdict(config.training), "seed": run_seed}),
                                augment=config.augment.build(), seed=run_seed)
        curve.to_csv(run_dir / "curve.csv")
        status["prune"] = "ok" if curve.complete else "partial"
        if curve.error:
            status["error"] = curve.error
        try:
            pk = prune_knee(curve, config.psi)
        except ValueError as err:
            status.update(knee="failed", error=str(err))
            continue
        knee_record = {"pk": pk.pk, "knee_found": pk.knee_found, "accuracy_at_pk": pk.accuracy_at_pk,
                       "accuracy_loss_at_pk": pk.accuracy_loss_at_pk, "psi": config.psi,
                       "kneedle": pk.knee.to_dict() if pk.knee is not None else None}
        _write_json(run_dir / "knee.json", knee_record)
        status.update(knee="ok", pk=pk.pk, knee_found=pk.knee_found,
                      accuracy_loss_at_pk=pk.accuracy_loss_at_pk)
        log.debug("lambda %g finished in %.1fs", lam, time.perf_counter() - started)
        rows.append({"network": config.label, "variant": config.variant, "method": config.method,
                     "lambda": lam, "ws": tr.report.ws, "pk": pk.pk,
                     "accuracy": tr.final_accuracy, "accuracy_loss_at_pk": pk.accuracy_loss_at_pk,
                     "params": count_parameters(tr.net)})
        log.info("lambda %g: acc %.4f ws %.4f pk %.4f", lam, tr.final_accuracy, tr.report.ws, pk.pk)

    write_scatter_csv(rows, out / "ws_pk.csv")
    (out / "summary.txt").write_text(summary_table(rows))
    analysis = analyze_rows(rows)
    _write_json(out / "correlation.json", analysis)
    return _write_manifest(out, config, stages, analysis)


def write_scatter_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["network", "variant", "method", "lambda", "ws", "pk"])
        for r in rows:
            writer.writerow([r["network"], r["variant"], r["method"], f"{r['lambda']:g}",
                             f"{r['ws']:.6f}", f"{r['pk']:.6f}"])


def read_scatter_csv(path):
    with open(path, newline="") as fh:
        return [{"network": r["network"], "variant": r["variant"], "method": r["method"],
                 "lambda": float(r["lambda"]), "ws": float(r["ws"]), "pk": float(r["pk"])}
                for r in csv.DictReader(fh)]


def summary_table(rows):
    """Plain-text table: network, lambda, accuracy, WS, PK, loss at PK."""
    lines = [f"{'network':<14}{'lambda':>10}{'acc':>8}{'WS':>9}{'PK':>8}{'loss@PK':>9}"]
    for r in rows:
        acc = r.get("accuracy")
        loss = r.get("accuracy_loss_at_pk")
        lines.append(f"{r['network']:<14}{r['lambda']:>10g}"
                     f"{acc if acc is not None else float('nan'):>8.4f}{r['ws']:>9.3f}{r['pk']:>8.3f}"
                     f"{loss if loss is not None else float('nan'):>9.4f}")
    return "\n".join(lines) + "\n"


def analyze_rows(rows):
    """Correlation record for completed (WS, PK) pairs, or a skip reason."""
    if len(rows) < 2:
        return {"status": "skipped", "reason": f"need at least 2 completed runs, have {len(rows)}", "n": len(rows)}
    ws = [r["ws"] for r in rows]
    pk = [r["pk"] for r in rows]
    try:
        report = correlate(ws, pk)
    except DegenerateInputError as err:
        return {"status": "skipped", "reason": str(err), "n": len(rows)}
    return {"status": "ok", **report.to_dict()}


def _write_manifest(out, config, stages, analysis):
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    failed = [s for s in stages if s.get("train") == "failed" or s.get("knee") == "failed"]
    manifest = {
        "status": "partial" if failed or analysis["status"] != "ok" else "complete",
        "seed": config.seed,
        "runs": stages,
        "analysis": analysis["status"],
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest
