"""Experiment configuration, training loops, metric emission, and sweeps.

A single JSON config drives every experiment kind. Each run writes one
JSON line per epoch per seed to metrics.jsonl (deterministic fields only,
so identical configs reproduce the file bitwise) and a summary.csv of
per-group mean/std across seeds. Wall-clock timings are reported in the
summary, never in the metrics stream.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import data as dat
from . import network as nw
from . import pipeline as pl
from .losses import LossConfig
from .tensor import RngState, column_mean_std, row_l2_normalize

KINDS = ("train", "gradprofile", "noise-sweep", "alpha-sweep", "ablation",
         "pipeline-sim", "speedup")

# Table-style ablation order: each entry toggles (variance, invariance,
# covariance).
ABLATION_SUBSETS = (
    ("V", (True, False, False)),
    ("I", (False, True, False)),
    ("C", (False, False, True)),
    ("V+I", (True, True, False)),
    ("V+C", (True, False, True)),
    ("I+C", (False, True, True)),
    ("V+I+C", (True, True, True)),
)

DEFAULT_ALPHA_GRID = (1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
DEFAULT_THETA_GRID = (0.0, 0.2, 0.4, 0.6)
DEFAULT_DEPTH_GRID = (4, 8, 12)


class ConfigError(ValueError):
    """The experiment config is malformed."""


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0

    @staticmethod
    def from_dict(doc: dict) -> "OptimizerConfig":
        _check_keys(doc, {"lr", "momentum", "weight_decay"}, "optimizer")
        return OptimizerConfig(**doc)


@dataclass(frozen=True)
class DataConfig:
    kind: str = "spirals"
    seed: int = 7
    arms: int = 3
    per_arm: int = 1000
    noise_std: float = 0.1
    classes: int = 3
    per_class: int = 300
    dim: int = 2
    separation: float = 6.0
    path: str = ""
    label_column: str = "label"
    has_header: bool = True

    @staticmethod
    def from_dict(doc: dict) -> "DataConfig":
        _check_keys(doc, {"kind", "seed", "arms", "per_arm", "noise_std", "classes",
                          "per_class", "dim", "separation", "path", "label_column",
                          "has_header"}, "data")
        cfg = DataConfig(**doc)
        if cfg.kind not in ("spirals", "blobs", "csv"):
            raise ConfigError(f"data.kind must be spirals, blobs, or csv, got {cfg.kind!r}")
        return cfg


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    width: int = 64
    activation: str = "tanh"
    batchnorm: bool = False
    projector: str = "identity"
    projector_hidden: int = 32
    embedding_dim: int = 8
    classifier_activation: str = "tanh"

    @staticmethod
    def from_dict(doc: dict) -> "NetworkConfig":
        _check_keys(doc, {"depth", "width", "activation", "batchnorm", "projector",
                          "projector_hidden", "embedding_dim", "classifier_activation"},
                    "network")
        return NetworkConfig(**doc)


def _loss_from_dict(doc: dict) -> LossConfig:
    _check_keys(doc, {"gamma", "eps_norm", "alpha", "variance_divisor",
                      "invariance_divisor", "center_before_sim"}, "loss")
    return LossConfig(**doc)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "train"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mode: str = "deinforeg"
    epochs: int = 100
    batch_size: int = 128
    workers: int = 1
    standardize: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    loss_terms: tuple[bool, bool, bool] = (True, True, True)
    theta_grid: tuple[float, ...] = DEFAULT_THETA_GRID
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    depth_grid: tuple[int, ...] = DEFAULT_DEPTH_GRID
    stage_costs: Optional[pl.StageCost] = None
    sim_devices: int = 4
    sim_batches: int = 1
    pad_ms: float = 10.0
    worker_grid: tuple[int, ...] = (1, 4)
    queue_capacity: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.mode not in nw.MODES:
            raise ConfigError(f"mode must be one of {nw.MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs must be >= 0, batch_size and workers >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(t < 0 or t > 1 for t in self.theta_grid):
            raise ConfigError("theta grid values must lie in [0, 1]")
        if any(a < 0 for a in self.alpha_grid):
            raise ConfigError("alpha grid values must be >= 0")
        if any(d < 1 for d in self.depth_grid):
            raise ConfigError("depth grid values must be >= 1")

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        _check_keys(doc, {"kind", "seeds", "mode", "epochs", "batch_size", "workers",
                          "standardize", "optimizer", "data", "network", "loss",
                          "loss_terms", "theta_grid", "alpha_grid", "depth_grid",
                          "stage_costs", "sim_devices", "sim_batches", "pad_ms",
                          "worker_grid", "queue_capacity"}, "config")
        kwargs: dict = {}
        for key, value in doc.items():
            if key == "optimizer":
                kwargs[key] = OptimizerConfig.from_dict(value)
            elif key == "data":
                kwargs[key] = DataConfig.from_dict(value)
            elif key == "network":
                kwargs[key] = NetworkConfig.from_dict(value)
            elif key == "loss":
                kwargs[key] = _loss_from_dict(value)
            elif key == "stage_costs":
                _check_keys(value, {"forward", "loss", "backward", "update", "transfer"},
                            "stage_costs")
                kwargs[key] = pl.StageCost(
                    tuple(value["forward"]), tuple(value["loss"]),
                    tuple(value["backward"]), tuple(value["update"]),
                    float(value.get("transfer", 0.0)))
            elif key in ("seeds", "theta_grid", "alpha_grid", "depth_grid", "worker_grid",
                         "loss_terms"):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return ExperimentConfig(**kwargs)

    @staticmethod
    def load(path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return ExperimentConfig.from_dict(json.load(f))


def make_dataset(cfg: DataConfig) -> dat.Dataset:
    rng = RngState(cfg.seed, "dataset")
    if cfg.kind == "spirals":
        return dat.gen_spirals(cfg.arms, cfg.per_arm, cfg.noise_std, rng)
    if cfg.kind == "blobs":
        return dat.gen_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.separation, rng)
    return dat.load_csv(cfg.path, cfg.label_column, cfg.has_header, rng)


def make_network_spec(cfg: ExperimentConfig, mode: Optional[str] = None,
                      depth: Optional[int] = None, loss: Optional[LossConfig] = None,
                      input_width: int = 2, class_count: int = 3) -> nw.NetworkSpec:
    n = cfg.network
    return nw.uniform_spec(
        depth=depth if depth is not None else n.depth,
        input_width=input_width, class_count=class_count, width=n.width,
        activation=n.activation, batchnorm=n.batchnorm, projector=n.projector,
        projector_hidden=n.projector_hidden, embedding_dim=n.embedding_dim,
        classifier_activation=n.classifier_activation,
        loss=loss if loss is not None else cfg.loss,
        mode=mode if mode is not None else cfg.mode)


class MetricsWriter:
    """Append-only JSONL stream of per-epoch records."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.records: list[dict] = []
        if path:
            # truncate: a fresh run of the same config must reproduce the file
            with open(path, "w", encoding="utf-8"):
                pass

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _eval_record(net: nw.Network, ds: dat.Dataset, full: bool) -> dict:
    """Test accuracy every epoch; the other splits and the embedding-spread
    statistic only where the summary reads them (first and final epoch)."""
    out = {"test_acc": nw.accuracy(net, ds.split_features("test"), ds.split_labels("test"))}
    if full:
        for split in ("train", "val"):
            out[f"{split}_acc"] = nw.accuracy(net, ds.split_features(split),
                                              ds.split_labels(split))
        emb = nw.module_embeddings(net, ds.split_features("train"))
        _, stds = column_mean_std(row_l2_normalize(emb, 1e-8))
        out["embedding_min_std"] = float(stds.a.min())
    return out


def train_run(run_id: str, seed: int, ds: dat.Dataset, spec: nw.NetworkSpec,
              cfg: ExperimentConfig, writer: MetricsWriter,
              extra: Optional[dict] = None,
              loss_terms: tuple[bool, bool, bool] = (True, True, True)) -> list[dict]:
    """Train one network and emit one metrics record per epoch.

    Epoch 0 is the initial evaluation before any update; epochs 1..E follow
    each pass over the training split.
    """
    rng = RngState(seed)
    net = nw.build(spec, rng.derive("init"))
    opt = cfg.optimizer
    net.configure_optimizers(opt.lr, opt.momentum, opt.weight_decay)
    depth = net.depth
    extra = dict(extra or {})
    records = []

    def emit(epoch: int, losses, grads, full: bool) -> dict:
        rec = {"run_id": run_id, "seed": seed, "epoch": epoch,
               "module_losses": losses, "encoder_grad_magnitude": grads}
        rec.update(_eval_record(net, ds, full))
        rec.update(extra)
        writer.emit(rec)
        records.append(rec)
        return rec

    emit(0, [[0.0] * 6 for _ in range(depth)], [0.0] * depth, full=True)
    for epoch in range(1, cfg.epochs + 1):
        erng = rng.derive("shuffle", epoch)
        loss_sums = np.zeros((depth, 6))
        grad_sums = np.zeros(depth)
        n_steps = 0
        for x, y in dat.batches(ds, "train", cfg.batch_size, True, erng):
            if net.mode == "deinforeg":
                report = nw.train_step_deinforeg(net, x, y, loss_terms)
            else:
                report = nw.train_step_bp(net, x, y)
            for l, b in enumerate(report.per_module):
                loss_sums[l] += (b.variance, b.invariance, b.covariance,
                                 b.local_total, b.cross_entropy, b.module_total)
            grad_sums += report.encoder_grad_magnitude
            n_steps += 1
        emit(epoch, (loss_sums / n_steps).tolist(), (grad_sums / n_steps).tolist(),
             full=(epoch == cfg.epochs))
    return records


# ---------------------------------------------------------------------------
# summaries


@dataclass
class Summary:
    """Per-group metric aggregates across seeds."""

    rows: list[tuple[str, str, float, float, int]] = field(default_factory=list)

    def add(self, group: str, metric: str, values: list[float]) -> None:
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        self.rows.append((group, metric, float(arr.mean()), std, len(arr)))

    def value(self, group: str, metric: str) -> float:
        for g, m, mean, _, _ in self.rows:
            if g == group and m == metric:
                return mean
        raise KeyError(f"no summary row for group={group!r} metric={metric!r}")

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("group,metric,mean,std,n\n")
            for g, m, mean, std, n in self.rows:
                f.write(f"{g},{m},{mean!r},{std!r},{n}\n")


def run_scalars(records: list[dict]) -> dict[str, float]:
    """Scalar outcomes of one run, all recomputable from its JSONL lines."""
    trained = [r for r in records if r["epoch"] >= 1] or records
    last = records[-1]
    out = {
        "final_train_acc": last["train_acc"],
        "final_val_acc": last["val_acc"],
        "final_test_acc": last["test_acc"],
        "best_test_acc": max(r["test_acc"] for r in records),
        "embedding_min_std": last["embedding_min_std"],
        "grad_first_module": float(np.mean([r["encoder_grad_magnitude"][0] for r in trained])),
        "grad_last_module": float(np.mean([r["encoder_grad_magnitude"][-1] for r in trained])),
    }
    return out


def _summarize_groups(per_group: dict[str, list[dict[str, float]]]) -> Summary:
    summary = Summary()
    for group, runs in per_group.items():
        for metric in runs[0]:
            summary.add(group, metric, [r[metric] for r in runs])
    return summary


# ---------------------------------------------------------------------------
# experiment kinds


def _dataset_for(cfg: ExperimentConfig) -> dat.Dataset:
    ds = make_dataset(cfg.data)
    return dat.standardize(ds) if cfg.standardize else ds


def _grouped_training(cfg: ExperimentConfig, writer: MetricsWriter,
                      variants: list[tuple[str, dict, Callable[[], tuple]]]) -> Summary:
    """Run every (group, extra, builder) variant over all seeds.

    builder returns (dataset, spec, loss_terms) so each variant can change
    any of the three.
    """
    per_group: dict[str, list[dict[str, float]]] = {}
    for group, extra, builder in variants:
        ds, spec, terms = builder()
        for seed in cfg.seeds:
            run_id = f"{cfg.kind}/{group}/seed{seed}"
            records = train_run(run_id, seed, ds, spec, cfg, writer,
                                extra={"group": group, **extra}, loss_terms=terms)
            per_group.setdefault(group, []).append(run_scalars(records))
    return _summarize_groups(per_group)


def experiment_train(cfg: ExperimentConfig, writer: MetricsWriter) -> Summary:
    ds = _dataset_for(cfg)
    spec = make_network_spec(cfg, input_width=ds.dim, class_count=ds.class_count)
    group = f"mode={cfg.mode}"
    return _grouped_training(cfg, writer, [
        (group, {"mode": cfg.mode}, lambda: (ds, spec, cfg.loss_terms))])


def experiment_depth_sweep(cfg: ExperimentConfig, writer: MetricsWriter) -> Summary:
    """Accuracy and encoder-gradient magnitudes for both modes at each depth."""
    ds = _dataset_for(cfg)
    variants = []
    for depth in cfg.depth_grid:
        for mode in ("bp", "deinforeg"):
            spec = make_network_spec(cfg, mode=mode, depth=depth,
                                     input_width=ds.dim, class_count=ds.class_count)
            group = f"mode={mode},L={depth}"
            variants.append((group, {"mode": mode, "depth": depth},
                             lambda ds=ds, spec=spec: (ds, spec, (True, True, True))))
    return _grouped_training(cfg, writer, variants)


def experiment_noise_sweep(cfg: ExperimentConfig, writer: MetricsWriter) -> Summary:
    """Clean-test accuracy for both modes at each training-label noise ratio."""
    base = _dataset_for(cfg)
    variants = []
    for theta in cfg.theta_grid:
        noisy, _ = dat.inject_label_noise(base, dat.NoiseSpec(theta, cfg.data.seed))
        for mode in ("bp", "deinforeg"):
            spec = make_network_spec(cfg, mode=mode, input_width=base.dim,
                                     class_count=base.class_count)
            group = f"mode={mode},theta={theta}"
            variants.append((group, {"mode": mode, "theta": theta},
                             lambda noisy=noisy, spec=spec: (noisy, spec, (True, True, True))))
    return _grouped_training(cfg, writer, variants)


def experiment_alpha_sweep(cfg: ExperimentConfig, writer: MetricsWriter) -> Summary:
    """Best test accuracy of the decoupled mode at each cross-entropy weight."""
    ds = _dataset_for(cfg)
    variants = []
    for alpha in cfg.alpha_grid:
        loss = cfg.loss.with_alpha(alpha)
        spec = make_network_spec(cfg, mode="deinforeg", loss=loss,
                                 input_width=ds.dim, class_count=ds.class_count)
        group = f"alpha={alpha:g}"
        variants.append((group, {"alpha": alpha},
                         lambda ds=ds, spec=spec: (ds, spec, (True, True, True))))
    return _grouped_training(cfg, writer, variants)


def experiment_ablation(cfg: ExperimentConfig, writer: MetricsWriter) -> Summary:
    """Test accuracy for each of the seven local-loss term subsets."""
    ds = _dataset_for(cfg)
    spec = make_network_spec(cfg, mode="deinforeg", input_width=ds.dim,
                             class_count=ds.class_count)
    variants = []
    for name, terms in ABLATION_SUBSETS:
        group = f"terms={name}"
        variants.append((group, {"terms": name},
                         lambda terms=terms: (ds, spec, terms)))
    return _grouped_training(cfg, writer, variants)


def experiment_pipeline_sim(cfg: ExperimentConfig, writer: MetricsWriter,
                            out_dir: Optional[str] = None) -> Summary:
    """Makespans of all three schedules plus a trace of the decoupled one."""
    costs = cfg.stage_costs or pl.FIGURE_STAGE_COSTS
    summary = Summary()
    for mode in pl.SIM_MODES:
        makespan, events = pl.simulate(mode, costs, cfg.sim_devices, cfg.sim_batches)
        summary.add(f"sim={mode}", "makespan", [makespan])
        if mode == "deinforeg" and out_dir:
            pl.emit_gantt(events, os.path.join(out_dir, "gantt.csv"))
    return summary


def experiment_speedup(cfg: ExperimentConfig, writer: MetricsWriter) -> Summary:
    """Pipelined wall-clock per epoch at each worker count, with synthetic
    per-module compute padding; speedups are relative to 1 worker."""
    ds = _dataset_for(cfg)
    spec = make_network_spec(cfg, mode="deinforeg", input_width=ds.dim,
                             class_count=ds.class_count)
    seed = cfg.seeds[0]
    batch_lists = []
    rng = RngState(seed)
    for epoch in range(1, cfg.epochs + 1):
        erng = rng.derive("shuffle", epoch)
        batch_lists.append(list(dat.batches(ds, "train", cfg.batch_size, True, erng)))
    summary = Summary()
    times = {}
    for workers in cfg.worker_grid:
        net = nw.build(spec, RngState(seed).derive("init"))
        opt = cfg.optimizer
        net.configure_optimizers(opt.lr, opt.momentum, opt.weight_decay)
        stats = pl.run_pipelined(net, batch_lists, workers, cfg.queue_capacity,
                                 pad_seconds=cfg.pad_ms / 1000.0)
        mean_epoch = stats.total_seconds / max(1, len(stats.epoch_seconds))
        times[workers] = mean_epoch
        summary.add(f"workers={workers}", "epoch_seconds", [mean_epoch])
    base = times.get(1)
    if base:
        for workers, t in times.items():
            summary.add(f"workers={workers}", "speedup_vs_1worker", [base / t])
    return summary


_RUNNERS = {
    "train": experiment_train,
    "gradprofile": experiment_depth_sweep,
    "noise-sweep": experiment_noise_sweep,
    "alpha-sweep": experiment_alpha_sweep,
    "ablation": experiment_ablation,
}


def run(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> Summary:
    """Execute one experiment; writes metrics.jsonl and summary.csv when an
    output directory is given and returns the summary."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    writer = MetricsWriter(metrics_path)
    started = time.perf_counter()
    if cfg.kind == "pipeline-sim":
        summary = experiment_pipeline_sim(cfg, writer, out_dir)
    elif cfg.kind == "speedup":
        summary = experiment_speedup(cfg, writer)
    else:
        summary = _RUNNERS[cfg.kind](cfg, writer)
    summary.add("run", "wall_clock_seconds", [time.perf_counter() - started])
    if out_dir:
        summary.write_csv(os.path.join(out_dir, "summary.csv"))
    return summary
