"""Experiment protocols shared by the CLI and the acceptance suite.

Every protocol takes an :class:`ExperimentConfig`, is deterministic given its
seed in single-thread mode (timing columns aside) and writes CSV files that
start with a ``# config_sha256=...`` comment line followed by a header row.
"""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, IO, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, ensure_writable_dir
from .data import (
    Dataset,
    Partition,
    dirichlet_partition,
    iid_partition,
    load_cifar10_binary,
    stratified_subset,
    synthetic_dataset,
    write_heatmap_csv,
    write_partition_csv,
)
from .errors import DegenerateInputError
from .federation import REGULARIZERS, SIMILARITY_METRICS, RoundMetrics, Simulation
from .model import Model, build_base_cnn, build_deep_cnn, save_checkpoint
from .similarity import linear_cka
from .tensor import no_grad

logger = logging.getLogger(__name__)


# -- inputs ------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        per_class = cfg.synthetic_train_per_class + cfg.synthetic_test_per_class
        full = synthetic_dataset(cfg.synthetic_classes, per_class, cfg.synthetic_dim,
                                 seed=cfg.seed, noise=cfg.synthetic_noise)
        test_idx = stratified_subset(full.labels, cfg.synthetic_test_per_class * cfg.synthetic_classes,
                                     seed=cfg.seed)
        train_idx = np.setdiff1d(np.arange(len(full)), test_idx)
        return full.subset(train_idx, "synthetic-train"), full.subset(test_idx, "synthetic-test")
    train, test = load_cifar10_binary(cfg.resolved_data_dir())
    # subsets are drawn with a fixed seed so every run seed sees the same data
    if cfg.train_subset and cfg.train_subset < len(train):
        train = train.subset(stratified_subset(train.labels, cfg.train_subset, seed=0))
    if cfg.test_subset and cfg.test_subset < len(test):
        test = test.subset(stratified_subset(test.labels, cfg.test_subset, seed=1))
    return train, test


def make_partition(cfg: ExperimentConfig, train: Dataset) -> Partition:
    if cfg.iid:
        return iid_partition(len(train), cfg.n_clients, cfg.seed, train.labels, train.num_classes)
    return dirichlet_partition(train.labels, cfg.n_clients, cfg.alpha, seed=cfg.seed,
                               min_size=cfg.min_size, num_classes=train.num_classes)


def model_factory(cfg: ExperimentConfig, train: Dataset, depth: Optional[str] = None
                  ) -> Callable[[int], Model]:
    depth = depth or cfg.model
    k, shape = train.num_classes, train.input_shape
    if depth == "deep":
        return lambda seed: build_deep_cnn(k, seed, shape, cfg.deep_extra_layers, cfg.deep_width)
    return lambda seed: build_base_cnn(k, seed, shape)


def _partition_alpha(cfg: ExperimentConfig) -> float:
    return float("inf") if cfg.iid else cfg.alpha


# -- CSV output ----------------------------------------------------------------------


class CsvSink:
    """CSV file with a config-hash comment line; every row is flushed."""

    def __init__(self, path: Path, header: Sequence[str], cfg: ExperimentConfig):
        self.path = Path(path)
        self._fh: IO[str] = open(self.path, "w", newline="")
        self._fh.write(f"# {cfg.csv_comment()}\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(header)
        self._fh.flush()

    def write(self, row: Sequence) -> None:
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence], cfg: ExperimentConfig) -> Path:
    with CsvSink(path, header, cfg) as sink:
        for row in rows:
            sink.write(row)
    return path


def read_csv_rows(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


# -- partition -----------------------------------------------------------------------


def run_partition(cfg: ExperimentConfig) -> Partition:
    out = ensure_writable_dir(cfg.output_dir)
    train, _ = load_data(cfg)
    part = make_partition(cfg, train)
    write_partition_csv(part, out / "partition.csv", cfg.csv_comment())
    write_heatmap_csv(part, out / "heatmap.csv", cfg.csv_comment())
    logger.info("partition sizes: %s", part.sizes().tolist())
    return part


# -- train ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    simulation: Simulation
    metrics: List[RoundMetrics]
    summary: Dict
    train: Dataset
    test: Dataset


def simulate(cfg: ExperimentConfig, train: Dataset, test: Dataset, partition: Partition,
             on_round: Optional[Callable[[RoundMetrics], None]] = None,
             depth: Optional[str] = None) -> Simulation:
    sim = Simulation(cfg.round_config(), partition, train, test, model_factory(cfg, train, depth))
    sim.run(on_round)
    return sim


def run_train(cfg: ExperimentConfig, save_clients: bool = False,
              data: Optional[Tuple[Dataset, Dataset]] = None, write: bool = True) -> TrainResult:
    """Run one federated experiment.

    Writes ``metrics.csv`` (one flushed row per round), ``global.ckpt``,
    ``summary.json`` and ``config.json`` into ``cfg.output_dir``; with
    ``save_clients`` each client's final local model goes to ``clients/``.
    """
    train, test = data if data is not None else load_data(cfg)
    part = make_partition(cfg, train)
    start = time.perf_counter()
    if write:
        out = ensure_writable_dir(cfg.output_dir)
        (out / "config.json").write_text(cfg.to_json())
        with CsvSink(out / "metrics.csv", RoundMetrics.columns(), cfg) as sink:
            sim = simulate(cfg, train, test, part, on_round=lambda m: sink.write(m.row()))
    else:
        sim = simulate(cfg, train, test, part)
    wall_s = time.perf_counter() - start
    accs = [m.test_accuracy for m in sim.history]
    summary = {
        "config_sha256": cfg.sha256(),
        "regularizer": cfg.regularizer,
        "metric": cfg.metric,
        "mu": cfg.mu,
        "M": cfg.m_layers,
        "alpha": _partition_alpha(cfg),
        "seed": cfg.seed,
        "rounds": len(sim.history),
        "final_accuracy": sim.final_accuracy(),
        "best_accuracy": sim.best_accuracy(),
        "best_round": int(np.argmax(accs)) if accs else -1,
        "wall_seconds": wall_s,
        "skipped_clients": [list(x) for x in sim.skipped_clients],
    }
    if write:
        save_checkpoint(sim.global_model, out / "global.ckpt")
        if save_clients:
            (out / "clients").mkdir(exist_ok=True)
            for c in sim.clients:
                if c.prev_local is not None:
                    save_checkpoint(c.prev_local, out / "clients" / f"client_{c.id}.ckpt")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, allow_nan=True) + "\n")
    return TrainResult(sim, sim.history, summary, train, test)


# -- similarity profile --------------------------------------------------------------


def similarity_profile(global_model: Model, local_models: Sequence[Model], dataset: Dataset,
                       batch_size: int = 250, layers: Optional[Sequence[int]] = None) -> np.ndarray:
    """Mean linear CKA between each local model and the global model, per layer.

    Returns an array of shape (layers, clients). The mean runs over
    consecutive test batches; a batch on which a layer has no variance in
    either model is left out of that layer's mean.
    """
    n_taps = global_model.num_taps
    layers = list(layers) if layers is not None else list(range(1, n_taps + 1))
    top = max(layers)
    sums = np.zeros((len(layers), len(local_models)))
    counts = np.zeros_like(sums)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            if len(x) < 2:
                continue
            _, g_taps = global_model.forward(x, top, stop_after_tap=True)
            for j, local in enumerate(local_models):
                _, l_taps = local.forward(x, top, stop_after_tap=True)
                for i, layer in enumerate(layers):
                    try:
                        v = linear_cka(l_taps[layer - 1], g_taps[layer - 1])
                    except DegenerateInputError:
                        continue
                    sums[i, j] += v
                    counts[i, j] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def write_profile_csv(profile: np.ndarray, path: Path, cfg: ExperimentConfig,
                      layer_names: Optional[Sequence[str]] = None) -> Path:
    n_layers, n_clients = profile.shape
    header = ["layer"] + [f"client_{j}" for j in range(n_clients)]
    rows = []
    for i in range(n_layers):
        label = layer_names[i] if layer_names else i + 1
        rows.append([label] + [repr(float(v)) for v in profile[i]])
    return write_rows(path, header, rows, cfg)


def run_profile_experiment(cfg: ExperimentConfig, data: Optional[Tuple[Dataset, Dataset]] = None,
                           write: bool = True) -> Tuple[np.ndarray, TrainResult]:
    """Train, then profile every client's final local model against the global model."""
    result = run_train(cfg, save_clients=write, data=data, write=write)
    sim = result.simulation
    locals_ = [c.prev_local for c in sim.clients if c.prev_local is not None]
    profile = similarity_profile(sim.global_model, locals_, result.test)
    if write:
        write_profile_csv(profile, Path(cfg.output_dir) / "similarity_profile.csv", cfg)
    return profile, result


# -- layer sweep and metric ablation --------------------------------------------------

SWEEP_COLUMNS = ["M", "seed", "final_accuracy", "best_accuracy", "wall_seconds"]
ABLATION_COLUMNS = ["method", "metric", "seed", "final_accuracy", "best_accuracy",
                    "wall_seconds", "mean_round_ms"]


def layer_sweep(cfg: ExperimentConfig, m_values: Sequence[int] = range(1, 8),
                seeds: Optional[Sequence[int]] = None,
                data: Optional[Tuple[Dataset, Dataset]] = None) -> List[Dict]:
    """FedCKA accuracy for each number of regularized layers M (ascending)."""
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    data = data if data is not None else load_data(cfg)
    rows = []
    for seed in seeds:
        for m in sorted(set(m_values)):
            run = cfg.replace(regularizer="cka", m_layers=m, seed=seed)
            res = run_train(run, data=data, write=False)
            rows.append(dict(M=m, seed=seed, final_accuracy=res.summary["final_accuracy"],
                             best_accuracy=res.summary["best_accuracy"],
                             wall_seconds=res.summary["wall_seconds"]))
            logger.info("sweep seed=%d M=%d acc=%.4f", seed, m, rows[-1]["final_accuracy"])
    return rows


def metric_ablation(cfg: ExperimentConfig, metrics: Sequence[str] = SIMILARITY_METRICS,
                    seeds: Optional[Sequence[int]] = None,
                    data: Optional[Tuple[Dataset, Dataset]] = None) -> List[Dict]:
    """A FedAvg baseline row, then one FedCKA row per similarity metric."""
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    data = data if data is not None else load_data(cfg)
    runs = [("fedavg", "none", cfg.metric)] + [("fedcka", "cka", m) for m in metrics]
    rows = []
    for seed in seeds:
        for method, kind, metric in runs:
            run = cfg.replace(regularizer=kind, metric=metric, seed=seed)
            res = run_train(run, data=data, write=False)
            rows.append(dict(
                method=method, metric=metric if kind == "cka" else "-", seed=seed,
                final_accuracy=res.summary["final_accuracy"],
                best_accuracy=res.summary["best_accuracy"],
                wall_seconds=res.summary["wall_seconds"],
                mean_round_ms=float(np.mean(res.simulation.train_ms)),
            ))
    return rows


# -- timing bench ----------------------------------------------------------------------

BENCH_COLUMNS = ["depth", "method", "median_round_ms", "overhead_vs_fedavg", "repetitions"]
BENCH_METHODS = ("none", "prox", "scaffold", "moon", "cka")


@dataclass
class BenchResult:
    rows: List[Dict] = field(default_factory=list)

    def median(self, depth: str, method: str) -> float:
        for r in self.rows:
            if r["depth"] == depth and r["method"] == method:
                return r["median_round_ms"]
        raise KeyError((depth, method))

    def overhead(self, depth: str, method: str) -> float:
        return self.median(depth, method) / self.median(depth, "none")

    def growth(self, method: str, shallow: str = "shallow", deep: str = "deep") -> float:
        """Factor by which a method's overhead over FedAvg grows from shallow to deep."""
        return self.overhead(deep, method) / self.overhead(shallow, method)


def bench(cfg: ExperimentConfig, depths: Sequence[str] = ("shallow", "deep"),
          methods: Sequence[str] = BENCH_METHODS, repetitions: int = 3,
          data: Optional[Tuple[Dataset, Dataset]] = None) -> BenchResult:
    """Median local-training time per round for each method and model depth.

    One warm-up round precedes ``repetitions`` timed rounds; evaluation is
    excluded from the timing.
    """
    if repetitions < 3:
        logger.warning("fewer than 3 timed rounds requested (%d)", repetitions)
    train, test = data if data is not None else load_data(cfg)
    part = make_partition(cfg, train)
    result = BenchResult()
    for depth in depths:
        model_fn = model_factory(cfg, train, "deep" if depth == "deep" else "base")
        for method in methods:
            if method not in REGULARIZERS:
                raise ValueError(f"unknown method {method!r}")
            run = cfg.replace(regularizer=method, rounds=repetitions + 1)
            sim = Simulation(run.round_config(), part, train, test, model_fn)
            sim.run()
            timed = sim.train_ms[1:]
            result.rows.append(dict(depth=depth, method=method,
                                    median_round_ms=statistics.median(timed),
                                    repetitions=len(timed)))
            logger.info("bench %s/%s: %.1f ms", depth, method, result.rows[-1]["median_round_ms"])
    for r in result.rows:
        r["overhead_vs_fedavg"] = result.overhead(r["depth"], r["method"])
    return result
