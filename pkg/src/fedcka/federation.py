"""Federated training rounds with pluggable local regularizers.

Every round the server broadcasts the global model, each client trains a
copy on its own shard for ``local_epochs`` epochs, and the server replaces
the global model by the sample-count-weighted average of the returned
models. The local objective is

    loss = cross_entropy + mu * regularizer

where the regularizer is one of

* ``none``     - plain FedAvg
* ``prox``     - 0.5 * ||w_local - w_global||^2
* ``scaffold`` - no loss term; gradients are corrected with control variates
* ``moon``     - contrastive loss on cosine similarity of projection vectors
* ``cka``      - contrastive loss on layer similarity of the first M layers

The global model and the client's previous-round model are fixed targets:
they are evaluated without recording a tape and never receive gradients.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, Partition, batch_iterator
from .errors import ContractError, DegenerateInputError, DimensionError
from .model import Model, build_base_cnn, naturally_similar_layers
from .ops import softmax_cross_entropy
from .optim import SGD
from .similarity import cosine_vectorized_t, frobenius_sq_distance_t, kernel_cka_t, linear_cka_t
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

REGULARIZERS = ("none", "prox", "scaffold", "moon", "cka")
SIMILARITY_METRICS = ("linear_cka", "kernel_cka", "frobenius", "cosine")

# Per-method mu grids used for tuning.
MU_GRID = {
    "cka": (3.0, 5.0, 10.0),
    "moon": (0.1, 1.0, 5.0, 10.0),
    "prox": (0.001, 0.01, 0.1, 1.0),
}


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    metric: str = "linear_cka"

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ContractError(f"unknown regularizer {self.kind!r}; expected one of {REGULARIZERS}")
        if self.metric not in SIMILARITY_METRICS:
            raise ContractError(f"unknown metric {self.metric!r}; expected one of {SIMILARITY_METRICS}")


@dataclass
class RoundConfig:
    rounds: int = 100
    n_clients: int = 10
    local_epochs: int = 10
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    mu: float = 3.0
    m_layers: int = 2
    batch_size: int = 128
    tau: float = 0.5
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    seed: int = 0
    client_fraction: float = 1.0
    threads: int = 1
    bandwidth_multiplier: float = 1.0

    def __post_init__(self):
        if isinstance(self.regularizer, str):
            self.regularizer = RegularizerSpec(self.regularizer)
        elif isinstance(self.regularizer, dict):
            self.regularizer = RegularizerSpec(**self.regularizer)
        self.validate()

    def validate(self) -> None:
        if self.rounds < 0:
            raise ContractError("rounds must be non-negative")
        if self.n_clients < 1:
            raise ContractError("n_clients must be at least 1")
        if self.local_epochs < 0:
            raise ContractError("local_epochs must be non-negative")
        if self.mu < 0:
            raise ContractError(f"mu must be non-negative, got {self.mu}")
        if not 1 <= self.m_layers <= 7:
            raise ContractError(f"m_layers must lie in [1, 7], got {self.m_layers}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.regularizer.kind == "moon" and not self.tau > 0:
            raise ContractError(f"tau must be positive for MOON, got {self.tau}")
        if not 0 < self.client_fraction <= 1:
            raise ContractError("client_fraction must lie in (0, 1]")
        if self.threads < 1:
            raise ContractError("threads must be at least 1")


@dataclass
class ClientState:
    id: int
    indices: np.ndarray
    prev_local: Optional[Model] = None
    control: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(len(self.indices))


@dataclass
class ServerState:
    global_model: Model
    round: int = 0
    control: Optional[np.ndarray] = None


@dataclass
class RoundMetrics:
    round: int
    regularizer: str
    mu: float
    M: int
    alpha: float
    seed: int
    mean_train_loss: float
    mean_reg_loss: float
    test_accuracy: float
    round_wall_ms: float

    @staticmethod
    def columns() -> List[str]:
        return [f.name for f in fields(RoundMetrics)]

    def row(self) -> List:
        return [getattr(self, c) for c in self.columns()]


@dataclass
class LocalResult:
    model: Model
    mean_sup_loss: float
    mean_reg_loss: float
    steps: int
    skipped_reg: int = 0
    control: Optional[np.ndarray] = None
    control_delta: Optional[np.ndarray] = None


# -- regularizer terms -------------------------------------------------------------


def contrastive_term(sim_positive: Tensor, sim_negative: Tensor) -> Tensor:
    """-log(e^pos / (e^pos + e^neg)), evaluated as softplus(neg - pos)."""
    return (sim_negative - sim_positive).softplus()


def layer_similarity_t(metric: str, a: Tensor, b: Tensor, bandwidth_multiplier: float = 1.0) -> Tensor:
    """Similarity used inside the contrastive CKA loss (higher = more alike).

    The squared Frobenius distance enters negated and divided by the number
    of entries, so that identical representations score highest and values
    stay on a scale comparable to CKA.
    """
    if metric == "linear_cka":
        return linear_cka_t(a, b)
    if metric == "kernel_cka":
        return kernel_cka_t(a, b, bandwidth_multiplier)
    if metric == "frobenius":
        return frobenius_sq_distance_t(a, b) * (-1.0 / a.size)
    if metric == "cosine":
        return cosine_vectorized_t(a, b)
    raise ContractError(f"unknown metric {metric!r}")


def loss_fedcka(taps_local: Sequence[Tensor], taps_global: Sequence[Tensor],
                taps_prev: Sequence[Tensor], m: int, metric: str = "linear_cka",
                bandwidth_multiplier: float = 1.0) -> Optional[Tensor]:
    """Mean over the first ``m`` layers of the contrastive similarity loss.

    Returns None when the batch has fewer than two examples, where CKA is
    undefined and the term is skipped.
    """
    if min(len(taps_local), len(taps_global), len(taps_prev)) < m:
        raise ContractError(f"need {m} taps from each model")
    if taps_local[0].shape[0] < 2:
        return None
    total = None
    for n in range(m):
        a_l, a_g, a_p = taps_local[n], taps_global[n], taps_prev[n]
        if a_l.shape != a_g.shape or a_l.shape != a_p.shape:
            raise DimensionError(f"tap {n + 1} shapes differ: {a_l.shape}, {a_g.shape}, {a_p.shape}")
        s_g = layer_similarity_t(metric, a_l, a_g, bandwidth_multiplier)
        s_p = layer_similarity_t(metric, a_l, a_p, bandwidth_multiplier)
        term = contrastive_term(s_g, s_p)
        total = term if total is None else total + term
    return total * (1.0 / m)


def loss_fedprox(local_params: Sequence[Tensor], global_params: Sequence, mu: float = 1.0) -> Tensor:
    """(mu / 2) * ||w_local - w_global||^2 over all parameters."""
    if len(local_params) != len(global_params):
        raise ContractError("parameter lists are not aligned")
    total = None
    for w, g in zip(local_params, global_params):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if w.shape != g.shape:
            raise ContractError(f"parameter shape mismatch {w.shape} vs {g.shape}")
        d = w - g
        sq = (d * d).sum()
        total = sq if total is None else total + sq
    return total * (0.5 * mu)


def _row_cosine(a: Tensor, b: np.ndarray) -> Tensor:
    na = (a * a).sum(axis=1).sqrt()
    nb = np.sqrt(np.sum(b * b, axis=1))
    return (a * b).sum(axis=1) / (na * nb)


def loss_moon(z_local: Tensor, z_global, z_prev, tau: float = 0.5) -> Tensor:
    """Per-example contrastive loss on cosine similarities, averaged over the batch."""
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    zg = z_global.data if isinstance(z_global, Tensor) else np.asarray(z_global, dtype=np.float64)
    zp = z_prev.data if isinstance(z_prev, Tensor) else np.asarray(z_prev, dtype=np.float64)
    if not (z_local.shape == zg.shape == zp.shape):
        raise DimensionError("projection shapes differ")
    for name, z in (("local", z_local.data), ("global", zg), ("previous", zp)):
        if np.any(np.sum(z * z, axis=1) == 0.0):
            raise DegenerateInputError(f"zero-norm {name} projection")
    pos = _row_cosine(z_local, zg) * (1.0 / tau)
    neg = _row_cosine(z_local, zp) * (1.0 / tau)
    return contrastive_term(pos, neg).mean()


def scaffold_step(grads: Sequence[np.ndarray], c: np.ndarray, c_i: np.ndarray) -> List[np.ndarray]:
    """Correct flat-shaped per-parameter gradients: g - c_i + c.

    ``c`` and ``c_i`` are flat vectors over the concatenated parameters.
    """
    out = []
    offset = 0
    for g in grads:
        n = g.size
        out.append(g - (c_i[offset:offset + n] - c[offset:offset + n]).reshape(g.shape))
        offset += n
    if offset != c.size or c.size != c_i.size:
        raise DimensionError("control variates do not match the parameter vector")
    return out


def scaffold_update(c_i: np.ndarray, c: np.ndarray, w_global: np.ndarray, w_local: np.ndarray,
                    steps: int, lr: float) -> Tuple[np.ndarray, np.ndarray]:
    """New client control variate and its change (control variate option II).

    c_i+ = c_i - c + (w_global - w_local) / (steps * lr)
    """
    if steps <= 0:
        raise ContractError("SCAFFOLD update needs at least one local step")
    new = c_i - c + (w_global - w_local) / (steps * lr)
    return new, new - c_i


# -- local training ----------------------------------------------------------------


def _tap_count(model: Model, cfg: RoundConfig) -> int:
    kind = cfg.regularizer.kind
    if kind == "cka":
        return len(naturally_similar_layers(model, cfg.m_layers))
    if kind == "moon":
        return model.projection_tap
    return 0


def composite_loss(images: np.ndarray, labels: np.ndarray, local: Model, global_model: Model,
                   prev_local: Model, cfg: RoundConfig,
                   global_flat: Optional[List[np.ndarray]] = None
                   ) -> Tuple[Tensor, float, Optional[float]]:
    """Cross-entropy plus ``mu`` times the configured regularizer.

    Returns ``(loss, supervised_value, regularizer_value)``. The regularizer
    value is None when the term does not apply to this batch (no regularizer,
    SCAFFOLD, a single-example batch, or a degenerate representation).
    """
    if not (local.same_architecture(global_model) and local.same_architecture(prev_local)):
        raise ContractError("local, global and previous models must share one architecture")
    kind = cfg.regularizer.kind
    m = _tap_count(local, cfg)
    logits, taps = local.forward(images, m)
    sup = softmax_cross_entropy(logits, labels)
    reg = None
    try:
        if kind == "cka":
            with no_grad():
                _, taps_g = global_model.forward(images, m, stop_after_tap=True)
                _, taps_p = prev_local.forward(images, m, stop_after_tap=True)
            reg = loss_fedcka(taps, taps_g, taps_p, m, cfg.regularizer.metric, cfg.bandwidth_multiplier)
        elif kind == "moon":
            with no_grad():
                _, taps_g = global_model.forward(images, m, stop_after_tap=True)
                _, taps_p = prev_local.forward(images, m, stop_after_tap=True)
            reg = loss_moon(taps[-1], taps_g[-1], taps_p[-1], cfg.tau)
        elif kind == "prox":
            targets = global_flat if global_flat is not None else [p.data for p in global_model.params]
            reg = loss_fedprox(local.params, targets, 1.0)
    except DegenerateInputError as exc:
        logger.debug("regularizer skipped for batch: %s", exc)
        reg = None
    if reg is None:
        return sup, sup.item(), None
    return sup + reg * cfg.mu, sup.item(), reg.item()


def local_update(client: ClientState, global_model: Model, cfg: RoundConfig, dataset: Dataset,
                 round_idx: int = 0, server_control: Optional[np.ndarray] = None) -> LocalResult:
    """Train a copy of ``global_model`` on the client's shard.

    Batches are shuffled per epoch with the key (seed, round, epoch, client id).
    The client's previous-round model defaults to the global model, which
    makes the contrastive terms constant in the first round.
    """
    if client.size == 0:
        raise ContractError(f"client {client.id} holds no samples")
    local = global_model.clone()
    prev = client.prev_local if client.prev_local is not None else global_model
    opt = SGD(local.params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    global_flat = [p.data for p in global_model.params]
    scaffold = cfg.regularizer.kind == "scaffold"
    if scaffold:
        n = global_model.num_parameters()
        c = server_control if server_control is not None else np.zeros(n)
        c_i = client.control if client.control is not None else np.zeros(n)

    sup_losses, reg_losses = [], []
    skipped = 0
    steps = 0
    for epoch in range(cfg.local_epochs):
        key = (cfg.seed, round_idx, epoch, client.id)
        for images, labels in batch_iterator(dataset, client.indices, cfg.batch_size, key):
            loss, sup, reg = composite_loss(images, labels, local, global_model, prev, cfg, global_flat)
            opt.zero_grad()
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in local.params]
            if scaffold:
                grads = scaffold_step(grads, c, c_i)
            opt.step(grads)
            steps += 1
            sup_losses.append(sup)
            if reg is None:
                if cfg.regularizer.kind not in ("none", "scaffold"):
                    skipped += 1
            else:
                reg_losses.append(reg)
    local.zero_grad()

    result = LocalResult(
        model=local,
        mean_sup_loss=float(np.mean(sup_losses)) if sup_losses else math.nan,
        mean_reg_loss=float(np.mean(reg_losses)) if reg_losses else 0.0,
        steps=steps,
        skipped_reg=skipped,
    )
    if scaffold and steps > 0:
        result.control, result.control_delta = scaffold_update(
            c_i, c, global_model.get_flat(), local.get_flat(), steps, cfg.lr
        )
    return result


# -- aggregation and evaluation ------------------------------------------------------


def weighted_avg(models: Sequence[Model], sizes: Sequence[int]) -> Model:
    """Parameter-wise average weighted by client sample counts."""
    if not models:
        raise ContractError("need at least one model to aggregate")
    if len(models) != len(sizes):
        raise ContractError("one size per model is required")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ContractError("every aggregated client must hold at least one sample")
    ref = models[0]
    for m in models[1:]:
        if not ref.same_architecture(m):
            raise ContractError("cannot average models of different architectures")
    weights = sizes / sizes.sum()
    # offset form: identical models average to themselves bit for bit
    base = ref.get_flat()
    acc = base.copy()
    for w, m in zip(weights[1:], models[1:]):
        acc += w * (m.get_flat() - base)
    out = ref.clone()
    out.set_flat(acc)
    return out


def evaluate(model: Model, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = model.predict(dataset.images, batch_size)
    return float(np.mean(preds == dataset.labels))


# -- the round loop ------------------------------------------------------------------


class Simulation:
    """Server plus clients for one federated experiment."""

    def __init__(self, cfg: RoundConfig, partition: Partition, train: Dataset, test: Dataset,
                 model_fn: Optional[Callable[[int], Model]] = None):
        if partition.n_clients != cfg.n_clients:
            raise ContractError(f"partition has {partition.n_clients} clients, config {cfg.n_clients}")
        self.cfg = cfg
        self.partition = partition
        self.train = train
        self.test = test
        if model_fn is None:
            def model_fn(seed):
                return build_base_cnn(train.num_classes, seed, train.input_shape)
        model = model_fn(cfg.seed)
        if cfg.regularizer.kind == "cka" and cfg.m_layers > model.num_taps:
            raise ContractError(f"m_layers={cfg.m_layers} exceeds the model's {model.num_taps} layers")
        self.server = ServerState(model)
        self.clients = [ClientState(i, np.asarray(idx)) for i, idx in enumerate(partition.assignments)]
        if cfg.regularizer.kind == "scaffold":
            n = model.num_parameters()
            self.server.control = np.zeros(n)
            for c in self.clients:
                c.control = np.zeros(n)
        self.history: List[RoundMetrics] = []
        self.train_ms: List[float] = []  # per round, excluding evaluation
        self.skipped_clients: List[Tuple[int, int]] = []
        self._rng = np.random.default_rng([cfg.seed, 0x5e1ec7])

    @property
    def global_model(self) -> Model:
        return self.server.global_model

    def _selected(self) -> List[ClientState]:
        if self.cfg.client_fraction >= 1.0:
            return list(self.clients)
        k = max(1, int(round(self.cfg.client_fraction * len(self.clients))))
        pick = np.sort(self._rng.choice(len(self.clients), size=k, replace=False))
        return [self.clients[i] for i in pick]

    def run_round(self) -> RoundMetrics:
        cfg = self.cfg
        t = self.server.round
        start = time.perf_counter()
        selected = self._selected()
        active = []
        for c in selected:
            if c.size == 0:
                logger.warning("round %d: client %d holds no samples, skipped", t, c.id)
                self.skipped_clients.append((t, c.id))
            else:
                active.append(c)
        if not active:
            raise ContractError(f"round {t}: no client holds any samples")

        g = self.global_model

        def train_one(client):
            return local_update(client, g, cfg, self.train, t, self.server.control)

        if cfg.threads > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(train_one, active))
        else:
            results = [train_one(c) for c in active]

        for client, res in zip(active, results):
            client.prev_local = res.model
            if res.control is not None:
                client.control = res.control

        self.server.global_model = weighted_avg([r.model for r in results], [c.size for c in active])
        if cfg.regularizer.kind == "scaffold":
            deltas = [r.control_delta for r in results if r.control_delta is not None]
            if deltas:
                self.server.control = self.server.control + np.sum(deltas, axis=0) / len(self.clients)

        self.train_ms.append((time.perf_counter() - start) * 1000.0)
        acc = evaluate(self.server.global_model, self.test)
        wall_ms = (time.perf_counter() - start) * 1000.0
        reg_vals = [r.mean_reg_loss for r in results]
        metrics = RoundMetrics(
            round=t,
            regularizer=cfg.regularizer.kind if cfg.regularizer.kind != "cka"
            or cfg.regularizer.metric == "linear_cka" else f"cka-{cfg.regularizer.metric}",
            mu=cfg.mu,
            M=cfg.m_layers,
            alpha=self.partition.alpha,
            seed=cfg.seed,
            mean_train_loss=float(np.mean([r.mean_sup_loss for r in results])),
            mean_reg_loss=float(np.mean(reg_vals)),
            test_accuracy=acc,
            round_wall_ms=wall_ms,
        )
        self.server.round += 1
        self.history.append(metrics)
        return metrics

    def run(self, on_round: Optional[Callable[[RoundMetrics], None]] = None) -> List[RoundMetrics]:
        while self.server.round < self.cfg.rounds:
            m = self.run_round()
            logger.info("round %d acc=%.4f loss=%.4f reg=%.4f (%.0f ms)", m.round, m.test_accuracy,
                        m.mean_train_loss, m.mean_reg_loss, m.round_wall_ms)
            if on_round is not None:
                on_round(m)
        return self.history

    def best_accuracy(self) -> float:
        return max((m.test_accuracy for m in self.history), default=math.nan)

    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy if self.history else math.nan


def run_experiment(cfg: RoundConfig, partition: Partition, train: Dataset, test: Dataset,
                   model_fn: Optional[Callable[[int], Model]] = None,
                   on_round: Optional[Callable[[RoundMetrics], None]] = None) -> List[RoundMetrics]:
    """Run all rounds of one experiment and return the per-round metrics."""
    return Simulation(cfg, partition, train, test, model_fn).run(on_round)
