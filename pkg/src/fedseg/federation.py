"""Federated, centralized and local training.

All three paradigms share one trainer: a seeded mini-batch epoch loop that
minimizes Dice loss with AdamW (or SGD). Federated learning repeats
broadcast, local training and weighted averaging for a fixed number of
rounds. Client work within a round can run in worker processes; results do
not depend on scheduling because every random stream is keyed by
``(seed, epoch)`` and never shared between clients.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .corruption import CorruptionConfig, corrupt_sample
from .errors import AggregationError, ConfigError, NumericError, TrainingError
from .model import AttentionUNet, UNetConfig, build_model
from .tensor import SGD, AdamW, no_grad
from .tensor.functional import dice_loss

log = logging.getLogger(__name__)

PARADIGMS = ("CL", "FL", "LL")
CONFIGURATIONS = ("baseline", "label_manip", "image_manip", "exclusion")


# -- aggregation ---------------------------------------------------------------

def fedavg(params_list, weights) -> "OrderedDict[str, np.ndarray]":
    """Weighted mean of named arrays, weights normalized to sum to one.

    Computed as ``p_0 + sum_i c_i (p_i - p_0)`` so that identical inputs come
    back unchanged bit for bit and a single input is returned as is.
    """
    if not params_list:
        raise AggregationError("nothing to aggregate")
    if len(weights) != len(params_list):
        raise AggregationError(f"{len(params_list)} parameter sets but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ConfigError(f"weights must be finite and non-negative, got {list(weights)}")
    total = w.sum()
    if total <= 0:
        raise ConfigError("aggregation weights sum to zero")
    coef = w / total
    anchor = params_list[0]
    names = list(anchor)
    for i, p in enumerate(params_list[1:], start=1):
        if set(p) != set(names):
            diff = sorted(set(p) ^ set(names))
            raise AggregationError(f"parameter set {i} has different names, e.g. {diff[0]!r}")
        for n in names:
            if np.shape(p[n]) != np.shape(anchor[n]):
                raise AggregationError(f"{n}: shape {np.shape(p[n])} in set {i} != {np.shape(anchor[n])}")
    out = OrderedDict()
    for n in names:
        base = np.asarray(anchor[n], dtype=np.float64)
        acc = base.copy()
        for c, p in zip(coef[1:], params_list[1:]):
            if c:
                acc += c * (np.asarray(p[n], dtype=np.float64) - base)
        out[n] = acc
    return out


# -- plans and state -----------------------------------------------------------

@dataclass(frozen=True)
class RoundPlan:
    """How a run is scheduled. Centralized and local runs use only
    ``total_epochs`` and ``batch_size``."""

    total_epochs: int = 50
    rounds: int = 5
    participants: tuple[int, ...] = (0, 1, 2, 3, 4)
    batch_size: int = 4

    def __post_init__(self):
        if self.total_epochs < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ConfigError("total_epochs, rounds and batch_size must be positive")
        if self.total_epochs % self.rounds:
            raise ConfigError(f"{self.total_epochs} epochs do not divide into {self.rounds} rounds")
        if not self.participants:
            raise ConfigError("a round plan needs at least one participant")
        if len(set(self.participants)) != len(self.participants):
            raise ConfigError(f"duplicate participants in {self.participants}")

    @property
    def epochs_per_round(self) -> int:
        return self.total_epochs // self.rounds


@dataclass(frozen=True)
class TrainerConfig:
    optimizer: str = "adamw"  # "adamw" | "sgd"
    lr: float = 1e-4
    weight_decay: float = 0.01
    smooth: float = 1.0
    loss_reduction: str = "batch"  # "batch" | "per_sample"
    norm_mode: str = "train"  # batch-norm mode while training
    full_batch: bool = False  # one step per epoch over the whole training set
    reset_optimizer: bool = True  # fresh optimizer state at each FL round

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_reduction not in ("batch", "per_sample"):
            raise ConfigError(f"unknown loss reduction {self.loss_reduction!r}")
        if self.norm_mode not in ("train", "eval"):
            raise ConfigError(f"unknown norm mode {self.norm_mode!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(lr=self.lr)
        return AdamW(lr=self.lr, weight_decay=self.weight_decay)


@dataclass
class ClientData:
    """Preprocessed arrays of one client (or of a pooled dataset)."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    train_ids: list[int] = field(default_factory=list)
    val_ids: list[int] = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return len(self.train_x)


@dataclass
class GlobalModel:
    state: "OrderedDict[str, np.ndarray]"
    round: int = 0

    def to_model(self, config: UNetConfig) -> AttentionUNet:
        model = build_model(config, seed=0)
        model.load_state_dict(self.state)
        return model


class TrainLog:
    """Per-epoch loss records; serialized as JSON lines."""

    FIELDS = ("run_id", "paradigm", "config", "client", "round", "epoch", "train_loss", "val_loss")

    def __init__(self, records=None):
        self.records: list[dict] = list(records or [])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def extend(self, records) -> None:
        self.records.extend(records)

    def relabel(self, **fields) -> "TrainLog":
        return TrainLog([{**r, **fields} for r in self.records])

    def write_jsonl(self, path, append: bool = False) -> None:
        with open(path, "a" if append else "w") as f:
            for r in self.records:
                f.write(json.dumps({k: r.get(k) for k in self.FIELDS}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        with open(path) as f:
            return cls([json.loads(line) for line in f if line.strip()])


# -- the shared trainer -----------------------------------------------------------

def validation_loss(model: AttentionUNet, x: np.ndarray, y: np.ndarray, tcfg: TrainerConfig,
                    batch_size: int) -> float | None:
    """Eval-mode Dice loss averaged over batches, weighted by batch size."""
    if len(x) == 0:
        return None
    total = 0.0
    with no_grad():
        for i in range(0, len(x), batch_size):
            pred = model.forward(x[i:i + batch_size], mode="eval")
            total += dice_loss(pred, y[i:i + batch_size], tcfg.smooth, tcfg.loss_reduction).item() * len(pred.data)
    return total / len(x)


def train_epochs(model: AttentionUNet, optimizer, data: ClientData, epochs: range, tcfg: TrainerConfig,
                 batch_size: int, seed: int) -> list[dict]:
    """Run the given global epoch indices on ``data``; returns one record per
    epoch with ``epoch``, ``train_loss`` (mean over samples of the batch
    losses) and ``val_loss``."""
    n = data.n_train
    if n == 0:
        raise ConfigError(f"client {data.client_id} has no training samples")
    step = n if tcfg.full_batch else batch_size
    records = []
    for epoch in epochs:
        rng = np.random.default_rng([seed, 0x5EED, epoch])
        order = np.arange(n) if tcfg.full_batch else rng.permutation(n)
        total = 0.0
        for start in range(0, n, step):
            idx = order[start:start + step]
            model.zero_grad()
            try:
                pred = model.forward(data.train_x[idx], mode=tcfg.norm_mode)
                loss = dice_loss(pred, data.train_y[idx], tcfg.smooth, tcfg.loss_reduction)
            except NumericError as e:
                raise TrainingError(f"client {data.client_id}, epoch {epoch}: {e}",
                                    client=data.client_id, epoch=epoch) from e
            value = loss.item()
            loss.backward()
            optimizer.step(model.params)
            total += value * len(idx)
        records.append({"epoch": int(epoch), "train_loss": total / n,
                        "val_loss": validation_loss(model, data.val_x, data.val_y, tcfg, batch_size)})
    model.zero_grad()
    return records


def _client_round(args):
    """Worker body: one client's local training within one FL round."""
    config, state, optimizer, data, epochs, tcfg, batch_size, seed = args
    model = build_model(config, seed=0)
    model.load_state_dict(state)
    records = train_epochs(model, optimizer, data, epochs, tcfg, batch_size, seed)
    return model.state_dict(), optimizer, records


def worker_count() -> int:
    """Parallelism cap from ``FSEG_THREADS`` (default: available cores)."""
    env = os.environ.get("FSEG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"FSEG_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _tag(records, **fields) -> list[dict]:
    return [{**fields, **r} for r in records]


# -- paradigms ---------------------------------------------------------------------

def run_fl(plan: RoundPlan, clients: dict[int, ClientData], model_config: UNetConfig,
           tcfg: TrainerConfig | None = None, seed: int = 0, run_id: str = "", config: str = "",
           workers: int | None = None) -> tuple[GlobalModel, TrainLog]:
    """Federated averaging over ``plan.participants``.

    Each round broadcasts the global state, trains every participant for
    ``plan.epochs_per_round`` epochs and replaces the global state with the
    train-size-weighted mean of the returned states (batch-norm running
    statistics included).
    """
    tcfg = tcfg or TrainerConfig()
    missing = [c for c in plan.participants if c not in clients]
    if missing:
        raise ConfigError(f"no data for participant(s) {missing}")
    workers = worker_count() if workers is None else workers
    glob = GlobalModel(build_model(model_config, seed).state_dict(), 0)
    optimizers = {c: tcfg.make_optimizer() for c in plan.participants}
    logbook = TrainLog()
    epr = plan.epochs_per_round
    pool = ProcessPoolExecutor(min(workers, len(plan.participants))) if workers > 1 and len(plan.participants) > 1 else None
    try:
        for r in range(plan.rounds):
            epochs = range(r * epr, (r + 1) * epr)
            jobs = []
            for c in plan.participants:
                if tcfg.reset_optimizer:
                    optimizers[c] = tcfg.make_optimizer()
                jobs.append((model_config, glob.state, optimizers[c], clients[c], epochs, tcfg, plan.batch_size, seed))
            results = list(pool.map(_client_round, jobs)) if pool else [_client_round(j) for j in jobs]
            states = []
            for c, (state, opt, records) in zip(plan.participants, results):
                optimizers[c] = opt
                states.append(state)
                logbook.extend(_tag(records, run_id=run_id, paradigm="FL", config=config, client=c, round=r))
            glob = GlobalModel(fedavg(states, [clients[c].n_train for c in plan.participants]), r + 1)
            log.info("FL round %d/%d aggregated over clients %s", r + 1, plan.rounds, list(plan.participants))
    finally:
        if pool:
            pool.shutdown()
    return glob, logbook


def _run_single(paradigm: str, plan: RoundPlan, data: ClientData, model_config: UNetConfig,
                tcfg: TrainerConfig | None, seed: int, run_id: str, config: str):
    tcfg = tcfg or TrainerConfig()
    model = build_model(model_config, seed)
    records = train_epochs(model, tcfg.make_optimizer(), data, range(plan.total_epochs), tcfg,
                           plan.batch_size, seed)
    client = None if paradigm == "CL" else data.client_id
    return model, TrainLog(_tag(records, run_id=run_id, paradigm=paradigm, config=config, client=client, round=None))


def run_ll(plan: RoundPlan, data: ClientData, model_config: UNetConfig, tcfg: TrainerConfig | None = None,
           seed: int = 0, run_id: str = "", config: str = "") -> tuple[AttentionUNet, TrainLog]:
    """Local learning: one client trains alone for ``plan.total_epochs``."""
    return _run_single("LL", plan, data, model_config, tcfg, seed, run_id, config)


def run_cl(plan: RoundPlan, data: ClientData, model_config: UNetConfig, tcfg: TrainerConfig | None = None,
           seed: int = 0, run_id: str = "", config: str = "") -> tuple[AttentionUNet, TrainLog]:
    """Centralized learning on pooled data; same trainer as :func:`run_ll`."""
    return _run_single("CL", plan, data, model_config, tcfg, seed, run_id, config)


# -- experimental configurations ------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    name: str  # "CL", "FL", "LL0", ...
    paradigm: str  # "CL" | "FL" | "LL"
    clients: tuple[int, ...]  # whose data the model is trained on


@dataclass(frozen=True)
class RunSet:
    config_id: str
    faulty_client: int
    corruption: CorruptionConfig
    models: tuple[ModelSpec, ...]

    @property
    def fl_participants(self) -> tuple[int, ...]:
        return next(m.clients for m in self.models if m.paradigm == "FL")

    @property
    def cl_pool(self) -> tuple[int, ...]:
        return next(m.clients for m in self.models if m.paradigm == "CL")


def configure_experiment(config_id: str, faulty_client: int = 0, n_clients: int = 5,
                         corruption: CorruptionConfig | None = None) -> RunSet:
    """Which models a configuration trains, on whose data, with which corruption.

    ``label_manip`` and ``image_manip`` corrupt the faulty client's share
    (before its train/validation split) for every model that sees it.
    ``exclusion`` drops the faulty client from FL and from the CL pool and
    trains no local model for it.
    """
    if config_id not in CONFIGURATIONS:
        raise ConfigError(f"unknown configuration {config_id!r}; expected one of {CONFIGURATIONS}")
    if not 0 <= faulty_client < n_clients:
        raise ConfigError(f"faulty client {faulty_client} outside 0..{n_clients - 1}")
    base = corruption or CorruptionConfig()
    kind = {"label_manip": "label", "image_manip": "image"}.get(config_id, "none")
    corr = CorruptionConfig(kind, base.dilation_kernels, base.omission_prob, base.noise_mu, base.noise_sigma, base.seed)
    everyone = tuple(range(n_clients))
    cohort = tuple(c for c in everyone if c != faulty_client) if config_id == "exclusion" else everyone
    if not cohort:
        raise ConfigError("exclusion leaves no participants")
    models = [ModelSpec("CL", "CL", cohort), ModelSpec("FL", "FL", cohort)]
    models += [ModelSpec(f"LL{c}", "LL", (c,)) for c in cohort]
    return RunSet(config_id, faulty_client, corr, tuple(models))


def scoped_samples(runset: RunSet, samples: dict, partition) -> dict:
    """Map sample id -> the sample version this configuration trains on.

    Only the faulty client's partition is touched; everything else is the
    baseline object itself.
    """
    out = dict(samples)
    if runset.corruption.kind != "none":
        for i in partition.members(runset.faulty_client):
            out[i] = corrupt_sample(samples[i], runset.corruption)
    return out


def digest_inputs(*parts) -> str:
    """Content key for caching trained models: equal keys mean identical
    training inputs."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(str((p.dtype.str, p.shape)).encode())
            h.update(np.ascontiguousarray(p).tobytes())
        elif hasattr(p, "__dataclass_fields__"):
            h.update(json.dumps(asdict(p), sort_keys=True, default=str).encode())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()
