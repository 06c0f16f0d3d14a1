"""Faulty-client detection from per-client training-loss trajectories.

A client is flagged when its training loss stays above the cohort median
by more than ``max(delta_abs, delta_rel * median)`` for ``k_consecutive``
epochs in a row, ignoring the first ``warmup_epochs`` epochs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CohortError, ContractError
from .tensor import no_grad
from .tensor.functional import dice_loss

log = logging.getLogger(__name__)


@dataclass
class LossTrajectory:
    client_id: int
    epochs: list[int]
    train_loss: list[float]
    val_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ContractError(f"client {self.client_id}: epoch indices must be strictly increasing")
        if len(self.train_loss) != len(self.epochs) or (self.val_loss and len(self.val_loss) != len(self.epochs)):
            raise ContractError(f"client {self.client_id}: loss series length differs from epochs")
        vals = np.asarray(self.train_loss + self.val_loss, dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ContractError(f"client {self.client_id}: losses must be finite and non-negative")


@dataclass
class Evidence:
    first_flagged_epoch: int | None
    margin_over_median: float  # at the first flagged epoch (max margin if never flagged)
    consecutive_epochs: int  # longest run above threshold


@dataclass
class AnomalyReport:
    flagged: list[int]
    evidence: dict[int, Evidence]
    params: dict

    def to_json(self) -> str:
        return json.dumps({
            "flagged": self.flagged,
            "evidence": {str(k): asdict(v) for k, v in self.evidence.items()},
            "params": self.params,
        }, indent=2, sort_keys=True)


def detect(trajectories: list[LossTrajectory], delta_abs: float = 0.02, delta_rel: float = 0.25,
           k_consecutive: int = 3, warmup_epochs: int = 3) -> AnomalyReport:
    if len(trajectories) < 3:
        raise CohortError(f"need at least 3 clients for a cohort median, got {len(trajectories)}")
    epochs = trajectories[0].epochs
    for t in trajectories[1:]:
        if t.epochs != epochs:
            raise ContractError(f"client {t.client_id}: epochs not aligned with client {trajectories[0].client_id}")
    losses = np.array([t.train_loss for t in trajectories], dtype=float)  # clients x epochs
    median = np.median(losses, axis=0)
    threshold = median + np.maximum(delta_abs, delta_rel * median)
    above = losses > threshold
    above[:, :warmup_epochs] = False

    flagged, evidence = [], {}
    for row, t in enumerate(trajectories):
        run = best = 0
        first = None
        for e in range(len(epochs)):
            run = run + 1 if above[row, e] else 0
            best = max(best, run)
            if first is None and run >= k_consecutive:
                first = e
        margins = losses[row] - median
        if first is not None:
            flagged.append(t.client_id)
            margin = float(margins[first])
        else:
            margin = float(margins[warmup_epochs:].max()) if len(epochs) > warmup_epochs else 0.0
        evidence[t.client_id] = Evidence(None if first is None else int(epochs[first]), margin, best)
    params = {"delta_abs": delta_abs, "delta_rel": delta_rel,
              "k_consecutive": k_consecutive, "warmup_epochs": warmup_epochs}
    return AnomalyReport(sorted(flagged), evidence, params)


def exclusion_policy(report: AnomalyReport, participants: list[int]) -> list[int]:
    """Participants minus flagged clients; keeps everyone if all are flagged."""
    kept = [c for c in participants if c not in set(report.flagged)]
    if not kept:
        log.warning("every participant was flagged; keeping the full cohort")
        return list(participants)
    return kept


def clean_revalidate(model, images: np.ndarray, masks: np.ndarray, smooth: float = 1.0,
                     batch_size: int = 4) -> float:
    """Eval-mode Dice loss over a (clean) validation set, batch-weighted."""
    if len(images) == 0:
        raise ContractError("clean validation set is empty")
    total = 0.0
    with no_grad():
        for i in range(0, len(images), batch_size):
            pred = model.forward(images[i:i + batch_size], mode="eval")
            total += dice_loss(pred, masks[i:i + batch_size], smooth).item() * len(pred.data)
    return total / len(images)


def trajectories_from_log(records, paradigm: str = "FL", config: str | None = None) -> list[LossTrajectory]:
    """Group TrainLog records (dicts) into per-client trajectories."""
    by_client: dict[int, list] = {}
    for r in records:
        if r["paradigm"] != paradigm or (config is not None and r["config"] != config):
            continue
        by_client.setdefault(int(r["client"]), []).append(r)
    out = []
    for c in sorted(by_client):
        rows = sorted(by_client[c], key=lambda r: r["epoch"])
        out.append(LossTrajectory(c, [int(r["epoch"]) for r in rows],
                                  [float(r["train_loss"]) for r in rows],
                                  [float(r["val_loss"]) for r in rows]))
    return out
