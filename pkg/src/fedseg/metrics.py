"""Overlap and surface-distance metrics on binary masks, in pixel units.

``hausdorff`` and ``hd95`` measure over all foreground pixels by default
(``boundary=True`` switches to surface points); ``assd`` always uses
surface points: foreground pixels with a 4-neighbour in the background or
on the image border. Nearest-neighbour distances come from an exact
Euclidean distance transform.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, UndefinedMetricError

METRICS = ("dice", "iou", "hd", "hd95", "assd")

_FOUR = ndimage.generate_binary_structure(2, 1)


def _pair(g, p) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(g).astype(bool)
    p = np.asarray(p).astype(bool)
    if g.shape != p.shape:
        raise DimensionError(f"mask shapes differ: {g.shape} vs {p.shape}")
    return g, p


def dice(g, p) -> float:
    g, p = _pair(g, p)
    total = int(g.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(g, p).sum()) / total


def iou(g, p) -> float:
    g, p = _pair(g, p)
    union = int(np.logical_or(g, p).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(g, p).sum()) / union


def surface(mask) -> np.ndarray:
    """Boolean map of surface points."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FOUR, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` pixel to the nearest ``dst`` pixel."""
    return ndimage.distance_transform_edt(~dst)[src]


def _nonempty(g, p) -> None:
    if not g.any() or not p.any():
        raise UndefinedMetricError("distance metric undefined for an empty mask")


def _distances(g, p, boundary: bool):
    g, p = _pair(g, p)
    _nonempty(g, p)
    if boundary:
        g, p = surface(g), surface(p)
    return _directed(g, p), _directed(p, g)


def hausdorff(g, p, boundary: bool = False) -> float:
    a, b = _distances(g, p, boundary)
    return float(max(a.max(), b.max()))


def hd95(g, p, boundary: bool = False) -> float:
    """95th percentile (linear interpolation) of the pooled directed
    nearest-neighbour distances."""
    a, b = _distances(g, p, boundary)
    return float(np.percentile(np.concatenate([a, b]), 95))


def assd(g, p) -> float:
    a, b = _distances(g, p, boundary=True)
    return float((a.sum() + b.sum()) / (a.size + b.size))


@dataclass
class MetricRecord:
    sample_id: int
    dice: float
    iou: float
    hd: float = float("nan")
    hd95: float = float("nan")
    assd: float = float("nan")

    @property
    def undefined(self) -> bool:
        return bool(np.isnan(self.hd))


def score(sample_id: int, g, p, boundary: bool = False) -> MetricRecord:
    """All five metrics; distance fields stay NaN when a mask is empty."""
    rec = MetricRecord(sample_id, dice(g, p), iou(g, p))
    try:
        a, b = _distances(g, p, boundary)
    except UndefinedMetricError:
        return rec
    rec.hd = float(max(a.max(), b.max()))
    rec.hd95 = float(np.percentile(np.concatenate([a, b]), 95))
    rec.assd = assd(g, p)
    return rec


def summarize(records: list[MetricRecord]) -> dict[str, dict[str, float]]:
    """Median, quartiles, IQR and 95th percentile of every metric over the
    records where it is defined."""
    out = {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in records], dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            out[m] = dict.fromkeys(("median", "q25", "q75", "iqr", "p95"), float("nan")) | {"n": 0}
            continue
        q25, med, q75, p95 = np.percentile(vals, [25, 50, 75, 95])
        out[m] = {"median": float(med), "q25": float(q25), "q75": float(q75),
                  "iqr": float(q75 - q25), "p95": float(p95), "n": int(vals.size)}
    return out


def evaluate(model, images: np.ndarray, masks: np.ndarray, ids=None, threshold: float = 0.5,
             boundary: bool = False, batch_size: int = 8):
    """Eval-mode predictions binarized at ``threshold`` and scored per image.

    Returns ``(records, summary)``; images with an undefined distance metric
    keep NaN fields and are counted in the summary's ``undefined`` entry.
    """
    probs = model.predict(images, batch_size=batch_size)
    ids = list(range(len(images))) if ids is None else list(ids)
    records = [score(i, masks[k, 0] > 0.5, probs[k, 0] > threshold, boundary)
               for k, i in enumerate(ids)]
    summary = summarize(records)
    summary["undefined"] = sum(r.undefined for r in records)
    return records, summary


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_records_csv(path, records: list[MetricRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("sample_id",) + METRICS)
        for r in records:
            w.writerow([r.sample_id] + [_fmt(getattr(r, m)) for m in METRICS])


def read_records_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [MetricRecord(int(r["sample_id"]), *(float(r[m]) if r[m] != "" else float("nan") for m in METRICS))
            for r in rows]


def write_summary_csv(path, summaries: dict[str, dict]) -> None:
    """One row per model, ``<metric>_median/_iqr/_p95`` columns."""
    cols = ["model"] + [f"{m}_{s}" for m in METRICS for s in ("median", "iqr", "p95")] + ["undefined"]
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for name, s in summaries.items():
            row = [name] + [_fmt(s[m][k]) for m in METRICS for k in ("median", "iqr", "p95")]
            w.writerow(row + [s.get("undefined", 0)])


def records_as_dicts(records):
    return [asdict(r) for r in records]
