"""End-to-end driver: data, training, evaluation, statistics, manifest.

Run directory layout::

    <out>/config.txt                 normalized configuration
    <out>/dataset/                   baseline samples (PGM/PBM + manifest.json)
    <out>/models/<name>-<key>.fseg   checkpoints, keyed by training inputs
    <out>/models/<name>-<key>.jsonl  the matching training log
    <out>/<configuration>/trainlog.jsonl
    <out>/<configuration>/metrics/<model>.csv
    <out>/<configuration>/summary.csv
    <out>/significance_within_configuration.csv
    <out>/significance_within_paradigm.csv
    <out>/manifest.json

A model whose training inputs are byte-identical to an earlier one (the
local models of untouched clients, for example) is trained once and
reused. Every model is evaluated from its stored checkpoint so scores do
not depend on whether it came from the cache.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import anomaly, stats
from ..data import client_splits, export_dataset, generate_dataset, iid_partition, pooled_split, split_test, to_arrays
from ..data.io import import_dataset, manifest_digest
from ..errors import ConfigError, StageError, StateError
from ..federation import (
    ClientData,
    RunSet,
    TrainLog,
    configure_experiment,
    digest_inputs,
    run_cl,
    run_fl,
    run_ll,
    scoped_samples,
)
from ..metrics import evaluate, read_records_csv, write_records_csv, write_summary_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

INCOMPLETE = "INCOMPLETE"
LOCK = "run.lock"


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


@contextmanager
def run_lock(out: Path):
    """Exclusive ownership of a run directory for the duration of a run."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{out} is locked by another run (remove {path} if stale)") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        path.unlink(missing_ok=True)


def run_id_of(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:12]


# -- data ---------------------------------------------------------------------------

@dataclass
class Prepared:
    cfg: ExperimentConfig
    samples: dict
    test_ids: list[int]
    partition: object
    splits: object
    test_x: np.ndarray
    test_y: np.ndarray

    def client_data(self, versions: dict, client: int) -> ClientData:
        s = self.splits.clients[client]
        return self._data(versions, client, s.train, s.val)

    def pooled_data(self, versions: dict, clients) -> ClientData:
        ids = sorted(i for c in clients for i in self.partition.members(c))
        s = pooled_split(ids, self.cfg.seed)
        return self._data(versions, -1, s.train, s.val)

    def _data(self, versions, client, train, val) -> ClientData:
        h, w = self.cfg.height, self.cfg.width
        tx, ty = to_arrays([versions[i] for i in train], h, w)
        vx, vy = to_arrays([versions[i] for i in val], h, w)
        return ClientData(client, tx, ty, vx, vy, list(train), list(val))


def prepare_data(cfg: ExperimentConfig) -> Prepared:
    samples = generate_dataset(cfg.n, cfg.seed, cfg.gen_config())
    by_id = {s.id: s for s in samples}
    test, rest = split_test(list(by_id), cfg.test_fraction, cfg.seed)
    partition = iid_partition(rest, cfg.n_clients, cfg.seed)
    splits = client_splits(partition, test)
    tx, ty = to_arrays([by_id[i] for i in test], cfg.height, cfg.width)
    return Prepared(cfg, by_id, test, partition, splits, tx, ty)


def _dataset_extra(prep: Prepared) -> dict:
    cfg = prep.cfg
    return {
        "preprocess": {"height": cfg.height, "width": cfg.width},
        "assignment": {str(i): c for i, c in sorted(prep.partition.assignment.items())},
        "splits": {
            "test": prep.test_ids,
            "clients": {str(c): {"train": s.train, "val": s.val} for c, s in prep.splits.clients.items()},
        },
    }


# -- training with reuse -----------------------------------------------------------------

def _train(spec, runset: RunSet, prep: Prepared, versions: dict, run_id: str):
    cfg = prep.cfg
    if spec.paradigm == "FL":
        clients = {c: prep.client_data(versions, c) for c in spec.clients}
        plan = cfg.round_plan(spec.clients)
        key_parts = [clients[c].train_x for c in spec.clients] + [clients[c].train_y for c in spec.clients]
        key_parts += [clients[c].val_x for c in spec.clients] + [clients[c].val_y for c in spec.clients]

        def fit():
            glob, logbook = run_fl(plan, clients, cfg.model, cfg.trainer, cfg.seed, run_id, runset.config_id)
            return glob.to_model(cfg.model), logbook
    else:
        if spec.paradigm == "CL":
            data = prep.pooled_data(versions, spec.clients)
            fn = run_cl
        else:
            data = prep.client_data(versions, spec.clients[0])
            fn = run_ll
        plan = cfg.round_plan()
        key_parts = [data.train_x, data.train_y, data.val_x, data.val_y]

        def fit():
            return fn(plan, data, cfg.model, cfg.trainer, cfg.seed, run_id, runset.config_id)
    key = digest_inputs(spec.paradigm, list(spec.clients), cfg.model, cfg.trainer, plan.total_epochs,
                        plan.rounds, plan.batch_size, cfg.seed, *key_parts)
    return key, fit


def train_models(runset: RunSet, prep: Prepared, out: Path, run_id: str) -> dict[str, dict]:
    """Train (or reuse) every model of a configuration; returns name -> entry
    with checkpoint path, log path and whether the model was reused."""
    versions = scoped_samples(runset, prep.samples, prep.partition)
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    entries = {}
    for spec in runset.models:
        if spec.paradigm not in prep.cfg.paradigms:
            continue
        with _stage(f"train:{runset.config_id}:{spec.name}"):
            key, fit = _train(spec, runset, prep, versions, run_id)
            ckpt = models_dir / f"{spec.name}-{key[:16]}.fseg"
            trainlog = ckpt.with_suffix(".jsonl")
            reused = ckpt.exists() and trainlog.exists()
            if reused:
                log.info("%s/%s: reusing %s", runset.config_id, spec.name, ckpt.name)
            else:
                log.info("%s/%s: training on clients %s", runset.config_id, spec.name, list(spec.clients))
                model, logbook = fit()
                logbook.write_jsonl(trainlog)
                save_checkpoint(model, ckpt)
        entries[spec.name] = {"paradigm": spec.paradigm, "clients": list(spec.clients),
                              "checkpoint": ckpt, "trainlog": trainlog, "reused": reused}
    return entries


# -- evaluation and statistics ----------------------------------------------------------

def _metric_table(records) -> dict[str, dict[int, float]]:
    return {m: {r.sample_id: getattr(r, m) for r in records} for m in stats.METRICS}


def evaluate_configuration(runset: RunSet, entries: dict, prep: Prepared, out: Path, run_id: str) -> dict:
    cfg = prep.cfg
    cdir = out / runset.config_id
    (cdir / "metrics").mkdir(parents=True, exist_ok=True)
    summaries, tables, logbook = {}, {}, TrainLog()
    for name, e in entries.items():
        with _stage(f"eval:{runset.config_id}:{name}"):
            model = load_checkpoint(e["checkpoint"], cfg.model)
            records, summary = evaluate(model, prep.test_x, prep.test_y, prep.test_ids,
                                        cfg.threshold, cfg.boundary, batch_size=8)
            e["metrics"] = cdir / "metrics" / f"{name}.csv"
            write_records_csv(e["metrics"], records)
            summaries[name] = summary
            tables[name] = _metric_table(records)
            logbook.extend(TrainLog.read_jsonl(e["trainlog"]).relabel(run_id=run_id, config=runset.config_id))
    write_summary_csv(cdir / "summary.csv", summaries)
    logbook.write_jsonl(cdir / "trainlog.jsonl")
    return {"summaries": summaries, "tables": tables}


def suite_tables(per_config: dict[str, dict[str, dict]], faulty: int) -> dict:
    """(configuration, paradigm) -> metric table, with the faulty client's
    local model standing in as ``LL0``."""
    out = {}
    for config_id, tables in per_config.items():
        for name, table in tables.items():
            key = "LL0" if name == f"LL{faulty}" else name
            if key in stats.PARADIGMS:
                out[(config_id, key)] = table
    return out


# -- commands ------------------------------------------------------------------------------

def _rel(path: Path, root: Path) -> str:
    return Path(path).relative_to(root).as_posix()


def cmd_run(cfg: ExperimentConfig, out=None) -> dict:
    """Full pipeline for every configuration in ``cfg``; returns the manifest."""
    out = Path(out or cfg.out)
    with run_lock(out):
        marker = out / INCOMPLETE
        marker.write_text("run in progress\n")
        try:
            manifest = _run(cfg, out)
        except StageError as e:
            marker.write_text(f"failed at stage {e.stage}: {e}\n")
            raise
        except Exception as e:
            marker.write_text(f"failed: {type(e).__name__}: {e}\n")
            raise
        marker.unlink()
    return manifest


def _run(cfg: ExperimentConfig, out: Path) -> dict:
    run_id = run_id_of(cfg)
    (out / "config.txt").write_text(dump_config(cfg))
    with _stage("data"):
        prep = prepare_data(cfg)
        ds_manifest = export_dataset(list(prep.samples.values()), out / "dataset", _dataset_extra(prep))
    configs, per_config = {}, {}
    for config_id in cfg.configurations:
        runset = configure_experiment(config_id, cfg.faulty_client, cfg.n_clients, cfg.corruption)
        entries = train_models(runset, prep, out, run_id)
        result = evaluate_configuration(runset, entries, prep, out, run_id)
        per_config[config_id] = result["tables"]
        configs[config_id] = {
            "trainlog": _rel(out / config_id / "trainlog.jsonl", out),
            "summary": _rel(out / config_id / "summary.csv", out),
            "models": {
                name: {"paradigm": e["paradigm"], "clients": e["clients"], "reused": e["reused"],
                       "checkpoint": _rel(e["checkpoint"], out), "trainlog": _rel(e["trainlog"], out),
                       "metrics": _rel(e["metrics"], out)}
                for name, e in entries.items()
            },
        }
    with _stage("compare"):
        comps, alpha_corr = stats.comparison_suite(suite_tables(per_config, cfg.faulty_client))
        tables = {}
        for table in ("within-configuration", "within-paradigm"):
            path = out / f"significance_{table.replace('-', '_')}.csv"
            stats.write_significance_csv(path, comps, table)
            tables[table] = _rel(path, out)
    manifest = {
        "format": "fedseg-run",
        "version": 1,
        "run_id": run_id,
        "config": dict(line.split(" = ", 1) for line in dump_config(cfg).splitlines()),
        "config_file": "config.txt",
        "dataset": {"manifest": _rel(ds_manifest, out), "digest": manifest_digest(ds_manifest)},
        "configurations": configs,
        "significance": {"tables": tables, "n_comparisons": len(comps), "alpha_corrected": alpha_corr},
    }
    with _stage("manifest"):
        _check_paths(manifest, out)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _check_paths(manifest: dict, out: Path) -> None:
    paths = [manifest["config_file"], manifest["dataset"]["manifest"], *manifest["significance"]["tables"].values()]
    for c in manifest["configurations"].values():
        paths += [c["trainlog"], c["summary"]]
        for m in c["models"].values():
            paths += [m["checkpoint"], m["trainlog"], m["metrics"]]
    missing = [p for p in paths if not (out / p).exists()]
    if missing:
        raise FileNotFoundError(f"manifest references missing files: {missing[:3]}")


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no run manifest (incomplete or not a run directory)") from None
    except json.JSONDecodeError as e:
        raise IOError(f"{path}: corrupt manifest: {e}") from None


def cmd_detect(run_dir, delta_abs: float | None = None, delta_rel: float | None = None,
               k_consecutive: int | None = None, warmup_epochs: int | None = None) -> dict:
    """Run the loss-trajectory detector on every configuration's FL log.

    Thresholds default to the run's configuration. Writes
    ``<configuration>/anomaly.json``; returns configuration -> report.
    """
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    conf = manifest["config"]
    params = {
        "delta_abs": float(conf["detect.delta_abs"]) if delta_abs is None else delta_abs,
        "delta_rel": float(conf["detect.delta_rel"]) if delta_rel is None else delta_rel,
        "k_consecutive": int(conf["detect.k_consecutive"]) if k_consecutive is None else k_consecutive,
        "warmup_epochs": int(conf["detect.warmup_epochs"]) if warmup_epochs is None else warmup_epochs,
    }
    reports = {}
    for config_id, c in manifest["configurations"].items():
        records = TrainLog.read_jsonl(run_dir / c["trainlog"]).records
        trajectories = anomaly.trajectories_from_log(records, "FL", config_id)
        if not trajectories:
            continue
        report = anomaly.detect(trajectories, **params)
        (run_dir / config_id / "anomaly.json").write_text(report.to_json() + "\n")
        reports[config_id] = report
    return reports


def _run_tables(run_dir: Path) -> tuple[dict, int]:
    manifest = read_manifest(run_dir)
    per_config = {}
    for config_id, c in manifest["configurations"].items():
        per_config[config_id] = {name: _metric_table(read_records_csv(run_dir / m["metrics"]))
                                 for name, m in c["models"].items()}
    return per_config, int(manifest["config"]["experiment.faulty_client"])


def cmd_compare(run_dirs, out=None) -> tuple[list, float]:
    """Significance tables for one run, or across runs.

    With one directory, the within-configuration and within-paradigm tables
    are recomputed from its metric CSVs. With several, every model of the
    first run is compared with the same model of each other run.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigError("compare needs at least one run directory")
    out = Path(out) if out else run_dirs[0] / "compare"
    out.mkdir(parents=True, exist_ok=True)
    first, faulty = _run_tables(run_dirs[0])
    if len(run_dirs) == 1:
        comps, alpha_corr = stats.comparison_suite(suite_tables(first, faulty))
        for table in ("within-configuration", "within-paradigm"):
            stats.write_significance_csv(out / f"significance_{table.replace('-', '_')}.csv", comps, table)
        return comps, alpha_corr
    comps = []
    for k, other_dir in enumerate(run_dirs[1:], start=1):
        other, _ = _run_tables(other_dir)
        for config_id, models in first.items():
            for name, table in models.items():
                if name in other.get(config_id, {}):
                    comps.append(stats.Comparison("across-run", config_id, f"{name}: run 0 vs run {k}",
                                                  stats.compare_models(table, other[config_id][name])))
    comps, alpha_corr = stats.finalize(comps)
    stats.write_significance_csv(out / "significance_across_runs.csv", comps, "across-run")
    return comps, alpha_corr


def cmd_eval(checkpoint, data_dir, out_csv=None, split: str | None = None, threshold: float = 0.5,
             boundary: bool = False, height: int | None = None, width: int | None = None):
    """Score a checkpoint on an exported dataset directory.

    ``split`` may be ``test`` or ``client<k>.train`` / ``client<k>.val`` when
    the dataset manifest carries split information; default is every sample.
    """
    model = load_checkpoint(checkpoint)
    samples, manifest = import_dataset(data_dir)
    pre = manifest.get("preprocess", {})
    h = height or pre.get("height")
    w = width or pre.get("width")
    if h is None or w is None:
        raise ConfigError(f"{data_dir}: no preprocessing size in manifest; pass height and width")
    if split:
        ids = set(_split_ids(manifest, split))
        samples = [s for s in samples if s.id in ids]
    x, y = to_arrays(samples, h, w)
    records, summary = evaluate(model, x, y, [s.id for s in samples], threshold, boundary)
    if out_csv:
        write_records_csv(out_csv, records)
    return records, summary


def _split_ids(manifest: dict, split: str) -> list[int]:
    splits = manifest.get("splits")
    if not splits:
        raise ConfigError("dataset manifest has no split information")
    if split == "test":
        return splits["test"]
    try:
        client, part = split.split(".")
        return splits["clients"][client.removeprefix("client")][part]
    except (ValueError, KeyError):
        raise ConfigError(f"unknown split {split!r}") from None
