"""Declarative experiment configs and the cross-validated experiment runner.

A config file is one JSON object naming the manifest, the upstream branch
list, fusion mode, aggregators, averaging flags and training settings. The
runner executes the full protocol per fold: materialize train/val features,
fit (train, select best checkpoints, average), then and only then touch the
test set. Every dataset read is written to an access log so test-set
isolation is checkable after the fact.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .audio import FbankConfig, log_mel_fbank, read_wav
from .errors import ConfigError, DataError
from .estimator import SERClassifier
from .evaluation import (
    CLASS_NAMES,
    AccessLog,
    Fold,
    FoldMetrics,
    Manifest,
    MetricsReport,
    confusion_matrix,
    load_manifest,
    make_folds,
    uacc,
    wacc,
)
from .features import load_features
from .model import BranchSpec, validate_structure

THREADS_ENV = "SER_FORGE_THREADS"

_TOP_KEYS = {"name", "description", "table", "manifest", "out_dir", "seed",
             "branches", "fusion", "aggregators", "ecapa", "averaging", "train"}
_BRANCH_KEYS = {"source", "name", "trainable"}
_AVG_KEYS = {"upstream", "downstream", "k"}
_TRAIN_KEYS = {"epochs", "batch_size", "lr", "checkpoint_every"}


@dataclass
class ExperimentConfig:
    name: str
    manifest: str
    out_dir: str
    seed: int
    branches: list
    fusion: str
    aggregators: list
    averaging: dict
    train: dict
    ecapa: dict | None = None
    table: dict = field(default_factory=dict)
    description: str = ""

    @property
    def branch_specs(self) -> list[BranchSpec]:
        return [BranchSpec(source=b["source"], name=b.get("name", ""),
                           trainable=bool(b.get("trainable", False)))
                for b in self.branches]


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(raw: dict, base_dir: Path) -> ExperimentConfig:
    """Check every field of a raw config dict; paths resolve against base_dir."""
    _expect(isinstance(raw, dict), "config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    _expect(not unknown, f"unknown config keys: {sorted(unknown)}")
    for key in ("name", "manifest", "out_dir", "seed", "branches", "fusion",
                "aggregators", "averaging", "train"):
        _expect(key in raw, f"config is missing required key {key!r}")
    _expect(isinstance(raw["name"], str) and raw["name"], "name: must be a non-empty string")
    _expect(isinstance(raw["seed"], int) and raw["seed"] >= 0,
            f"seed: must be a non-negative integer, got {raw['seed']!r}")

    branches = raw["branches"]
    _expect(isinstance(branches, list) and branches, "branches: must be a non-empty list")
    for i, b in enumerate(branches):
        _expect(isinstance(b, dict), f"branches[{i}]: must be an object")
        unknown = set(b) - _BRANCH_KEYS
        _expect(not unknown, f"branches[{i}]: unknown keys {sorted(unknown)}")
        _expect(isinstance(b.get("source"), str), f"branches[{i}].source: required string")

    aggregators = raw["aggregators"]
    _expect(isinstance(aggregators, list), "aggregators: must be a list")
    specs = [BranchSpec(source=b["source"], name=b.get("name", ""),
                        trainable=bool(b.get("trainable", False))) for b in branches]
    validate_structure(specs, raw["fusion"], aggregators)

    avg = raw["averaging"]
    _expect(isinstance(avg, dict), "averaging: must be an object")
    unknown = set(avg) - _AVG_KEYS
    _expect(not unknown, f"averaging: unknown keys {sorted(unknown)}")
    for key in ("upstream", "downstream"):
        _expect(isinstance(avg.get(key), bool), f"averaging.{key}: required boolean")
    k = avg.get("k", 5)
    _expect(isinstance(k, int) and k >= 1, f"averaging.k: must be a positive integer, got {k!r}")
    _expect(not (avg["upstream"] and not any(s.trainable for s in specs)),
            "averaging.upstream=true needs at least one trainable branch")

    train = raw["train"]
    _expect(isinstance(train, dict), "train: must be an object")
    unknown = set(train) - _TRAIN_KEYS
    _expect(not unknown, f"train: unknown keys {sorted(unknown)}")
    epochs = train.get("epochs", 20)
    every = train.get("checkpoint_every", 1)
    _expect(isinstance(epochs, int) and epochs >= 0, f"train.epochs: bad value {epochs!r}")
    _expect(isinstance(every, int) and every >= 1, f"train.checkpoint_every: bad value {every!r}")
    if avg["upstream"] or avg["downstream"]:
        _expect(epochs // every >= k,
                f"averaging.k={k} but train writes only {epochs // every} checkpoints "
                f"({epochs} epochs, every {every})")
    batch = train.get("batch_size", 8)
    _expect(isinstance(batch, int) and batch >= 1, f"train.batch_size: bad value {batch!r}")
    lr = train.get("lr", 1e-3)
    _expect(isinstance(lr, (int, float)) and lr > 0, f"train.lr: bad value {lr!r}")

    ecapa = raw.get("ecapa")
    if ecapa is not None:
        _expect(isinstance(ecapa, dict), "ecapa: must be an object of overrides")
        if "ecapa" not in aggregators:
            raise ConfigError("ecapa overrides given but no branch uses the ecapa aggregator")

    table = raw.get("table", {})
    _expect(isinstance(table, dict), "table: must be an object")

    return ExperimentConfig(
        name=raw["name"],
        manifest=str((base_dir / raw["manifest"]).resolve()),
        out_dir=str((base_dir / raw["out_dir"]).resolve()),
        seed=raw["seed"],
        branches=branches,
        fusion=raw["fusion"],
        aggregators=list(aggregators),
        averaging={"upstream": avg["upstream"], "downstream": avg["downstream"], "k": k},
        train={"epochs": epochs, "batch_size": batch, "lr": float(lr),
               "checkpoint_every": every},
        ecapa=ecapa,
        table=table,
        description=raw.get("description", ""),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return validate_config(raw, path.parent)


# -- feature provider ---------------------------------------------------------


class FeatureProvider:
    """Resolves and caches per-branch feature matrices for manifest records.

    ``fbank`` and ``toy`` branches consume log-mel features computed from the
    record's audio (or a precomputed ``features.fbank`` file when present);
    ``file:<name>`` branches load the named SERF file. Every file this
    provider touches is remembered for the run manifest.
    """

    def __init__(self, fbank_cfg: FbankConfig | None = None):
        self.fbank_cfg = fbank_cfg or FbankConfig()
        self._cache: dict[tuple, np.ndarray] = {}
        self.files_read: set[str] = set()

    def _fbank(self, record) -> np.ndarray:
        key = (record.utt_id, "fbank")
        if key not in self._cache:
            if "fbank" in record.features:
                path = record.features["fbank"]
                self.files_read.add(path)
                self._cache[key] = load_features(path, source="fbank").data
            elif record.audio:
                self.files_read.add(record.audio)
                self._cache[key] = log_mel_fbank(read_wav(record.audio), self.fbank_cfg)
            else:
                raise DataError(f"{record.utt_id}: no audio path and no fbank features")
        return self._cache[key]

    def _file(self, record, source: str) -> np.ndarray:
        key = (record.utt_id, source)
        if key not in self._cache:
            if source not in record.features:
                raise DataError(
                    f"{record.utt_id}: manifest has no features.{source} entry")
            path = record.features[source]
            self.files_read.add(path)
            self._cache[key] = load_features(path, source=source).data
        return self._cache[key]

    def branch_features(self, record, spec: BranchSpec) -> np.ndarray:
        if spec.source in ("fbank", "toy"):
            return self._fbank(record)
        return self._file(record, spec.file_source)


# -- per-fold runner ----------------------------------------------------------


@dataclass
class FoldResult:
    metrics: FoldMetrics
    access_log: AccessLog
    history_len: int


def _materialize(records, provider: FeatureProvider, specs, log: AccessLog, split: str):
    X, y = [], []
    for r in records:
        mats = []
        for spec in specs:
            log.record(split, r.utt_id, f"features.{spec.display_name}")
            mats.append(provider.branch_features(r, spec))
        log.record(split, r.utt_id, "label")
        X.append(tuple(mats))
        y.append(r.label_index)
    return X, np.asarray(y, dtype=np.int64)


def fit_fold(config: ExperimentConfig, fold: Fold, provider: FeatureProvider,
             fold_dir) -> tuple[SERClassifier, AccessLog]:
    """Train one fold (train/val only; the test set stays untouched)."""
    specs = config.branch_specs
    log = AccessLog()

    log.phase = "train"
    X_train, y_train = _materialize(fold.train, provider, specs, log, "train")
    X_val, y_val = _materialize(fold.val, provider, specs, log, "val")

    clf = SERClassifier(
        branches=config.branches,
        fusion=config.fusion,
        aggregators=config.aggregators,
        ecapa=config.ecapa,
        epochs=config.train["epochs"],
        batch_size=config.train["batch_size"],
        lr=config.train["lr"],
        seed=config.seed + fold.index,
        checkpoint_every=config.train["checkpoint_every"],
        k_best=config.averaging["k"],
        avg_upstream=config.averaging["upstream"],
        avg_downstream=config.averaging["downstream"],
        checkpoint_dir=str(fold_dir),
        classes=list(range(len(CLASS_NAMES))),
    )
    clf.fit(X_train, y_train, X_val=X_val, y_val=y_val)
    return clf, log


def run_fold(config: ExperimentConfig, fold: Fold, provider: FeatureProvider,
             fold_dir) -> FoldResult:
    specs = config.branch_specs
    clf, log = fit_fold(config, fold, provider, fold_dir)

    log.phase = "final-eval"
    X_test, y_test = _materialize(fold.test, provider, specs, log, "test")
    preds = clf.predict(X_test)

    metrics = FoldMetrics(
        fold=fold.index,
        wacc=wacc(preds, y_test),
        uacc=uacc(preds, y_test, classes=range(len(CLASS_NAMES))),
        confusion=tuple(map(tuple, confusion_matrix(preds, y_test).tolist())),
        n_test=len(y_test),
    )
    return FoldResult(metrics=metrics, access_log=log, history_len=len(clf.history_))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _report_meta(config: ExperimentConfig) -> dict:
    specs = config.branch_specs
    joiner = {"none": "", "early": " + ", "late": " & "}[config.fusion]
    upstream = joiner.join(s.display_name for s in specs) if joiner else specs[0].display_name
    agg = " & ".join(a.upper() if a == "ecapa" else a.capitalize()
                     for a in config.aggregators)
    return {
        "set": config.table.get("set", "-"),
        "num": config.table.get("num", "-"),
        "modality": config.table.get("modality", "S"),
        "upstream": upstream,
        "ft": any(s.trainable for s in specs),
        "avg_upstream": config.averaging["upstream"],
        "aggregator": agg,
        "classifier": "Linear",
        "avg_downstream": config.averaging["downstream"],
    }


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, min(5, int(raw)))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """The full protocol: per fold train/select/average then test, plus report.

    Raises if any fold read test data before its final evaluation; writes
    report.txt, report.json and run_manifest.json under the config's out_dir.
    """
    manifest = load_manifest(config.manifest)
    plan = make_folds(manifest.records, config.seed)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    provider = FeatureProvider()

    def job(fold: Fold) -> FoldResult:
        return run_fold(config, fold, provider, out_dir / f"fold{fold.index}")

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, plan.folds))
    else:
        results = [job(f) for f in plan.folds]

    for res in results:
        bad = res.access_log.test_reads_outside_final_eval()
        if bad:
            raise DataError(
                f"fold {res.metrics.fold}: {len(bad)} test-set reads before final "
                f"evaluation (first: {bad[0]})")

    report = MetricsReport(name=config.name, meta=_report_meta(config),
                           folds=[r.metrics for r in results])
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")

    run_manifest = {
        "engine_version": __version__,
        "experiment": config.name,
        "seed": config.seed,
        "fold_seeds": [config.seed + f.index for f in plan.folds],
        "manifest_path": config.manifest,
        "manifest_sha256": _sha256(config.manifest),
        "excluded_labels": manifest.excluded,
        "config": {
            "branches": config.branches, "fusion": config.fusion,
            "aggregators": config.aggregators, "ecapa": config.ecapa,
            "averaging": config.averaging, "train": config.train,
        },
        "input_files": {p: _sha256(p) for p in sorted(provider.files_read)},
    }
    run_manifest["config_sha256"] = hashlib.sha256(
        json.dumps(run_manifest["config"], sort_keys=True).encode()).hexdigest()
    (out_dir / "run_manifest.json").write_text(json.dumps(run_manifest, indent=2) + "\n")
    return report
