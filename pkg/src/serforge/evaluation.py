"""Dataset manifests, leave-one-session-out folds, and accuracy metrics.

A manifest is one JSON object per line with fields ``utt_id``, ``session``
(1..5), ``speaker``, ``label``, and optionally ``audio``, ``transcript`` and
``features`` (a mapping from source name to a SERF path). Labels are
canonicalized on load: ``excited`` merges into ``happy``; anything outside
the accepted label set is dropped and counted.

Fold k tests on all session-k utterances; the remaining sessions are split
80/20 into train/validation with a recorded seed. Reported metrics are
weighted accuracy (overall fraction correct) and unweighted accuracy (mean
of per-class recalls).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

CLASS_NAMES = ("angry", "happy", "neutral", "sad")
ACCEPTED_RAW_LABELS = ("angry", "happy", "excited", "sad", "neutral")
LABEL_MERGES = {"excited": "happy"}
SESSIONS = (1, 2, 3, 4, 5)


def canonical_label(raw: str) -> str | None:
    """Map a raw label to its canonical class, or None if excluded."""
    label = LABEL_MERGES.get(raw, raw)
    return label if label in CLASS_NAMES else None


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    session: int
    speaker: str
    label: str
    audio: str | None = None
    transcript: str | None = None
    features: dict = field(default_factory=dict)

    @property
    def label_index(self) -> int:
        return CLASS_NAMES.index(self.label)


@dataclass
class Manifest:
    path: str
    records: list
    excluded: dict

    @property
    def num_excluded(self) -> int:
        return sum(self.excluded.values())


def load_manifest(path) -> Manifest:
    """Parse a JSONL manifest, canonicalizing labels and resolving paths."""
    path = Path(path)
    base = path.parent
    records = []
    excluded: dict[str, int] = {}
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if not isinstance(row, dict):
                raise FormatError(f"{path}:{lineno}: record must be a JSON object")
            missing = [k for k in ("utt_id", "session", "speaker", "label") if k not in row]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing fields {missing}")
            session = row["session"]
            if not isinstance(session, int) or session not in SESSIONS:
                raise DataError(
                    f"{path}:{lineno}: session must be an integer in 1..5, got {session!r}")
            raw_label = str(row["label"])
            label = canonical_label(raw_label)
            if label is None:
                excluded[raw_label] = excluded.get(raw_label, 0) + 1
                continue
            utt_id = str(row["utt_id"])
            if utt_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            feats = row.get("features", {})
            if not isinstance(feats, dict):
                raise FormatError(f"{path}:{lineno}: 'features' must be an object")
            records.append(UtteranceRecord(
                utt_id=utt_id,
                session=session,
                speaker=str(row["speaker"]),
                label=label,
                audio=str(base / row["audio"]) if row.get("audio") else None,
                transcript=row.get("transcript"),
                features={k: str(base / v) for k, v in feats.items()},
            ))
    return Manifest(path=str(path), records=records, excluded=excluded)


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    folds: tuple


def make_folds(records, seed: int) -> FoldPlan:
    """Leave-one-session-out 5-fold plan with a seeded 80/20 train/val split."""
    by_session: dict[int, list] = {s: [] for s in SESSIONS}
    for r in records:
        by_session[r.session].append(r)
    empty = [s for s in SESSIONS if not by_session[s]]
    if empty:
        raise DataError(f"sessions {empty} have zero utterances; need all 5 for "
                        f"leave-one-session-out folds")
    folds = []
    for k in SESSIONS:
        test = tuple(by_session[k])
        rest = [r for s in SESSIONS if s != k for r in by_session[s]]
        rng = np.random.default_rng([seed, k])
        order = rng.permutation(len(rest))
        n_train = int(np.floor(0.8 * len(rest) + 0.5))
        train = tuple(rest[i] for i in order[:n_train])
        val = tuple(rest[i] for i in order[n_train:])
        if not val:
            raise DataError(f"fold {k}: 80/20 split left an empty validation set "
                            f"({len(rest)} non-test utterances)")
        folds.append(Fold(index=k, train=train, val=val, test=test))
    return FoldPlan(seed=seed, folds=tuple(folds))


# -- metrics ----------------------------------------------------------------


def _check_pred_labels(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or labels.size == 0:
        raise DataError("metrics need at least one prediction/label pair")
    if predictions.shape != labels.shape:
        raise DataError(
            f"predictions and labels differ in length: {predictions.shape} vs {labels.shape}")
    return predictions, labels


def wacc(predictions, labels) -> float:
    """Weighted accuracy: percent of correct predictions.

    Computed as 100 * correct / total in that order, so the result is
    bit-identical to a counting loop.
    """
    predictions, labels = _check_pred_labels(predictions, labels)
    correct = int(np.sum(predictions == labels))
    return 100.0 * correct / labels.size


def uacc(predictions, labels, classes=None) -> float:
    """Unweighted accuracy: mean per-class recall, in percent.

    Classes with no examples in ``labels`` are excluded from the mean (with a
    warning when an explicit class list requested them).
    """
    predictions, labels = _check_pred_labels(predictions, labels)
    if classes is None:
        classes = np.unique(labels)
    recalls = []
    for c in classes:
        sel = labels == c
        total = int(np.sum(sel))
        if total == 0:
            warnings.warn(f"class {c!r} has no examples; excluded from unweighted accuracy")
            continue
        recalls.append(int(np.sum(predictions[sel] == c)) / total)
    if not recalls:
        raise DataError("no class had any examples")
    return 100.0 * sum(recalls) / len(recalls)


def confusion_matrix(predictions, labels, n_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Counts indexed [true, predicted]."""
    predictions, labels = _check_pred_labels(predictions, labels)
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels.astype(int), predictions.astype(int)):
        out[t, p] += 1
    return out


# -- report -----------------------------------------------------------------


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    wacc: float
    uacc: float
    confusion: tuple
    n_test: int


@dataclass
class MetricsReport:
    """Per-fold and averaged accuracies for one experiment configuration."""

    name: str
    meta: dict
    folds: list

    @property
    def wacc(self) -> float:
        return float(np.mean([f.wacc for f in self.folds]))

    @property
    def uacc(self) -> float:
        return float(np.mean([f.uacc for f in self.folds]))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "meta": dict(self.meta),
            "folds": [{
                "fold": f.fold,
                "wacc": f.wacc,
                "uacc": f.uacc,
                "n_test": f.n_test,
                "confusion": [list(map(int, row)) for row in f.confusion],
            } for f in self.folds],
            "wacc": self.wacc,
            "uacc": self.uacc,
        }

    def to_text(self) -> str:
        m = self.meta
        header = ["Set", "#", "Modality", "Upstream", "FT", "AVG",
                  "AGG", "Classifier", "AVG", "WACC", "UACC"]
        row = [str(m.get("set", "-")), str(m.get("num", "-")),
               str(m.get("modality", "S")), str(m.get("upstream", "-")),
               _yn(m.get("ft")), _yn(m.get("avg_upstream")),
               str(m.get("aggregator", "-")), str(m.get("classifier", "Linear")),
               _yn(m.get("avg_downstream")),
               f"{self.wacc:.2f}", f"{self.uacc:.2f}"]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        lines = [
            f"experiment: {self.name}",
            "  ".join(h.ljust(w) for h, w in zip(header, widths)),
            "  ".join(r.ljust(w) for r, w in zip(row, widths)),
            "",
            "per-fold results:",
        ]
        for f in self.folds:
            lines.append(f"  fold {f.fold}: WACC {f.wacc:6.2f}  UACC {f.uacc:6.2f}"
                         f"  (n={f.n_test})")
            for true_idx, row_counts in enumerate(f.confusion):
                counts = " ".join(f"{c:4d}" for c in row_counts)
                lines.append(f"    {CLASS_NAMES[true_idx]:>8} | {counts}")
        lines.append("")
        lines.append(f"average: WACC {self.wacc:.2f}  UACC {self.uacc:.2f}")
        return "\n".join(lines) + "\n"


def _yn(flag) -> str:
    if flag is None:
        return "-"
    return "yes" if flag else "no"


# -- access instrumentation -------------------------------------------------


@dataclass(frozen=True)
class AccessEvent:
    phase: str
    split: str
    utt_id: str
    what: str


class AccessLog:
    """Records every dataset read, tagged with the pipeline phase.

    The evaluator materializes test features and labels only after training,
    selection and averaging are done; this log is the evidence.
    """

    def __init__(self):
        self.events: list[AccessEvent] = []
        self.phase = "setup"

    def record(self, split: str, utt_id: str, what: str) -> None:
        self.events.append(AccessEvent(self.phase, split, utt_id, what))

    def test_reads_outside_final_eval(self) -> list[AccessEvent]:
        return [e for e in self.events if e.split == "test" and e.phase != "final-eval"]
