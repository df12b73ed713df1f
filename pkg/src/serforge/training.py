"""Joint training, checkpoint selection and weight averaging.

One trainer owns one graph. Every ``checkpoint_every`` epochs the full model
state (weights plus batchnorm running statistics) is written as a SERC file
together with its validation accuracy. After training, the k checkpoints
with the best validation accuracy are averaged elementwise; the upstream and
downstream halves of the model can be averaged independently, with the
non-averaged half taken from the single best checkpoint.

Only the training and validation sets are ever read here; final test
evaluation happens in the evaluator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, TrainingError
from .model import ModelGraph
from .nn.functional import cross_entropy
from .nn.optim import Adam
from .nn.params import Parameter, ParameterSet
from .nn.serc import load_parameters, save_parameters

HISTORY_FILE = "history.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1
    k_best: int = 5
    train_upstream: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.k_best < 1:
            raise ConfigError(f"k_best must be >= 1, got {self.k_best}")

    @property
    def num_checkpoints(self) -> int:
        return self.epochs // self.checkpoint_every


@dataclass(frozen=True)
class CheckpointRecord:
    path: str
    epoch: int
    val_wacc: float
    val_loss: float

    def __post_init__(self):
        if not 0.0 <= self.val_wacc <= 100.0:
            raise ConfigError(f"validation accuracy {self.val_wacc} outside [0, 100]")


@dataclass(frozen=True)
class Example:
    """One training item: per-branch feature matrices and an integer label."""

    utt_id: str
    inputs: tuple
    label: int

    @property
    def length(self) -> int:
        return max(x.shape[0] for x in self.inputs)


def make_batches(examples, batch_size: int, rng: np.random.Generator | None = None):
    """Length-sorted bucketing: similar lengths share a batch, batch order shuffled."""
    order = sorted(range(len(examples)), key=lambda i: (examples[i].length, i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        rng.shuffle(batches)
    return batches


def collate(examples, idxs, n_branches: int, dtype=np.float32):
    """Pad a batch with zeros; returns per-branch (features, lengths) pairs."""
    inputs = []
    for b in range(n_branches):
        mats = [examples[i].inputs[b] for i in idxs]
        lengths = np.array([m.shape[0] for m in mats], dtype=np.int64)
        t_max = int(lengths.max())
        x = np.zeros((len(idxs), t_max, mats[0].shape[1]), dtype=dtype)
        for row, m in enumerate(mats):
            x[row, :m.shape[0]] = m
        inputs.append((x, lengths))
    labels = np.array([examples[i].label for i in idxs], dtype=np.int64)
    return inputs, labels


def evaluate_graph(graph: ModelGraph, dataset, batch_size: int = 16):
    """Eval-mode pass over a dataset: (wacc percent, mean loss, predictions)."""
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    n_branches = len(graph.branches)
    preds = np.zeros(len(dataset), dtype=np.int64)
    loss_sum = 0.0
    for batch in make_batches(dataset, batch_size):
        inputs, labels = collate(dataset, batch, n_branches, dtype=graph.dtype)
        logits = graph.forward(inputs, training=False)
        loss, _ = cross_entropy(logits, labels)
        loss_sum += loss * len(batch)
        preds[np.asarray(batch)] = np.argmax(logits, axis=1)
    labels_all = np.array([e.label for e in dataset], dtype=np.int64)
    wacc = 100.0 * float(np.mean(preds == labels_all))
    return wacc, loss_sum / len(dataset), preds


def train(graph: ModelGraph, train_set, val_set, cfg: TrainConfig,
          out_dir) -> list[CheckpointRecord]:
    """Run the optimization loop, checkpointing every ``checkpoint_every`` epochs.

    Deterministic for a fixed seed. The test set must not be passed here; the
    loop only ever touches the training and validation sets.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    if cfg.num_checkpoints > 0 and not val_set:
        raise ConfigError("validation set is empty but checkpoints need validation accuracy")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / HISTORY_FILE

    optimizer = Adam(graph.parameter_set(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 17])
    n_branches = len(graph.branches)
    history: list[CheckpointRecord] = []

    with open(history_path, "w") as hist:
        for epoch in range(1, cfg.epochs + 1):
            for batch in make_batches(train_set, cfg.batch_size, shuffle_rng):
                inputs, labels = collate(train_set, batch, n_branches, dtype=graph.dtype)
                logits = graph.forward(inputs, training=True)
                loss, dlogits = cross_entropy(logits, labels)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                optimizer.zero_grad()
                graph.backward(dlogits)
                optimizer.step()

            if epoch % cfg.checkpoint_every == 0:
                val_wacc, val_loss, _ = evaluate_graph(graph, val_set)
                path = out_dir / f"epoch{epoch:04d}.serc"
                save_parameters(path, graph.parameter_set())
                record = CheckpointRecord(path=str(path), epoch=epoch,
                                          val_wacc=val_wacc, val_loss=val_loss)
                history.append(record)
                hist.write(json.dumps({
                    "epoch": epoch,
                    "val_wacc": val_wacc,
                    "val_loss": val_loss,
                    "path": path.name,
                }) + "\n")
                hist.flush()
    return history


def select_best_checkpoints(history, k: int) -> list[CheckpointRecord]:
    """Top-k by validation accuracy; ties broken by lower loss, then earlier epoch."""
    if len(history) < k:
        raise ConfigError(
            f"need at least {k} checkpoints to select from, history has {len(history)}")
    ranked = sorted(history, key=lambda r: (-r.val_wacc, r.val_loss, r.epoch))
    return ranked[:k]


def average_checkpoints(paths) -> ParameterSet:
    """Elementwise mean of every tensor across checkpoints.

    Batchnorm running statistics are averaged along with the weights — a
    checkpoint's eval-mode behavior is part of what gets averaged. The per
    element summands are sorted before adding, so the result is bit-exact
    under any permutation of the input paths.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ConfigError("no checkpoint paths given to average")
    sets = [load_parameters(p) for p in paths]
    names = sets[0].names()
    for p, other in zip(paths[1:], sets[1:]):
        if other.names() != names:
            missing = set(names).symmetric_difference(other.names())
            raise FormatError(
                f"{p}: tensor names differ from {paths[0]}: {sorted(missing)[:5]}")
    out = ParameterSet()
    for name in names:
        shapes = {s[name].value.shape for s in sets}
        if len(shapes) > 1:
            raise FormatError(f"tensor {name!r} has mismatched shapes across "
                              f"checkpoints: {sorted(shapes)}")
        stacked = np.stack([s[name].value.astype(np.float64) for s in sets])
        stacked.sort(axis=0)
        mean = stacked.sum(axis=0) / len(sets)
        out.add(Parameter(mean.astype(np.float32), name=name))
    return out


def assemble_final_state(history, k: int, avg_upstream: bool,
                         avg_downstream: bool) -> dict[str, np.ndarray]:
    """Final model values: best checkpoint, with averaged halves overlaid.

    The non-averaged half always comes from the single best checkpoint, so a
    run with both flags off reduces to plain best-checkpoint selection.
    """
    best = select_best_checkpoints(history, k if (avg_upstream or avg_downstream) else 1)
    base = load_parameters(best[0].path)
    values = {name: p.value.copy() for name, p in base.items()}
    if avg_upstream or avg_downstream:
        averaged = average_checkpoints([r.path for r in best])
        for name, p in averaged.items():
            is_up = name.startswith("upstream.")
            if (is_up and avg_upstream) or (not is_up and avg_downstream):
                values[name] = p.value.copy()
    return values


def finetune_and_average(graph: ModelGraph, train_set, val_set, cfg: TrainConfig,
                         avg_upstream: bool, avg_downstream: bool, out_dir):
    """train -> select best k -> average, writing final.serc in ``out_dir``."""
    out_dir = Path(out_dir)
    history = train(graph, train_set, val_set, cfg, out_dir)
    if history:
        values = assemble_final_state(history, cfg.k_best, avg_upstream, avg_downstream)
        graph.parameter_set().load_values(values)
    elif avg_upstream or avg_downstream:
        raise ConfigError("checkpoint averaging requested but no checkpoints were written")
    save_parameters(out_dir / "final.serc", graph.parameter_set())
    return history
