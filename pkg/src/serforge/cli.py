"""Command-line interface.

Subcommands mirror the pipeline stages: ``synth-data`` builds the bundled
synthetic corpus, ``extract`` dumps fbank features, ``train`` fits folds,
``average`` merges explicit checkpoints, ``evaluate`` scores saved models,
and ``run`` executes the whole per-fold protocol and writes the report.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. The
``SER_FORGE_THREADS`` environment variable caps fold-level parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .audio import FbankConfig, log_mel_fbank, read_wav
from .errors import ConfigError, SerForgeError
from .evaluation import (
    CLASS_NAMES,
    AccessLog,
    FoldMetrics,
    MetricsReport,
    confusion_matrix,
    load_manifest,
    make_folds,
    uacc,
    wacc,
)
from .experiment import (
    FeatureProvider,
    _materialize,
    _report_meta,
    fit_fold,
    load_config,
    run_experiment,
)
from .features import write_features
from .model import ModelGraph
from .nn.serc import load_parameters, save_parameters
from .synth import generate_dataset
from .training import Example, average_checkpoints, evaluate_graph


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _apply_overrides(cfg, args):
    if getattr(args, "manifest", None):
        cfg.manifest = str(Path(args.manifest).resolve())
    if getattr(args, "out", None):
        cfg.out_dir = str(Path(args.out).resolve())
    return cfg


def cmd_synth_data(args) -> int:
    summary = generate_dataset(
        args.out, seed=args.seed,
        utts_per_speaker_class=args.utts_per_speaker_class,
        write_pseudo_features=not args.no_pseudo_features)
    print(f"wrote {summary.n_utterances} utterances "
          f"(+{summary.n_excluded} with out-of-scope labels) to {args.out}")
    for label in sorted(summary.per_class):
        print(f"  {label}: {summary.per_class[label]}")
    print(f"manifest: {summary.manifest_path}")
    return 0


def cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = FbankConfig(window_ms=args.window_ms, hop_ms=args.hop_ms, n_mels=args.n_mels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    failures = []
    for record in manifest.records:
        out_path = out_dir / f"{record.utt_id}.serf"
        sidecar = out_dir / f"{record.utt_id}.serf.sha256"
        try:
            if (out_path.exists() and sidecar.exists()
                    and sidecar.read_text().strip() == _sha256_file(out_path)):
                skipped += 1
                continue
            if not record.audio:
                raise SerForgeError("manifest record has no audio path")
            features = log_mel_fbank(read_wav(record.audio), cfg)
            write_features(out_path, features)
            sidecar.write_text(_sha256_file(out_path) + "\n")
            written += 1
        except (SerForgeError, OSError) as exc:
            failures.append((record.utt_id, exc))
    print(f"extract: {written} written, {skipped} skipped, {len(failures)} failed")
    for utt_id, exc in failures:
        print(f"  FAILED {utt_id}: {exc}", file=sys.stderr)
    return 1 if failures else 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    manifest = load_manifest(cfg.manifest)
    plan = make_folds(manifest.records, cfg.seed)
    provider = FeatureProvider()
    out_dir = Path(cfg.out_dir)
    folds = [f for f in plan.folds if args.fold is None or f.index == args.fold]
    if not folds:
        raise ConfigError(f"--fold {args.fold} is not one of 1..5")
    for fold in folds:
        clf, _ = fit_fold(cfg, fold, provider, out_dir / f"fold{fold.index}")
        best = max(r.val_wacc for r in clf.history_) if clf.history_ else float("nan")
        print(f"fold {fold.index}: {len(clf.history_)} checkpoints, "
              f"best val WACC {best:.2f}")
    return 0


def cmd_average(args) -> int:
    averaged = average_checkpoints(args.checkpoints)
    save_parameters(args.out, averaged)
    print(f"averaged {len(args.checkpoints)} checkpoints "
          f"({len(averaged)} tensors) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    manifest = load_manifest(cfg.manifest)
    plan = make_folds(manifest.records, cfg.seed)
    provider = FeatureProvider()
    run_dir = Path(args.run_dir)
    specs = cfg.branch_specs
    fold_metrics = []
    for fold in plan.folds:
        if args.fold is not None and fold.index != args.fold:
            continue
        ckpt = run_dir / f"fold{fold.index}" / "final.serc"
        if not ckpt.exists():
            raise ConfigError(f"no checkpoint at {ckpt}; run train or run first")
        log = AccessLog()
        log.phase = "final-eval"
        X_test, y_test = _materialize(fold.test, provider, specs, log, "test")
        dims = [m.shape[1] for m in X_test[0]]
        graph = ModelGraph(specs, cfg.fusion, cfg.aggregators, dims,
                           n_classes=len(CLASS_NAMES),
                           ecapa=_ecapa_from(cfg), seed=cfg.seed + fold.index)
        graph.load_state(load_parameters(ckpt))
        examples = [Example(utt_id=f"t{i}", inputs=x, label=int(y))
                    for i, (x, y) in enumerate(zip(X_test, y_test))]
        _, _, preds = evaluate_graph(graph, examples)
        fold_metrics.append(FoldMetrics(
            fold=fold.index,
            wacc=wacc(preds, y_test),
            uacc=uacc(preds, y_test, classes=range(len(CLASS_NAMES))),
            confusion=tuple(map(tuple, confusion_matrix(preds, y_test).tolist())),
            n_test=len(y_test)))
    report = MetricsReport(name=cfg.name, meta=_report_meta(cfg), folds=fold_metrics)
    print(report.to_text())
    (run_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return 0


def _ecapa_from(cfg):
    if cfg.ecapa is None:
        return None
    from .downstream import EcapaConfig

    overrides = dict(cfg.ecapa)
    for key in ("kernel_sizes", "dilations"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    return EcapaConfig(**overrides)


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    report = run_experiment(cfg)
    print(report.to_text())
    print(f"artifacts in {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serforge",
        description="speech emotion recognition pipeline: extract, train, average, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic 4-class corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utts-per-speaker-class", type=int, default=5)
    p.add_argument("--no-pseudo-features", action="store_true",
                   help="skip the stand-in w2v2/hubert/bert feature files")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("extract", help="write fbank features as SERF files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--n-mels", type=int, default=40)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train folds from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--manifest", default=None, help="override the config manifest path")
    p.add_argument("--out", default=None, help="override the config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("average", help="average explicit SERC checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("checkpoints", nargs="+")
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("evaluate", help="score saved fold checkpoints on test sets")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full per-fold protocol: train, average, test, report")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", default=None, help="override the config manifest path")
    p.add_argument("--out", default=None, help="override the config out_dir")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SerForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
