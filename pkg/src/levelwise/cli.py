"""Command-line entry point: gen-data, train, evaluate, analyze, augment.

One root --seed drives every random choice through named sub-streams
(model init, data order, dropout), so any run directory can be rebuilt
byte-for-byte from its run_config.ini in single-threaded mode. Errors
print a single `error[<code>]: message` line on stderr and exit 1;
argument parsing errors exit 2 via argparse.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import shutil
import sys
from pathlib import Path

from . import checkpoint, evaluation, exits, introspection, training
from .data import (
    DataError,
    SyntheticSpec,
    Vocabulary,
    generate_synthetic,
    load_corpus,
    normalize,
    prepare_documents,
)
from .encoder import ConfigError, ModelConfig, TransformerEncoder
from .evaluation import EvaluationError
from .exits import WiringError
from .hierarchy import (
    HierarchyError,
    LevelIndex,
    augment,
    level_weights,
    load_hierarchy,
)
from .introspection import REDUCTION_ALL, REDUCTIONS, IntrospectionError
from .training import TrainConfig, TrainingDiverged, TrainingError

ANNOTATIONS_HEADER = "#annotations-v1\tdoc\tlabels"

_MODEL_KEYS = {
    "num_layers": int,
    "hidden_size": int,
    "num_heads": int,
    "feed_forward_size": int,
    "max_sequence_length": int,
    "dropout_rate": float,
}
_TRAIN_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "min_delta": float,
}


class CliError(ValueError):
    pass


_ERROR_CODES = (
    (CliError, "usage"),
    (HierarchyError, "hierarchy"),
    (DataError, "data"),
    (WiringError, "wiring"),
    (checkpoint.CheckpointError, "checkpoint"),
    (TrainingDiverged, "diverged"),
    (TrainingError, "training"),
    (EvaluationError, "evaluation"),
    (IntrospectionError, "introspection"),
    (ConfigError, "config"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "invalid"),
)
_HANDLED = tuple(cls for cls, _ in _ERROR_CODES)


def _error_line(exc):
    code = next(c for cls, c in _ERROR_CODES if isinstance(exc, cls))
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"error[{code}]: {message}"


def _claim_out_dir(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(
            f"output directory {out} is not empty (pass --force to reuse)"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out_dir, command, sections):
    config = configparser.ConfigParser()
    config["run"] = {"command": command, **sections.get("run", {})}
    for name, mapping in sections.items():
        if name == "run":
            continue
        config[name] = {key: str(value) for key, value in mapping.items()}
    with open(out_dir / "run_config.ini", "w", encoding="utf-8") as handle:
        config.write(handle)


def _read_settings_file(path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise CliError(f"config file {path} not found")
    return parser


def _resolve_section(parser, section, keys, args):
    """defaults < config-file section < explicit flags, with typed casts."""
    resolved = dict(keys["defaults"])
    if parser is not None and parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in resolved:
                raise CliError(f"unknown [{section}] key {key!r}")
            try:
                resolved[key] = keys["casts"][key](raw)
            except ValueError:
                raise CliError(
                    f"bad value for [{section}] {key}: {raw!r}"
                ) from None
    for key in resolved:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _resolve_model_train(args):
    parser = _read_settings_file(args.config) if args.config else None
    model = _resolve_section(
        parser, "model",
        {"defaults": {k: getattr(ModelConfig, k) for k in _MODEL_KEYS},
         "casts": _MODEL_KEYS},
        args,
    )
    train = _resolve_section(
        parser, "train",
        {"defaults": {k: getattr(TrainConfig, k) for k in _TRAIN_KEYS},
         "casts": _TRAIN_KEYS},
        args,
    )
    return model, train


def _corpus_split_path(corpus, split):
    path = Path(corpus)
    if path.is_dir():
        return path / f"{split}.tsv"
    return path


def cmd_gen_data(args):
    out = _claim_out_dir(args.out, args.force)
    spec = SyntheticSpec(
        depth=args.depth, branching=args.branching, docs=args.docs,
        noise_rate=args.noise, noise_vocab=args.noise_vocab,
        signature_size=args.signature_size, seed=args.seed,
    )
    spec.validate()
    summary = generate_synthetic(spec, out)
    _write_run_config(out, "gen-data", {
        "run": {"seed": str(args.seed)},
        "synthetic": {
            key: getattr(spec, key)
            for key in ("depth", "branching", "docs", "noise_rate",
                        "noise_vocab", "signature_size", "seed")
        },
    })
    print(
        f"hierarchy: {summary['labels']} labels, depth {summary['depth']}"
        f" -> {summary['hierarchy']}"
    )
    for name in ("train", "dev", "test"):
        info = summary["splits"][name]
        print(f"{name}: {info['docs']} documents -> {info['path']}")
    return 0


def _build_wiring_from_args(args, num_layers, depth):
    custom_map = None
    if args.scheme == exits.CUSTOM:
        if not args.wiring:
            raise CliError("--scheme custom requires --wiring FILE")
        custom_map = exits.load_wiring_map(args.wiring)
    elif args.wiring:
        raise CliError("--wiring only applies to --scheme custom")
    wiring = exits.build_wiring(
        args.scheme, num_layers, depth, custom_map=custom_map
    )
    return wiring, custom_map


def cmd_train(args):
    out = _claim_out_dir(args.out, args.force)
    hierarchy = load_hierarchy(args.hierarchy)
    index = LevelIndex(hierarchy)
    train_path = _corpus_split_path(args.corpus, "train")
    if args.dev_corpus:
        dev_path = Path(args.dev_corpus)
    elif Path(args.corpus).is_dir():
        dev_path = _corpus_split_path(args.corpus, "dev")
    else:
        raise CliError("pass --dev-corpus when --corpus is a single file")
    train_docs = load_corpus(train_path)
    dev_docs = load_corpus(dev_path)

    model_keys, train_keys = _resolve_model_train(args)
    vocab = Vocabulary.build(
        [normalize(doc.text) for doc in train_docs], min_count=args.min_count
    )
    model_config = ModelConfig(
        vocabulary_size=len(vocab), seed=args.seed, **model_keys
    )
    model_config.validate()
    train_config = TrainConfig(seed=args.seed, **train_keys).validate()

    max_len = model_config.max_sequence_length
    prepare_documents(train_docs, vocab, hierarchy, max_len, index=index)
    prepare_documents(dev_docs, vocab, hierarchy, max_len, index=index)

    wiring, custom_map = _build_wiring_from_args(
        args, model_config.num_layers, hierarchy.depth
    )
    weights = None if wiring.is_flat else level_weights(hierarchy).as_floats()

    if args.grid:
        grid = training.grid_search(
            model_config, args.scheme, custom_map, index, weights,
            train_docs, dev_docs, train_config,
            learning_rates=args.grid_learning_rates,
            dropout_rates=args.grid_dropout_rates,
            jobs=args.jobs,
        )
        (out / "grid.tsv").write_text(
            training.grid_table(grid), encoding="utf-8"
        )
        best = grid.best
        model_config = dataclasses.replace(
            model_config, dropout_rate=best["dropout_rate"]
        )
        train_config = dataclasses.replace(
            train_config, learning_rate=best["learning_rate"]
        )
        print(
            f"grid: best lr {best['learning_rate']!r}, "
            f"dropout {best['dropout_rate']!r}, "
            f"dev loss {best['best_dev_loss']:.6f}"
        )

    encoder = TransformerEncoder(model_config)
    heads = exits.create_heads(
        wiring, index, model_config.hidden_size, seed=args.seed
    )
    result = training.train(
        encoder, heads, wiring, train_docs, dev_docs, weights, train_config,
        pad_id=vocab.pad_id, log_path=out / "train_log.jsonl",
    )

    vocab.save(out / "vocab.txt")
    if Path(args.hierarchy).resolve() != (out / "hierarchy.tsv").resolve():
        shutil.copyfile(args.hierarchy, out / "hierarchy.tsv")
    checkpoint.save_model(
        out / "model.ckpt", encoder, heads, wiring,
        extra={
            "scheme": args.scheme,
            "best_epoch": result.best_epoch,
            "best_dev_loss": result.best_dev_loss,
            "epochs_run": len(result.history),
            "stopped_early": result.stopped_early,
            "level_weights": list(weights) if weights else None,
        },
    )
    _write_run_config(out, "train", {
        "run": {
            "seed": str(args.seed), "scheme": args.scheme,
            "corpus": str(args.corpus), "hierarchy": str(args.hierarchy),
            "dev_corpus": str(dev_path), "min_count": str(args.min_count),
            "grid": str(args.grid), "jobs": str(args.jobs),
        },
        "model": {**model_keys,
                  "dropout_rate": model_config.dropout_rate,
                  "vocabulary_size": len(vocab)},
        "train": {**train_keys,
                  "learning_rate": train_config.learning_rate},
    })
    print(
        f"trained {args.scheme} for {len(result.history)} epochs; "
        f"best dev loss {result.best_dev_loss:.6f} at epoch "
        f"{result.best_epoch}"
        + (" (stopped early)" if result.stopped_early else "")
    )
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def _locate_checkpoint(path):
    candidate = Path(path)
    if candidate.is_dir():
        run_dir, ckpt = candidate, candidate / "model.ckpt"
    else:
        run_dir, ckpt = candidate.parent, candidate
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found")
    return ckpt, run_dir


def _load_run(args):
    ckpt, run_dir = _locate_checkpoint(args.checkpoint)
    encoder, heads, wiring, extra = checkpoint.load_model(ckpt)
    vocab_path = args.vocab or run_dir / "vocab.txt"
    hierarchy_path = args.hierarchy or run_dir / "hierarchy.tsv"
    vocab = Vocabulary.load(vocab_path)
    hierarchy = load_hierarchy(hierarchy_path)
    return ckpt, encoder, heads, wiring, extra, vocab, hierarchy


def _prepared_split(args, vocab, hierarchy, encoder, index, sort_by_id=False):
    docs = load_corpus(args.corpus_split)
    if sort_by_id:
        docs = sorted(docs, key=lambda d: d.doc_id)
    prepare_documents(
        docs, vocab, hierarchy, encoder.config.max_sequence_length,
        index=index,
    )
    return docs


def _columnar_report(report):
    headers = [f"level-{n}" for n in range(1, report.depth + 1)]
    headers += ["Micro", "Macro"]
    values = list(report.level_values) + [report.micro, report.macro]
    cells = ["n/a" if v is None else f"{v:.4f}" for v in values]
    return "\t".join(headers) + "\n" + "\t".join(cells) + "\n"


def cmd_evaluate(args):
    out = _claim_out_dir(args.out, args.force)
    ckpt, encoder, heads, wiring, _, vocab, hierarchy = _load_run(args)
    index = LevelIndex(hierarchy)
    docs = _prepared_split(args, vocab, hierarchy, encoder, index)
    records = evaluation.score_documents(
        encoder, heads, wiring, docs, index,
        batch_size=args.batch_size, pad_id=vocab.pad_id,
    )
    report = evaluation.per_level_eval(records, docs, index)
    evaluation.save_predictions(records, index, out / "predictions.tsv")
    text = evaluation.report_text(report)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.tsv").write_text(_columnar_report(report), encoding="utf-8")
    _write_run_config(out, "evaluate", {
        "run": {
            "seed": str(encoder.config.seed), "checkpoint": str(ckpt),
            "corpus_split": str(args.corpus_split),
            "batch_size": str(args.batch_size),
        },
    })
    print(text, end="")
    return 0


def _comparison_text(report, baseline_report):
    this_value = report.mean_off_diagonal_angular
    base_value = baseline_report.mean_off_diagonal_angular
    verdict = "yes" if this_value > base_value else "no"
    return (
        f"# cls angular comparison (reduction: {report.reduction}, "
        f"documents: {report.documents})\n"
        "checkpoint\tmean_off_diagonal_cls_angular\n"
        f"this\t{this_value!r}\n"
        f"baseline\t{base_value!r}\n"
        f"exceeds_baseline\t{verdict}\n"
    )


def cmd_analyze(args):
    out = _claim_out_dir(args.out, args.force)
    ckpt, encoder, heads, wiring, _, vocab, hierarchy = _load_run(args)
    index = LevelIndex(hierarchy)
    docs = _prepared_split(
        args, vocab, hierarchy, encoder, index, sort_by_id=True
    )
    snapshot, profiles = introspection.collect_analysis(
        encoder, docs, batch_size=args.batch_size, pad_id=vocab.pad_id,
        reduction=args.reduction,
    )
    report = introspection.build_utilization_report(snapshot, profiles)
    introspection.emit_report(report, out)
    introspection.save_snapshot(
        out / "analysis.snap", snapshot, profiles,
        extra={"checkpoint": str(args.checkpoint)},
    )
    lines = [
        f"analyzed {report.documents} documents over "
        f"{report.num_layers} layers (reduction: {report.reduction})",
        "mean off-diagonal cls angular distance: "
        f"{report.mean_off_diagonal_angular!r}",
    ]
    if args.compare_to:
        baseline = argparse.Namespace(
            checkpoint=args.compare_to, vocab=None, hierarchy=None,
            corpus_split=args.corpus_split,
        )
        _, benc, bheads, bwiring, _, bvocab, bhier = _load_run(baseline)
        bindex = LevelIndex(bhier)
        bdocs = _prepared_split(
            baseline, bvocab, bhier, benc, bindex, sort_by_id=True
        )
        bsnap, bprof = introspection.collect_analysis(
            benc, bdocs, batch_size=args.batch_size, pad_id=bvocab.pad_id,
            reduction=args.reduction,
        )
        breport = introspection.build_utilization_report(bsnap, bprof)
        comparison = _comparison_text(report, breport)
        (out / "comparison.txt").write_text(comparison, encoding="utf-8")
        lines.append(comparison.rstrip("\n"))
    _write_run_config(out, "analyze", {
        "run": {
            "seed": str(encoder.config.seed), "checkpoint": str(ckpt),
            "corpus_split": str(args.corpus_split),
            "reduction": args.reduction,
            "batch_size": str(args.batch_size),
            "compare_to": str(args.compare_to) if args.compare_to else "",
        },
    })
    print("\n".join(lines))
    return 0


def _read_annotations(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"annotations file {path} not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ANNOTATIONS_HEADER:
        raise DataError(f"{path}: unrecognized header")
    rows = []
    seen = set()
    for number, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{number}: expected 2 fields")
        doc_id, label_text = fields
        if doc_id in seen:
            raise DataError(f"{path}:{number}: duplicate document {doc_id!r}")
        seen.add(doc_id)
        labels = frozenset(x for x in label_text.split(",") if x)
        rows.append((doc_id, labels))
    return rows


def cmd_augment(args):
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"output file {out} exists (pass --force to replace)")
    hierarchy = load_hierarchy(args.hierarchy)
    rows = _read_annotations(args.labels_in)
    lines = [ANNOTATIONS_HEADER]
    for doc_id, labels in rows:
        try:
            closed = augment(hierarchy, labels)
        except HierarchyError as exc:
            raise HierarchyError(f"document {doc_id}: {exc}") from None
        lines.append(f"{doc_id}\t{','.join(sorted(closed))}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"augmented {len(rows)} documents -> {out}")
    return 0


def _float_list(text):
    try:
        values = tuple(float(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_model_flags(parser):
    parser.add_argument("--num-layers", type=int, default=None)
    parser.add_argument("--hidden-size", type=int, default=None)
    parser.add_argument("--num-heads", type=int, default=None)
    parser.add_argument("--feed-forward-size", type=int, default=None)
    parser.add_argument(
        "--max-seq-len", type=int, default=None, dest="max_sequence_length"
    )
    parser.add_argument(
        "--dropout", type=float, default=None, dest="dropout_rate"
    )


def _add_train_flags(parser):
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--max-epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--min-delta", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="levelwise",
        description=(
            "Hierarchy-wired multi-exit transformer classification: "
            "generate corpora, train, evaluate, and analyze models."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser(
        "gen-data", help="write a synthetic corpus and its label hierarchy"
    )
    gen.add_argument("--out", required=True)
    gen.add_argument("--depth", type=int, default=SyntheticSpec.depth)
    gen.add_argument("--branching", type=int, default=SyntheticSpec.branching)
    gen.add_argument("--docs", type=int, default=SyntheticSpec.docs)
    gen.add_argument("--noise", type=float, default=SyntheticSpec.noise_rate)
    gen.add_argument(
        "--noise-vocab", type=int, default=SyntheticSpec.noise_vocab
    )
    gen.add_argument(
        "--signature-size", type=int, default=SyntheticSpec.signature_size
    )
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser(
        "train", help="fit exit heads and encoder on a corpus"
    )
    train.add_argument("--corpus", required=True,
                       help="gen-data directory or a train-split file")
    train.add_argument("--dev-corpus", default=None)
    train.add_argument("--hierarchy", required=True)
    train.add_argument(
        "--scheme", choices=exits.ALL_SCHEMES, default=exits.LAST_SIX
    )
    train.add_argument("--wiring", default=None,
                       help="wiring map file for --scheme custom")
    train.add_argument("--config", default=None,
                       help="INI file with [model] and [train] sections")
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--min-count", type=int, default=1)
    train.add_argument("--grid", action="store_true",
                       help="grid-search learning rate and dropout first")
    train.add_argument(
        "--grid-learning-rates", type=_float_list,
        default=training.GRID_LEARNING_RATES,
    )
    train.add_argument(
        "--grid-dropout-rates", type=_float_list,
        default=training.GRID_DROPOUT_RATES,
    )
    train.add_argument("--jobs", type=int, default=1)
    train.add_argument("--force", action="store_true")
    _add_model_flags(train)
    _add_train_flags(train)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a split and report R-Precision")
    ev.add_argument("--checkpoint", required=True,
                    help="run directory or model.ckpt file")
    ev.add_argument("--corpus-split", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--batch-size", type=int, default=8)
    ev.add_argument("--vocab", default=None)
    ev.add_argument("--hierarchy", default=None)
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_evaluate)

    an = sub.add_parser(
        "analyze", help="report CLS geometry and attention utilization"
    )
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--corpus-split", required=True)
    an.add_argument("--out", required=True)
    an.add_argument(
        "--reduction", choices=REDUCTIONS, default=REDUCTION_ALL
    )
    an.add_argument("--batch-size", type=int, default=8)
    an.add_argument("--compare-to", default=None,
                    help="second checkpoint for an angular-distance comparison")
    an.add_argument("--vocab", default=None)
    an.add_argument("--hierarchy", default=None)
    an.add_argument("--force", action="store_true")
    an.set_defaults(func=cmd_analyze)

    aug = sub.add_parser(
        "augment", help="close annotation label sets over ancestors"
    )
    aug.add_argument("--hierarchy", required=True)
    aug.add_argument("--labels-in", required=True)
    aug.add_argument("--out", required=True)
    aug.add_argument("--force", action="store_true")
    aug.set_defaults(func=cmd_augment)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _HANDLED as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
