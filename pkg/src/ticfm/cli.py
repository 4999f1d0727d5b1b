"""Command-line entry point: ``ticfm <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import theory, training
from .config import ModelConfig, init_params
from .errors import ConfigurationError, TicfmError
from .estimator import TICFMClassifier
from .evaluation import (
    DEFAULT_FRACTIONS,
    DEFAULT_MULTIPLIERS,
    PROTOCOLS,
    BaselineClassifier,
    evaluate,
    load_dataset,
    load_ucr_directory,
    stratified_split,
)
from .model_io import load_checkpoint, save_checkpoint


def read_config(path) -> ModelConfig:
    """``small``/``full`` preset, or a file of ``key=value`` lines (``preset=small`` allowed)."""
    if path in (None, "small"):
        return ModelConfig.small()
    if path == "full":
        return ModelConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    base = ModelConfig() if values.pop("preset", "small") == "full" else ModelConfig.small()
    return ModelConfig.from_dict(base.to_dict() | values)


def _model(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    return init_params(read_config(args.config), args.seed)


def _emit(args, text: str) -> None:
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")


def _checkpoint_out(args) -> str:
    if not args.out:
        raise ConfigurationError("--out is required to store the trained checkpoint")
    return args.out


def _floats(s):
    return [float(v) for v in s.split(",") if v]


def _ints(s):
    return [int(v) for v in s.split(",") if v]


def cmd_pretrain_encoder(args):
    params = _model(args)
    res = training.pretrain_encoder(params, training.GeneratorConfig(series_length=params.config.series_length),
                                    epochs=args.epochs, steps_per_epoch=args.steps, batch_size=args.batch_size,
                                    lr=args.lr, seed=args.seed, optimizer=args.optimizer, verbose=args.verbose)
    save_checkpoint(res.params, _checkpoint_out(args))


def cmd_pretrain_icl(args):
    res = training.pretrain_icl(_model(args), steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                                seed=args.seed, verbose=args.verbose)
    save_checkpoint(res.params, _checkpoint_out(args))


def cmd_train_adapter(args):
    params = _model(args)
    res = training.train_adapter_episodic(params, training.GeneratorConfig(series_length=params.config.series_length),
                                          epochs=args.epochs, episodes_per_epoch=args.episodes,
                                          batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                                          optimizer=args.optimizer, verbose=args.verbose)
    save_checkpoint(res.params, _checkpoint_out(args))


def cmd_predict(args):
    # class-count checks are left to the classifier, which reports a degenerate task
    ctx = load_dataset(args.context, min_classes=1)
    query = load_dataset(args.query, min_classes=1)
    clf = TICFMClassifier(_model(args), n_estimators=args.n_estimators, temperature=args.temperature,
                          random_state=args.seed)
    clf.fit(ctx.X_train, ctx.y_train)
    proba = clf.predict_proba(query.X_train)
    lines = ["label\t" + "\t".join(f"p({c})" for c in clf.classes_)]
    for label, row in zip(clf.classes_[proba.argmax(axis=1)], proba):
        lines.append(f"{label}\t" + "\t".join(f"{p:.6f}" for p in row))
    _emit(args, "\n".join(lines) + "\n")


def cmd_evaluate(args):
    if args.dataset_dir is None:
        raise ConfigurationError("--dataset-dir is required")
    datasets = load_ucr_directory(args.dataset_dir)
    methods = {}
    for name in args.methods.split(","):
        if name == "ticfm":
            methods[name] = TICFMClassifier(_model(args), n_estimators=args.n_estimators)
        elif name in ("1NN", "NC"):
            methods[name] = BaselineClassifier(name)
        else:
            raise ConfigurationError(f"unknown method {name!r}")
    report = evaluate(methods, datasets, args.protocol, seeds=_ints(args.seeds),
                      fractions=_floats(args.fraction_grid), multipliers=_ints(args.ctx_multipliers),
                      split_seed=args.seed)
    text = report.to_lines() if args.format == "lines" else report.to_csv() if args.format == "csv" \
        else report.to_table()
    _emit(args, text)


def cmd_split(args):
    ds = load_dataset(args.dataset, min_classes=1)
    _emit(args, stratified_split(ds.y_train, args.fraction, args.seed).to_text())


def cmd_theory_check(args):
    rows = theory.run_theory_checks(args.seed, args.trials)
    _emit(args, theory.format_report(rows) + "\n")
    return 0 if all(ok for _, ok, _ in rows) else 1


def cmd_gen_synthetic(args):
    gen = training.GeneratorConfig(series_length=args.length, seed=args.seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n_episodes):
        ep = training.sample_synthetic_task(gen, i, n_classes=args.n_classes)
        for split, X, y in (("TRAIN", ep.X_context, ep.y_context), ("TEST", ep.X_query, ep.y_query)):
            rows = [f"{label}\t" + "\t".join(repr(float(v)) for v in x) for label, x in zip(y, X)]
            (out / f"episode{i:04d}_{split}.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticfm", description="Train-free in-context classification of time series.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="'small', 'full', or a key=value file")
        p.add_argument("--checkpoint", help="checkpoint to start from")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output path (default: stdout)")
        p.set_defaults(fn=fn)
        return p

    def train_flags(p, steps, lr, optimizer):
        if steps is not None:
            p.add_argument("--steps", type=int, default=steps)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--optimizer", choices=training.OPTIMIZERS, default=optimizer)
        p.add_argument("--verbose", action="store_true")

    p = add("pretrain-encoder", cmd_pretrain_encoder, "contrastive encoder pretraining")
    train_flags(p, 100, 1e-3, "adam")
    p.add_argument("--epochs", type=int, default=1)
    p = add("pretrain-icl", cmd_pretrain_icl, "pretrain the in-context classifier on prior tasks")
    train_flags(p, 1000, 1e-3, "adam")
    p = add("train-adapter", cmd_train_adapter, "episodic adapter training, other weights frozen")
    train_flags(p, None, 1e-2, "sgd")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--episodes", type=int, default=40)

    p = add("predict", cmd_predict, "classify a query file given a labelled context file")
    p.add_argument("--context", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--n-estimators", type=int, default=8)
    p.add_argument("--temperature", type=float, default=1.0)

    p = add("evaluate", cmd_evaluate, "run an evaluation protocol over a UCR-style directory")
    p.add_argument("--dataset-dir")
    p.add_argument("--protocol", choices=PROTOCOLS, default="official-split")
    p.add_argument("--fraction-grid", default=",".join(map(str, DEFAULT_FRACTIONS)))
    p.add_argument("--ctx-multipliers", default=",".join(map(str, DEFAULT_MULTIPLIERS)))
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--methods", default="ticfm,1NN,NC")
    p.add_argument("--n-estimators", type=int, default=8)
    p.add_argument("--format", choices=("lines", "table", "csv"), default="lines")

    p = add("split", cmd_split, "stratified context/query split of a labelled file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--fraction", type=float, required=True)

    p = add("theory-check", cmd_theory_check, "run the numeric construction checks")
    p.add_argument("--trials", type=int, default=200)

    p = add("gen-synthetic", cmd_gen_synthetic, "write synthetic episodes as TSV files")
    p.add_argument("--n-episodes", type=int, default=10)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--length", type=int, default=128)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except TicfmError as exc:
        print(f"ticfm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
