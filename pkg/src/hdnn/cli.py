"""Command-line entry point: ``hdnn synth|train|evaluate|predict|gradcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from hdnn.config import parse_config, resolve_input_shapes, config_from_dict
from hdnn.data.io import CURVE_CHANNELS, DataError, load_dataset
from hdnn.data.preprocess import build_dataset
from hdnn.data.synth import SynthConfig, synth_generate
from hdnn.gradcheck import gradcheck_suite
from hdnn.model import CheckpointError, ConfigError, build_model, load_checkpoint, save_checkpoint
from hdnn.trainer import evaluate, predict, train

log = logging.getLogger("hdnn")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdnn", description="Hybrid deep neural networks for production prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,evaluate,predict,gradcheck}")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic well dataset")
    p.add_argument("--wells", type=_nonneg_int, default=180)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="JSON config file (defaults to the hdnn preset)")
    p.add_argument("--data", required=True, help="directory with attributes.csv and curves.csv")
    p.add_argument("--out", required=True, help="checkpoint path; history.csv is written alongside")
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("evaluate", help="print mse/mae/r2 of a model on labelled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("predict", help="write per-formation production predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient checks")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    return parser


def cmd_synth(args) -> int:
    data = synth_generate(SynthConfig(wells=args.wells, seed=args.seed), args.out)
    print(f"wrote {len(data.formations)} formations from {args.wells} wells to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.config:
        config, spec, opts = parse_config(args.config)
    else:
        config, spec, opts = config_from_dict({})
    if args.seed is not None:
        config.seed = args.seed
        spec.seed = args.seed
    if args.epochs is not None:
        spec.epochs = args.epochs
    if args.batch is not None:
        spec.batch_size = args.batch
    if args.lr is not None:
        spec.lr = args.lr
    spec.__post_init__()

    dataset = build_dataset(load_dataset(args.data), opts.resample_length)
    config = resolve_input_shapes(config, dataset.numeric.shape[1], len(CURVE_CHANNELS), opts.resample_length)
    model, history, optimizer = train(build_model(config), dataset, spec)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    save_checkpoint(model, optimizer, out)
    history.write_csv(out.parent / "history.csv")
    last = history.records[-1] if history.records else None
    summary = f"trained {len(history)} epochs ({history.steps} steps)"
    if last is not None:
        summary += f", final train_loss={last.train_loss:.6g}"
    if history.best_epoch is not None:
        summary += f", best epoch {history.best_epoch}"
    print(f"{summary}; wrote {out}", file=sys.stderr)
    return EXIT_OK


def _dataset_for(model, data_dir):
    norm = model.normalizer
    if norm is None:
        raise CheckpointError("checkpoint has no fitted normalizer; it was never trained")
    return build_dataset(load_dataset(data_dir), norm.length, norm.vocabularies)


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.model)
    metrics = evaluate(model, _dataset_for(model, args.data))
    print(metrics.format_line())
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.model)
    preds = predict(model, _dataset_for(model, args.data))
    preds.write_csv(args.out)
    print(f"wrote {len(preds)} predictions to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(args.seed)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"hdnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
