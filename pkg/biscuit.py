#!/usr/bin/env python3
"""
BISCUIT causal representation lab

Generates interactive synthetic causal worlds, trains the BISCUIT learner
on their observation sequences, scores identification quality and runs the
identifiability checks.

Commands:
- gen-data: simulate a world and write a dataset directory
- train: fit BISCUIT (or the autoencoder + flow variant) on a dataset
- eval: score a trained run on a held-out dataset
- check-theory: run the identifiability checks on the configured world
- report: combine several evaluation reports into one CSV table

Exit codes: 0 success, 1 configuration or usage error, 2 numeric failure.
"""

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from lib import (
    BiscuitError,
    BiscuitNF,
    ConfigError,
    NumericError,
    RngStream,
    World,
    aggregate_reports,
    checkpoint_load,
    evaluate,
    generate_dataset,
    load_config,
    model_from_config,
    prepare_output_dir,
    read_dataset,
    run_theory_suite,
    setup_logging,
    to_json,
    train,
    train_nf,
    write_dataset,
    write_json,
    write_r2_csv,
    write_report,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
THREADS_ENV = "BISCUIT_THREADS"


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with EXIT_USAGE on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_arguments(argv=None):
    """
    Parse command-line arguments.

    Returns:
        Parsed arguments namespace
    """
    parser = UsageParser(
        description="Interactive causal world simulator and BISCUIT learner",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data --config exp.json --out data/train
  %(prog)s gen-data --config exp.json --out data/test --split test
  %(prog)s train --data data/train --out runs/seed1 --seed 1
  %(prog)s train --data data/train --out runs/nf --seed 1 --nf
  %(prog)s eval --run runs/seed1 --data data/test --report runs/seed1/report.json
  %(prog)s check-theory --config exp.json
  %(prog)s report --reports runs/*/report.json --out comparison.csv
        """,
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Simulate a world and write a dataset directory")
    gen.add_argument("--config", type=str, help="Experiment configuration JSON (defaults if omitted)")
    gen.add_argument("--out", type=str, required=True, help="Dataset directory to create")
    gen.add_argument("--split", choices=["train", "test"], default="train", help="Sequence to roll out (default: train)")
    gen.add_argument("--seed", type=int, help="Override the experiment seed")
    gen.add_argument("--force", action="store_true", help="Write into a non-empty output directory")

    tr = commands.add_parser("train", help="Train a model on a dataset")
    tr.add_argument("--data", type=str, required=True, help="Training dataset directory")
    tr.add_argument("--out", type=str, required=True, help="Run directory for checkpoints and loss logs")
    tr.add_argument("--seed", type=int, help="Training seed (default: train.seed of the configuration)")
    tr.add_argument("--config", type=str, help="Experiment configuration JSON (defaults if omitted)")
    tr.add_argument("--nf", action="store_true", help="Two-stage autoencoder + normalizing flow variant")
    tr.add_argument("--epochs", type=int, help="Override train.epochs")
    tr.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint in --out")
    tr.add_argument("--force", action="store_true", help="Write into a non-empty run directory")

    ev = commands.add_parser("eval", help="Score a trained run on a held-out dataset")
    ev.add_argument("--run", type=str, required=True, help="Run directory containing model.ckpt")
    ev.add_argument("--data", type=str, required=True, help="Held-out dataset directory (split test)")
    ev.add_argument("--report", type=str, required=True, help="Report JSON path")
    ev.add_argument("--config", type=str, help="Experiment configuration JSON (eval section is used)")
    ev.add_argument("--no-graph", action="store_true", help="Skip graph discovery")

    th = commands.add_parser("check-theory", help="Run the identifiability checks on the configured world")
    th.add_argument("--config", type=str, help="Experiment configuration JSON (defaults if omitted)")
    th.add_argument("--out", type=str, help="Also write the verdicts to this JSON file")

    rp = commands.add_parser("report", help="Combine evaluation reports into one CSV table")
    rp.add_argument("--reports", type=str, nargs="+", required=True, help="Report JSON files")
    rp.add_argument("--out", type=str, required=True, help="Comparison CSV path")

    args = parser.parse_args(argv)

    if args.command == "train" and args.resume and args.force:
        parser.error("--resume and --force cannot be combined")
    if args.command == "train" and args.epochs is not None and args.epochs < 1:
        parser.error("--epochs must be positive")

    return args


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        threads = int(value)
    except ValueError as e:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {value!r}") from e
    if threads < 1:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {value!r}")
    return threadpool_limits(limits=threads)


def cmd_gen_data(args, logger):
    config = load_config(Path(args.config) if args.config else None)
    if args.seed is not None:
        config.seed = args.seed
    out_dir = prepare_output_dir(Path(args.out), args.force)
    dataset = generate_dataset(config.scm, RngStream(config.seed), split=args.split)
    write_dataset(dataset, out_dir)
    manifest = dataset.manifest
    print(
        f"{args.split}: {manifest['frames']} frames, K={manifest['num_vars']}, rule={manifest['rule']}, "
        f"clusters={manifest['clusters']}, seed={manifest['seed']}"
    )
    logger.info(f"Dataset ready: {out_dir.absolute()}")


def cmd_train(args, logger):
    config = load_config(Path(args.config) if args.config else None)
    if args.seed is not None:
        config.train.seed = args.seed
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.nf:
        config.model.nf_variant = True
    config.validate()

    out_dir = Path(args.out)
    if not args.resume:
        prepare_output_dir(out_dir, args.force)
    dataset = read_dataset(Path(args.data))
    num_vars = dataset.num_vars
    if config.model.num_latents is not None and config.model.num_latents < num_vars:
        raise ConfigError("model.num_latents", f"must be at least num_vars ({num_vars})")
    write_json(config.to_dict(), out_dir / "config.json")

    rng = RngStream(config.train.seed).split("init")
    model = model_from_config(config.model, int(dataset.manifest["obs_dim"]), num_vars, rng)
    logger.info(f"Training {model.kind} with {model.num_latents} latents for {config.train.epochs} epochs")
    if isinstance(model, BiscuitNF):
        result = train_nf(model, dataset, config.train, out_dir, resume=args.resume)
    else:
        result = train(model, dataset, config.train, out_dir, resume=args.resume)
    if result.history:
        logger.info(f"Final loss: {result.history[-1].loss:.4f}")


def cmd_eval(args, logger):
    config = load_config(Path(args.config) if args.config else None)
    run_dir = Path(args.run)
    model, header = checkpoint_load(run_dir / "model.ckpt")
    dataset = read_dataset(Path(args.data))
    if dataset.manifest.get("split") != "test":
        logger.warning(f"Evaluating on split '{dataset.manifest.get('split')}', expected 'test'")
    world = World.from_manifest(dataset.manifest)
    report = evaluate(model, dataset, world, config.eval, with_graph=not args.no_graph)
    report_path = Path(args.report)
    write_report(report, report_path)
    write_r2_csv(report.r2_matrix, report_path.with_name(f"{report_path.stem}_r2.csv"))
    print(
        f"r2_diag={report.r2_diag:.3f} r2_sep={report.r2_sep:.3f} "
        f"f1={report.interaction_f1_mean:.3f} shd={report.shd}"
    )
    logger.debug(f"Evaluated checkpoint from epoch {header['epoch']}")


def cmd_check_theory(args, logger):
    config = load_config(Path(args.config) if args.config else None)
    world = World.build(config.scm, config.seed)
    verdicts = run_theory_suite(world, RngStream(config.seed).split("theory"))
    if args.out:
        write_json(verdicts, Path(args.out))
        logger.info(f"Theory verdicts written: {args.out}")
    print(to_json(verdicts), end="")


def cmd_report(args, logger):
    table = aggregate_reports([Path(p) for p in args.reports], Path(args.out))
    logger.info(f"Comparison table with {len(table)} runs written: {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-theory": cmd_check_theory,
    "report": cmd_report,
}


def main(argv=None):
    """Main entry point for the BISCUIT lab."""
    args = parse_arguments(argv)

    # Setup logging
    log_level = logging.DEBUG if args.debug else logging.INFO
    setup_logging(log_level)

    logger = logging.getLogger(__name__)

    try:
        with _thread_limit():
            COMMANDS[args.command](args, logger)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}", exc_info=args.debug)
        sys.exit(EXIT_USAGE)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}", exc_info=args.debug)
        sys.exit(EXIT_NUMERIC)
    except BiscuitError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.debug)
        sys.exit(EXIT_USAGE)
    return EXIT_OK


if __name__ == "__main__":
    main()
