import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import yaml

from consistency_at.config import load_config, save_resolved
from consistency_at.core.datasets import DATASETS, dataset_path
from consistency_at.errors import ConfigError, DatasetMissingError, OutputLockedError
from consistency_at.evaluation.suites import SUITES, inspect_attack, run_suite
from consistency_at.export.plots import plot_fraction_sweep, plot_robust_curves
from consistency_at.fetcher import SOURCES, DatasetFetcher
from consistency_at.training.config import halve_epoch_budget
from consistency_at.training.engine import run_training
from consistency_at.utils import ensure_directory

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging():
    logging.basicConfig(
        level=logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stdout),
        ]
    )


@contextmanager
def run_directory(output_dir):
    """Hold <output_dir>/.lock and mirror logging into <output_dir>/run.log."""
    out = Path(output_dir)
    ensure_directory(out)
    lock = out / '.lock'
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockedError(str(lock))
    with os.fdopen(fd, 'w') as f:
        f.write(str(os.getpid()))

    handler = logging.FileHandler(out / 'run.log')
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield out
    finally:
        root.removeHandler(handler)
        handler.close()
        lock.unlink(missing_ok=True)


def parse_overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition('=')
        if not sep or not key:
            raise ConfigError(pair, "overrides take the form key=value")
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def _load(args):
    return load_config(args.config, parse_overrides(args.set))


def _checkpoint_path(config, given):
    if given:
        return Path(given)
    checkpoints = Path(config.output_dir) / 'checkpoints'
    best = checkpoints / 'best.pt'
    return best if best.exists() else checkpoints / 'last.pt'


def _download(config):
    if config.dataset not in SOURCES:
        raise DatasetMissingError(str(dataset_path(config.dataset, config.data_root)),
                                  DATASETS[config.dataset]['format'] + ' (no download source; convert it by hand)')
    DatasetFetcher(config.data_root).fetch(config.dataset)


def train_command(args):
    config = _load(args)
    if args.download:
        _download(config)
    with run_directory(config.output_dir):
        logger.info(f"Training {config.architecture} on {config.dataset} (config {config.config_hash})")
        result = run_training(config, max_epochs=args.max_epochs)
    best = result.best.epoch if result.best is not None else None
    print(f"Trained to epoch {result.last.epoch}; best PGD-10 checkpoint from epoch {best}. "
          f"Artifacts in {result.output_dir}")


def eval_command(args):
    config = _load(args)
    checkpoint = _checkpoint_path(config, args.checkpoint)
    with run_directory(config.output_dir):
        report = run_suite(config, args.suite, checkpoint, args.source, args.limit)
    for metric, value in report.rows():
        print(f"{metric},{value:.2f}")


def corrupt_eval_command(args):
    args.suite, args.source, args.limit = 'corruption', None, None
    eval_command(args)


def attack_command(args):
    config = _load(args)
    checkpoint = _checkpoint_path(config, args.checkpoint)
    with run_directory(config.output_dir):
        summary = inspect_attack(config, args.preset or config.train.attack, checkpoint, args.batch_size)
    print(summary.to_string(index=False))


def plot_command(args):
    if args.fraction_runs:
        summary = plot_fraction_sweep(args.fraction_runs, args.out)
        print(summary.to_string(index=False))
    else:
        if not args.metrics:
            raise ValueError("give metrics CSV files or --fraction-runs")
        plot_robust_curves(args.metrics, args.out, args.labels)
    print(f"Wrote {args.out}")


def halve_command(args):
    config = halve_epoch_budget(_load(args))
    save_resolved(config, args.out)
    print(f"Wrote {args.out} with train.epochs={config.train.epochs}")


def validate_command(args):
    config = _load(args)
    print("Config is valid.")
    print(f"config_hash={config.config_hash}")


def fetch_command(args):
    config = _load(args)
    target = DatasetFetcher(args.root or config.data_root).fetch(args.name, force=args.force)
    print(f"Dataset ready at {target}")


def build_parser():
    parser = argparse.ArgumentParser(prog='consistency_at', description="Consistency-regularized adversarial training")
    parser.add_argument('--config', default='config.yaml', help='Path to config file')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='Override a config key, e.g. --set loss.lambda=2 (repeatable)')

    subparsers = parser.add_subparsers(dest='command', required=True)

    train_parser = subparsers.add_parser('train', help='Train a model')
    train_parser.add_argument('--download', action='store_true', help='Fetch the dataset first if absent')
    train_parser.add_argument('--max-epochs', type=int, default=None, help='Stop after this many epochs; rerun to resume')
    train_parser.set_defaults(func=train_command)

    eval_parser = subparsers.add_parser('eval', help='Evaluate a checkpoint')
    eval_parser.add_argument('--checkpoint', help='Checkpoint file (default: best, else last, of the run)')
    eval_parser.add_argument('--suite', choices=SUITES, default='whitebox')
    eval_parser.add_argument('--source', help='Source checkpoint crafting the transfer attacks')
    eval_parser.add_argument('--limit', type=int, default=None, help='Evaluate the first N test images only')
    eval_parser.set_defaults(func=eval_command, command_parser=eval_parser)

    attack_parser = subparsers.add_parser('attack', help='Attack one test batch and dump it')
    attack_parser.add_argument('--checkpoint')
    attack_parser.add_argument('--preset', help='Attack preset (default: train.attack)')
    attack_parser.add_argument('--batch-size', type=int, default=16)
    attack_parser.set_defaults(func=attack_command)

    corrupt_parser = subparsers.add_parser('corrupt-eval', help='Mean corruption error of a checkpoint')
    corrupt_parser.add_argument('--checkpoint')
    corrupt_parser.set_defaults(func=corrupt_eval_command)

    plot_parser = subparsers.add_parser('plot', help='Plot robust accuracy curves or a fraction sweep')
    plot_parser.add_argument('metrics', nargs='*', help='metrics.csv files')
    plot_parser.add_argument('--labels', nargs='+')
    plot_parser.add_argument('--fraction-runs', nargs='+', help='Run directories of a data-fraction sweep')
    plot_parser.add_argument('--out', required=True, help='Image file to write')
    plot_parser.set_defaults(func=plot_command, command_parser=plot_parser)

    halve_parser = subparsers.add_parser('halve', help='Write the config with half the epoch budget')
    halve_parser.add_argument('--out', required=True, help='Config file to write')
    halve_parser.set_defaults(func=halve_command)

    validate_parser = subparsers.add_parser('validate', help='Validate configuration')
    validate_parser.set_defaults(func=validate_command)

    fetch_parser = subparsers.add_parser('fetch', help='Download and unpack a dataset')
    fetch_parser.add_argument('name', choices=sorted(SOURCES))
    fetch_parser.add_argument('--root', help='Data root (default: data.root)')
    fetch_parser.add_argument('--force', action='store_true')
    fetch_parser.set_defaults(func=fetch_command)

    return parser


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == 'eval' and args.suite == 'transfer' and not args.source:
            args.command_parser.error("--suite transfer requires --source")
        if args.command == 'plot' and not args.metrics and not args.fraction_runs:
            args.command_parser.error("give metrics CSV files or --fraction-runs")
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        args.func(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except OutputLockedError as e:
        logger.error(str(e))
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
