#!/usr/bin/env python3
"""
Retrieval-Augmented Adaptation Toolkit
Main entry point for the command-line application
"""

import argparse
import logging
import sys

from command_handler import EXIT_CONFIG, CommandHandler
from errors import ConfigInvalid
from experiment_config import ExperimentConfig, apply_overrides, load_config
from logger import RunLogger, setup_logging

COMMANDS = ('gen-world', 'run', 'verify', 'report')


def build_parser():
    """Argument parser with one subcommand per operation"""
    parser = argparse.ArgumentParser(
        prog='ragadapt',
        description='Retrieval-augmented cache adaptation experiments and risk-bound verification'
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    helps = {
        'gen-world': 'generate a synthetic world and write it to --out',
        'run': 'run the accuracy sweep and write results.csv / summary.csv',
        'verify': 'evaluate every theory check and write theory_report.csv',
        'report': 'print the accuracy orderings of an existing run directory',
    }
    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=helps[name])
        sub.add_argument('--config', help='JSON configuration file (defaults apply when omitted)')
        sub.add_argument('--out', help='output directory, overrides the configured one')
        sub.add_argument('--seed', type=int, help='master seed (unsigned 64-bit)')
        sub.add_argument('--threads', type=int, help='worker threads (fallback: RAGADAPT_THREADS)')
        sub.add_argument('--quiet', action='store_true', help='only warnings and errors on the console')
    return parser


def main(argv=None):
    """Parse arguments, load configuration, dispatch the command"""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        config = apply_overrides(config, seed=args.seed, threads=args.threads, out=args.out)
    except ConfigInvalid as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(config.logging.log_level, config.logging.log_dir, quiet=args.quiet,
                  max_bytes=config.logging.max_log_bytes, backup_count=config.logging.backup_count)
    logger = logging.getLogger(__name__)
    logger.info(f"Starting {args.command} (seed={config.master_seed}, threads={config.threads})")

    handler = CommandHandler(config, RunLogger(config.logging.log_dir))
    return handler.execute(args.command)


if __name__ == "__main__":
    sys.exit(main())
