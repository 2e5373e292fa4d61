#!/usr/bin/env python3
"""
Main CLI entry point for the multisource-qa application.
"""
import argparse
import sys
import logging
from multisource_qa import __version__
from multisource_qa.commands import analysis, data, training

COMMAND_MODULES = {
    "datagen": data,
    "train": training,
    "eval": training,
    "gradcheck": training,
    "ablate": analysis,
    "inspect-ckpt": analysis,
}


def setup_logging(verbose=False, quiet=False):
    """Configure logging for the application"""
    log_level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler()
        ],
        force=True,
    )
    return logging.getLogger("multisource_qa")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="multisource-qa",
        description="Train and evaluate multi-source question answering models.",
    )
    parser.add_argument(
        "--version", action="version",
        version=f"%(prog)s {__version__}"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument(
        "--verbose", "-v", action="store_true",
        help="Enable verbose logging"
    )
    verbosity.add_argument(
        "--quiet", "-q", action="store_true",
        help="Only log warnings and errors"
    )
    parser.add_argument(
        "--config", type=str, default=None,
        help="Path to a flat JSON configuration file (run config; synth config for datagen)"
    )
    parser.add_argument(
        "--seed", type=int, default=None,
        help="Override the configured seed"
    )

    subparsers = parser.add_subparsers(dest="command", help="Command")
    data.setup_parser(subparsers)
    training.setup_parser(subparsers)
    analysis.setup_parser(subparsers)
    return parser


def main(argv=None):
    """Main entry point for the CLI application."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = setup_logging(args.verbose, args.quiet)

    if args.command not in COMMAND_MODULES:
        parser.print_help()
        return 1

    try:
        return COMMAND_MODULES[args.command].handle_command(args)
    except KeyboardInterrupt:
        logger.info("Operation cancelled by user")
        return 1
    except Exception as e:
        logger.error(f"Error: {e}", exc_info=args.verbose)
        return 1


if __name__ == "__main__":
    sys.exit(main())
