"""
Dataset commands for the multisource-qa CLI.
"""
import os
import logging

from multisource_qa.config import DEFAULT_DATASET_DIR, SPLIT_FILENAMES, load_synth_config
from multisource_qa.core.synth import Vocabulary, dataset_checksum, generate_dataset, save_dataset
from multisource_qa.utils import source_summary

logger = logging.getLogger("multisource_qa.data")


def setup_parser(subparsers):
    """
    Register the dataset commands.

    Args:
        subparsers: The top-level subparsers action
    """
    datagen_parser = subparsers.add_parser("datagen", help="Generate the synthetic dataset splits")
    datagen_parser.add_argument("--out", "-o", default=DEFAULT_DATASET_DIR,
                                help=f"Output directory for the split files (default: {DEFAULT_DATASET_DIR})")
    datagen_parser.add_argument("--workers", "-w", type=int, default=1,
                                help="Generation threads; output is identical for any value (default: 1)")


def handle_command(args):
    """
    Handle dataset commands.

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    if args.command == "datagen":
        return cmd_datagen(args)
    logger.error("No subcommand specified")
    return 1


def cmd_datagen(args):
    """
    Generate train / val / test files from a SynthConfig (``--config``) and
    print the per-source counts of each split.

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    try:
        cfg = load_synth_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        os.makedirs(args.out, exist_ok=True)
        logger.info(f"Generating {cfg.n_train}/{cfg.n_val}/{cfg.n_test} samples "
                    f"(vocabulary {Vocabulary(cfg).size}, seed {cfg.seed})")
        for split, filename in SPLIT_FILENAMES.items():
            ds = generate_dataset(cfg, split, workers=args.workers)
            path = os.path.join(args.out, filename)
            save_dataset(ds, path)
            print(f"{split}: {len(ds)} samples ({source_summary(ds.source_counts())}) -> {path}")
            logger.debug(f"{split} checksum {dataset_checksum(ds)}")
        return 0
    except Exception as e:
        logger.error(f"Error generating dataset: {e}", exc_info=args.verbose)
        return 1
