"""
Ablation and checkpoint inspection commands for the multisource-qa CLI.
"""
import json
import logging

import numpy as np

from multisource_qa.config import apply_overrides, load_run_config
from multisource_qa.commands.training import check_compatibility
from multisource_qa.core.ablation import AblationRunner, format_ablation_table, select_variants, write_ablation_csv
from multisource_qa.core.checkpoint import read_header
from multisource_qa.core.synth import load_dataset
from multisource_qa.file_utils import RunDirectory, dataset_path
from multisource_qa.utils import format_count

logger = logging.getLogger("multisource_qa.analysis")


def setup_parser(subparsers):
    """
    Register the ablate and inspect-ckpt commands.

    Args:
        subparsers: The top-level subparsers action
    """
    ablate_parser = subparsers.add_parser("ablate", help="Run the ablation grid")
    ablate_parser.add_argument("--dataset", "-d", default=None, help="Dataset directory or file")
    ablate_parser.add_argument("--out", "-o", default=None, help="Directory for the ablation report")
    ablate_parser.add_argument("--variants", default=None,
                               help="Comma-separated variant names (default: the whole grid)")
    ablate_parser.add_argument("--reproduce", default=None, metavar="VARIANT",
                               help="Re-run one variant in isolation and compare its metrics")
    ablate_parser.add_argument("--split", default="val", choices=["val", "test"],
                               help="Split every variant is scored on (default: val)")

    inspect_parser = subparsers.add_parser("inspect-ckpt", help="Print a checkpoint header")
    inspect_parser.add_argument("--checkpoint", "-c", required=True, help="Checkpoint file")
    inspect_parser.add_argument("--json", action="store_true", help="Print the raw header as JSON")


def handle_command(args):
    """
    Handle analysis commands.

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    if args.command == "ablate":
        return cmd_ablate(args)
    elif args.command == "inspect-ckpt":
        return cmd_inspect(args)
    else:
        logger.error("No subcommand specified")
        return 1


def cmd_ablate(args):
    """
    Train and score every selected variant under one seed and budget, then
    write ``ablation.csv`` and its text rendering.

    Args:
        args: Command arguments

    Returns:
        int: Exit code, 1 when a variant failed or the re-run differed
    """
    try:
        run_cfg = apply_overrides(load_run_config(args.config), args.seed, args.dataset, args.out)
        names = [n.strip() for n in args.variants.split(",") if n.strip()] if args.variants else None
        variants = select_variants(names)

        train_ds = load_dataset(dataset_path(run_cfg.dataset, "train"))
        eval_ds = load_dataset(dataset_path(run_cfg.dataset, args.split))
        check_compatibility(run_cfg.model, run_cfg.options, train_ds.config)
        logger.info(f"Running {len(variants)} variant(s) on {len(train_ds)} training samples")

        runner = AblationRunner(run_cfg, train_ds.samples, eval_ds.samples)
        result = runner.run(variants, reproduce=args.reproduce)

        run_dir = RunDirectory(run_cfg.out_dir)
        run_dir.ensure()
        csv_path, text_path = run_dir.report_paths("ablation")
        write_ablation_csv(result, csv_path)
        table = format_ablation_table(result)
        run_dir.write_text(text_path, table)
        print(table)
        logger.info(f"Wrote {csv_path}")

        if not result.completed:
            logger.error("Ablation grid incomplete: " + ", ".join(r.variant for r in result.rows if r.status != "ok"))
            return 1
        if result.reproducible is False:
            logger.error(f"Re-run of {result.reproduced} did not reproduce its metrics")
            return 1
        return 0
    except Exception as e:
        logger.error(f"Error running ablation grid: {e}", exc_info=args.verbose)
        return 1


def cmd_inspect(args):
    """
    Print the format version, epoch, configuration, parameter manifest and
    MoE layers of a checkpoint. The checksum is verified first.

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    try:
        header, _ = read_header(args.checkpoint)
        if args.json:
            print(json.dumps(header, indent=2, sort_keys=True))
            return 0

        total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"])
        trainable = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"] if e["trainable"])
        print(f"checkpoint: {args.checkpoint}")
        print(f"format version: {header['version']}")
        print(f"epoch: {header['epoch']}  seed: {header['seed']}")
        print(f"parameters: {format_count(total)} ({format_count(trainable)} trainable)")
        print(f"optimizer state: {'yes' if header['optimizer'] else 'no'}  rng state: {'yes' if header['rng'] else 'no'}")
        print("config:")
        config = header["run_config"] or {
            f"{section}.{key}": value
            for section, values in header["model_config"].items()
            for key, value in values.items()
        }
        for key in sorted(config):
            print(f"  {key} = {json.dumps(config[key])}")
        print("moe layers:")
        for name in header["moe_layers"] or ["(none)"]:
            print(f"  {name}")
        print("manifest:")
        width = max((len(e["name"]) for e in header["manifest"]), default=0)
        for e in header["manifest"]:
            shape = "x".join(str(s) for s in e["shape"]) or "scalar"
            flag = "" if e["trainable"] else "  frozen"
            print(f"  {e['name'].ljust(width)}  {shape:>10}  @{e['offset']}{flag}")
        return 0
    except Exception as e:
        logger.error(f"Error reading checkpoint: {e}", exc_info=args.verbose)
        return 1
