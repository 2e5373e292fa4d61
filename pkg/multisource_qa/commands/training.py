"""
Training, evaluation and gradient-check commands for the multisource-qa CLI.
"""
import os
import time
import logging
from collections import defaultdict

import numpy as np

from multisource_qa.config import (
    DEFAULT_DATASET_DIR,
    DEFAULT_OUT_DIR,
    RunConfig,
    apply_overrides,
    load_run_config,
)
from multisource_qa.core.checkpoint import load_checkpoint, save_checkpoint
from multisource_qa.core.gradcheck import random_batch, run_gradcheck, toy_configs
from multisource_qa.core.metrics import (
    per_attribute_report,
    per_source_report,
    top_k_attribute_recall,
    format_report_table,
    write_report_csv,
)
from multisource_qa.core.model import build_model
from multisource_qa.core.synth import SOURCES, Vocabulary, dataset_checksum, load_dataset
from multisource_qa.core.trainer import TrainState, evaluate, train, validation_metrics
from multisource_qa.file_utils import RunDirectory, dataset_path
from multisource_qa.utils import changed_parameters, format_count, human_time, parameter_digests

logger = logging.getLogger("multisource_qa.training")


def setup_parser(subparsers):
    """
    Register the train, eval and gradcheck commands.

    Args:
        subparsers: The top-level subparsers action
    """
    train_parser = subparsers.add_parser("train", help="Train a model")
    train_parser.add_argument("--dataset", "-d", default=None,
                              help=f"Dataset directory or file (default: from config, else {DEFAULT_DATASET_DIR})")
    train_parser.add_argument("--out", "-o", default=None,
                              help=f"Run directory for checkpoints and the log (default: {DEFAULT_OUT_DIR})")
    train_parser.add_argument("--resume", nargs="?", const="latest", default=None,
                              help="Resume from a checkpoint; without a path the newest epoch checkpoint is used")

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("--checkpoint", "-c", default=None,
                             help="Checkpoint to evaluate (default: model.ckpt in the default run directory)")
    eval_parser.add_argument("--dataset", "-d", default=None,
                             help="Dataset directory or file (default: the one the checkpoint was trained on)")
    eval_parser.add_argument("--split", default="test", choices=["train", "val", "test"],
                             help="Split to evaluate (default: test)")
    eval_parser.add_argument("--out", "-o", default=None,
                             help="Directory for the report files (default: next to the checkpoint)")

    grad_parser = subparsers.add_parser("gradcheck", help="Check gradients against finite differences")
    grad_parser.add_argument("--n-params", type=int, default=50,
                             help="Number of sampled parameter entries (default: 50)")
    grad_parser.add_argument("--aux-weight", type=float, default=None,
                             help="Override the auxiliary loss weight")
    grad_parser.add_argument("--no-alignment", action="store_true",
                             help="Drop the alignment losses from the checked objective")
    grad_parser.add_argument("--tolerance", type=float, default=1e-3,
                             help="Largest accepted relative error (default: 1e-3)")


def handle_command(args):
    """
    Handle training commands.

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    if args.command == "train":
        return cmd_train(args)
    elif args.command == "eval":
        return cmd_eval(args)
    elif args.command == "gradcheck":
        return cmd_gradcheck(args)
    else:
        logger.error("No subcommand specified")
        return 1


def check_compatibility(cfg, options, synth_cfg):
    """
    Raise ValueError when a dataset cannot feed a model.

    Args:
        cfg (BlockConfig): Model dimensions
        options (ModelOptions): Image geometry and answer length
        synth_cfg (SynthConfig): Configuration the dataset was generated from
    """
    vocab = Vocabulary(synth_cfg).size
    if vocab != cfg.vocab_size:
        raise ValueError(f"vocabulary mismatch: dataset has {vocab} tokens, model has {cfg.vocab_size}")
    if synth_cfg.k != cfg.k:
        raise ValueError(f"sequence length mismatch: dataset k={synth_cfg.k}, model k={cfg.k}")
    for name in ("image_channels", "image_size", "patch_size"):
        if getattr(synth_cfg, name) != getattr(options, name):
            raise ValueError(f"{name} mismatch: dataset {getattr(synth_cfg, name)}, model {getattr(options, name)}")


def _load_split(dataset, split):
    path = dataset_path(dataset, split)
    ds = load_dataset(path)
    logger.info(f"Loaded {len(ds)} {split} samples from {path}")
    return ds


def _resume_source(resume, run_dir):
    if resume != "latest":
        return resume
    path = run_dir.latest_checkpoint()
    if path is None:
        raise FileNotFoundError(f"no epoch checkpoint to resume from in {run_dir.out_dir}")
    return path


def cmd_train(args):
    """
    Train per the run configuration, writing per-epoch checkpoints, the JSON
    lines training log and a final ``model.ckpt``. The last printed line holds
    the validation accuracy and Recall@90.

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    try:
        checkpoint = None
        if args.resume:
            resume_dir = RunDirectory(args.out or load_run_config(args.config).out_dir)
            checkpoint = load_checkpoint(_resume_source(args.resume, resume_dir))
            logger.info(f"Resuming after epoch {checkpoint.epoch}")

        if checkpoint is not None and not args.config and checkpoint.run_config:
            run_cfg = RunConfig.from_flat(checkpoint.run_config)
        else:
            run_cfg = load_run_config(args.config)
        apply_overrides(run_cfg, args.seed, args.dataset, args.out)

        run_dir = RunDirectory(run_cfg.out_dir)
        run_dir.ensure()
        train_ds = _load_split(run_cfg.dataset, "train")
        if os.path.isfile(run_cfg.dataset):
            logger.warning("Dataset is a single file; validating on the training samples")
        val_ds = _load_split(run_cfg.dataset, "val")
        check_compatibility(run_cfg.model, run_cfg.options, train_ds.config)

        if checkpoint is not None:
            model = checkpoint.model
            state = TrainState(
                epoch=checkpoint.epoch,
                optimizer=checkpoint.optimizer or run_cfg.optim.optimizer_state(),
                rng=checkpoint.rng() or np.random.default_rng(run_cfg.seed),
            )
        else:
            model = build_model(run_cfg.model, run_cfg.options, run_cfg.moe, run_cfg.seed)
            state = None
        logger.info(f"Model has {format_count(model.parameter_count())} parameters, "
                    f"{format_count(model.parameter_count(trainable_only=True))} trainable")

        flat = run_cfg.to_flat()
        config_record = {**flat, "dataset.sha256": dataset_checksum(train_ds)}

        def save_epoch(model, state, record):
            save_checkpoint(run_dir.checkpoint_path(state.epoch), model, state.optimizer,
                            state.epoch, state.rng, flat)

        before = parameter_digests(model)
        start = time.perf_counter()
        log, state = train(
            model,
            train_ds.samples,
            run_cfg.optim,
            seed=run_cfg.seed,
            val_samples=val_ds.samples,
            log_path=run_dir.log_path,
            config_record=config_record,
            state=state,
            on_epoch_end=save_epoch,
        )
        logger.info(f"Training finished in {human_time(time.perf_counter() - start)}")

        changed = changed_parameters(before, parameter_digests(model))
        frozen_changed = [p.name for p in model.parameters() if not p.trainable and p.name in changed]
        if frozen_changed:
            logger.warning(f"Frozen parameters changed during training: {', '.join(frozen_changed[:5])}")
        logger.debug(f"{len(changed)} of {len(before)} parameter tensors changed")

        save_checkpoint(run_dir.final_checkpoint, model, state.optimizer if state else None,
                        state.epoch if state else 0, state.rng if state else None, flat)
        logger.info(f"Saved final checkpoint to {run_dir.final_checkpoint}")

        if log.last is not None and "val" in log.last:
            val = log.last["val"]
        else:
            optim = run_cfg.optim
            val = validation_metrics(evaluate(model, val_ds.samples, optim.eval_batch_size, optim.eval_workers))
        print(f"val accuracy {val['accuracy']:.4f}, recall@90 {val['recall_at_90']:.4f}")
        return 0
    except Exception as e:
        logger.error(f"Error training model: {e}", exc_info=args.verbose)
        return 1


def _alpha_by_source(records):
    values = defaultdict(list)
    for r in records:
        values[r.source_label].append(r.alpha_mean)
    return {label: float(np.mean(values[label])) for label in SOURCES if values[label]}


def cmd_eval(args):
    """
    Generate answers for one split and write per-attribute and per-source
    reports (CSV plus aligned text).

    Args:
        args: Command arguments

    Returns:
        int: Exit code
    """
    try:
        checkpoint_path = args.checkpoint or RunDirectory(DEFAULT_OUT_DIR).final_checkpoint
        checkpoint = load_checkpoint(checkpoint_path)
        model = checkpoint.model
        saved = checkpoint.run_config or {}
        dataset = args.dataset or saved.get("dataset") or DEFAULT_DATASET_DIR
        ds = _load_split(dataset, args.split)
        check_compatibility(model.cfg, model.options, ds.config)

        eval_batch_size = saved.get("optim.eval_batch_size", 64)
        workers = saved.get("optim.eval_workers", 1)
        records = evaluate(model, ds.samples, eval_batch_size, workers)

        run_dir = RunDirectory(args.out or os.path.dirname(os.path.abspath(checkpoint_path)))
        run_dir.ensure()
        for kind, report in (("attributes", per_attribute_report(records)),
                             ("sources", per_source_report(records))):
            csv_path, text_path = run_dir.report_paths(kind)
            write_report_csv(report, csv_path)
            table = format_report_table(report, title=f"{args.split} split by {kind[:-1]}")
            run_dir.write_text(text_path, table)
            print(table)
            print()
            logger.info(f"Wrote {csv_path}")

        for k, recall in top_k_attribute_recall(records).items():
            print(f"top-{k} attribute recall@90: {recall:.4f}")
        for label, alpha in _alpha_by_source(records).items():
            print(f"mean image weight on {label} samples: {alpha:.4f}")
        return 0
    except Exception as e:
        logger.error(f"Error evaluating checkpoint: {e}", exc_info=args.verbose)
        return 1


def cmd_gradcheck(args):
    """
    Compare analytic and central-difference gradients of the joint loss.
    Uses the toy dimensions unless ``--config`` names a run configuration.

    Args:
        args: Command arguments

    Returns:
        int: Exit code, 1 when any sampled entry exceeds the tolerance
    """
    try:
        if args.n_params < 1:
            raise ValueError(f"--n-params must be >= 1, got {args.n_params}")
        if args.config:
            run_cfg = load_run_config(args.config)
            cfg, options, moe = run_cfg.model, run_cfg.options, run_cfg.moe
            seed = run_cfg.seed
        else:
            cfg, options, moe = toy_configs()
            seed = 0
        if args.seed is not None:
            seed = args.seed
        if args.aux_weight is not None:
            moe.aux_weight = args.aux_weight
        if args.no_alignment:
            options.alignment = False

        model = build_model(cfg, options, moe, seed)
        batch = random_batch(model, 2, np.random.default_rng(seed))
        start = time.perf_counter()
        report = run_gradcheck(model, batch, n_params=args.n_params, tolerance=args.tolerance, seed=seed)
        worst = report.worst
        print(f"checked {len(report.entries)} entries in {human_time(time.perf_counter() - start)}; "
              f"worst relative error {worst.rel_error:.3e} at {worst.name}[{worst.index}]")
        if not report.passed:
            logger.error(f"Gradient check failed: {worst.name}[{worst.index}] analytic {worst.analytic:.6e}, "
                         f"numeric {worst.numeric:.6e}")
            return 1
        print("gradient check passed")
        return 0
    except Exception as e:
        logger.error(f"Error running gradient check: {e}", exc_info=args.verbose)
        return 1
