"""
Command-line interface for bconv.

Commands::

    bconv train         [--config PATH] [--init PATH] --out DIR
    bconv eval          [--config PATH] --checkpoint PATH --out DIR
    bconv distill       [--config PATH] --teacher PATH [--init PATH] --out DIR
    bconv gradcheck     [--config PATH] --out DIR
    bconv inspect-state [--config PATH] [--checkpoint PATH] [--mode MODE] --out DIR

Exit codes: 0 success, 1 diverged training, 2 invalid configuration,
3 unreadable data, 4 unreadable or mismatched checkpoint, 5 failed gradient check.
"""

import argparse
import csv
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    network_from_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config
from .data import (
    BatchPlan,
    DataError,
    Dataset,
    batches,
    cifar100_read,
    cifar_read,
    subset,
    synth_generate,
)
from .gradcheck import CSV_COLUMNS as GRADCHECK_COLUMNS
from .gradcheck import run_all
from .network import Network, PTLNetwork, build_backbone, build_network
from .tensor import NonFiniteError, ShapeError
from .training import COLUMNS, DistillConfig, OptimizerState, evaluate, fit

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5

STATE_COLUMNS = ("batch", "cell", "c_norm", "c_mean", "h_norm", "h_mean")
PER_CLASS_COLUMNS = ("class", "correct", "total", "accuracy")


def write_csv(
    path: str, header: Sequence[str], rows: Sequence[Sequence[object]]
) -> None:
    """Header row plus ``rows``, LF line endings."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logging.debug(f"Wrote {len(rows)} rows to {path}")


def load_datasets(config: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Training split and (optional) evaluation split described by ``config``."""
    if config.dataset == "synthetic":
        resolution = (config.synth_resolution, config.synth_resolution)
        train = synth_generate(
            config.synth_classes,
            config.synth_per_class,
            resolution,
            config.synth_noise,
            seed=config.seed,
            variant=config.synth_variant,
            dtype=config.dtype,
        )
        held_out = None
        if config.synth_eval_per_class > 0:
            held_out = synth_generate(
                config.synth_classes,
                config.synth_eval_per_class,
                resolution,
                config.synth_noise,
                seed=config.seed + 1,
                variant=config.synth_variant,
                dtype=config.dtype,
            )
        return train, held_out

    def read(paths: Sequence[str]) -> Dataset:
        if config.dataset == "cifar100":
            labels = config.cifar100_labels
            return cifar100_read(list(paths), labels, dtype=config.dtype)
        return cifar_read(list(paths), dtype=config.dtype)

    train = read(config.cifar_train)
    if config.cifar_limit:
        train = subset(train, config.cifar_limit, config.seed)
    held_out = read(config.cifar_test) if config.cifar_test else None
    return train, held_out


def _optimizer(config: RunConfig) -> OptimizerState:
    return OptimizerState(
        config.lr, config.momentum, config.decay_factor, config.decay_every
    )


def _build(config: RunConfig, train: Dataset) -> Network:
    net_config = config.network_config(
        train.class_count, train.resolution, train.channels
    )
    rng = np.random.default_rng(config.seed)
    return build_network(net_config, rng, cells=config.cells)


def _check_fits(network: Network, dataset: Dataset) -> None:
    expected = (network.config.classes, tuple(network.config.resolution))
    if (dataset.class_count, dataset.resolution) != expected:
        raise DataError(
            f"{dataset.name} has {dataset.class_count} classes at "
            f"{dataset.resolution}, the network expects {expected[0]} classes "
            f"at {expected[1]}"
        )


def _fit_options(config: RunConfig) -> Dict[str, object]:
    return dict(
        augment=config.augment,
        prefetch_batches=config.prefetch,
        record_time=config.record_time,
    )


def cmd_train(config: RunConfig, out: str, init: Optional[str] = None) -> int:
    train, held_out = load_datasets(config)
    network = _build(config, train)
    if init is not None:
        restore_parameters(network, load_checkpoint(init), strict=config.init_strict)
        logging.info(f"Initialized from {init}")

    report = fit(
        network,
        train,
        _optimizer(config),
        config.epochs,
        config.seed,
        config.batch_size,
        held_out,
        **_fit_options(config),
    )
    checkpoint = os.path.join(out, "checkpoint.bcnv")
    save_checkpoint(network, checkpoint, config.to_dict())
    write_csv(os.path.join(out, "metrics.csv"), COLUMNS, report.to_rows())
    if report.rows:
        last = report.rows[-1]
        print(f"final loss {last.loss:.6f}, train accuracy {last.train_acc:.6f}")
    return EXIT_OK


def cmd_eval(config: RunConfig, out: str, checkpoint: str) -> int:
    network = network_from_checkpoint(load_checkpoint(checkpoint), mode="eval")
    train, held_out = load_datasets(config)
    dataset = held_out if held_out is not None else train
    _check_fits(network, dataset)
    result = evaluate(network, dataset, config.batch_size)
    rows = [
        [k, correct, total, f"{correct / total:.6f}" if total else ""]
        for k, correct, total in result.per_class()
    ]
    write_csv(os.path.join(out, "eval_per_class.csv"), PER_CLASS_COLUMNS, rows)
    print(
        f"accuracy {result.accuracy:.6f} ({result.correct}/{result.total}) "
        f"on {dataset.name}"
    )
    return EXIT_OK


def cmd_distill(
    config: RunConfig, out: str, teacher_path: str, init: Optional[str] = None
) -> int:
    teacher = network_from_checkpoint(load_checkpoint(teacher_path), mode="eval")
    if not isinstance(teacher, PTLNetwork):
        raise CheckpointError(
            f"{teacher_path}: the teacher must be a PTL network, got {teacher.kind}"
        )
    train, held_out = load_datasets(config)
    _check_fits(teacher, train)
    net_config = config.network_config(
        train.class_count, train.resolution, train.channels
    )
    if net_config.feature_channels != teacher.feature_channels:
        raise ConfigError(
            f"feature_channels: student extent {net_config.feature_channels} does "
            f"not match the teacher's {teacher.feature_channels}"
        )

    sweep = len(config.distill_lambda) > 1
    for lam in config.distill_lambda:
        student = build_backbone(net_config, np.random.default_rng(config.seed))
        if init is not None:
            checkpoint = load_checkpoint(init)
            restore_parameters(student, checkpoint, strict=config.init_strict)
        logging.info(f"Distilling with lambda {lam:g}")
        report = fit(
            student,
            train,
            _optimizer(config),
            config.epochs,
            config.seed,
            config.batch_size,
            held_out,
            distill=DistillConfig(lam, teacher, student),
            **_fit_options(config),
        )
        suffix = f"_lambda_{lam:g}" if sweep else ""
        checkpoint_name = f"student{suffix}.bcnv" if sweep else "checkpoint.bcnv"
        save_checkpoint(student, os.path.join(out, checkpoint_name), config.to_dict())
        write_csv(os.path.join(out, f"metrics{suffix}.csv"), COLUMNS, report.to_rows())
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, out: str) -> int:
    net_config = config.network_config(classes=3)
    reports = run_all(
        net_config, config.gradcheck_probes, config.gradcheck_tolerance, config.seed
    )
    rows = [report.to_csv() for report in reports]
    write_csv(os.path.join(out, "gradcheck.csv"), GRADCHECK_COLUMNS, rows)
    for row in rows:
        print(" ".join(row))
    failed = [report.name for report in reports if not report.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_inspect_state(
    config: RunConfig, out: str, checkpoint: Optional[str] = None, mode: str = "train"
) -> int:
    train, _ = load_datasets(config)
    if checkpoint is not None:
        network = network_from_checkpoint(load_checkpoint(checkpoint))
    else:
        network = _build(config, train)
    if not isinstance(network, PTLNetwork):
        raise ConfigError("cells: inspect-state needs a network with cells")
    _check_fits(network, train)

    network.set_mode(mode)
    network.reset_states()
    rows: List[List[object]] = []
    plan = BatchPlan(config.seed, config.batch_size)
    for index, (images, _) in enumerate(batches(train, plan, 0)):
        if index >= config.inspect_batches:
            break
        network.forward(images)
        for summary in network.state_summary():
            rows.append([index] + [_format(summary[key]) for key in STATE_COLUMNS[1:]])
    write_csv(os.path.join(out, "state_summary.csv"), STATE_COLUMNS, rows)
    cells = len(network.states)
    print(f"summarized {cells} cells over {len(rows) // cells} batches")
    return EXIT_OK


def _format(value: object) -> str:
    return f"{value:.6e}" if isinstance(value, float) else str(value)


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument(
        "--out", default=".", help="output directory (created if missing)"
    )
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument(
        "--dtype", choices=["f32", "f64"], help="override the config dtype"
    )
    common.add_argument("--verbose", action="store_true", help="log every batch")

    parser = argparse.ArgumentParser(
        prog="bconv",
        description="Batch-related convolutional cells: train, evaluate, distill.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser(
        "train", parents=[common], help="train a PTL or backbone network"
    )
    train.add_argument(
        "--init", "--checkpoint", dest="init", help="checkpoint to start from"
    )

    evaluate_cmd = commands.add_parser(
        "eval", parents=[common], help="eval-mode accuracy"
    )
    evaluate_cmd.add_argument("--checkpoint", "--init", dest="init", required=True)

    distill = commands.add_parser(
        "distill", parents=[common], help="distill a PTL teacher into a backbone"
    )
    distill.add_argument("--teacher", required=True, help="PTL teacher checkpoint")
    distill.add_argument(
        "--init", "--checkpoint", dest="init", help="student checkpoint to start from"
    )

    commands.add_parser(
        "gradcheck", parents=[common], help="finite-difference gradient checks"
    )

    inspect = commands.add_parser(
        "inspect-state", parents=[common], help="per-batch cell state norms"
    )
    inspect.add_argument("--checkpoint", "--init", dest="init")
    inspect.add_argument("--mode", choices=["train", "eval"], default="train")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    config = load_config(args.config).with_overrides(seed=args.seed, dtype=args.dtype)
    os.makedirs(args.out, exist_ok=True)
    out, init = args.out, getattr(args, "init", None)
    handlers: Dict[str, Callable[[], int]] = {
        "train": lambda: cmd_train(config, out, init),
        "eval": lambda: cmd_eval(config, out, init),
        "distill": lambda: cmd_distill(config, out, args.teacher, init),
        "gradcheck": lambda: cmd_gradcheck(config, out),
        "inspect-state": lambda: cmd_inspect_state(config, out, init, args.mode),
    }
    return handlers[args.command]()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the package; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    failures: List[Tuple[type, int]] = [
        (ConfigError, EXIT_CONFIG),
        (ShapeError, EXIT_CONFIG),
        (DataError, EXIT_DATA),
        (CheckpointError, EXIT_CHECKPOINT),
        (NonFiniteError, EXIT_DIVERGED),
    ]
    try:
        return _dispatch(args)
    except tuple(kind for kind, _ in failures) as e:
        code = next(code for kind, code in failures if isinstance(e, kind))
        print(f"bconv {args.command}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
