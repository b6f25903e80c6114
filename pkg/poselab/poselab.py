"""PoseLab - command-line entry point.

Subcommands::

    poselab dataset gen --config run.json --out data/
    poselab dataset import-bop lmo/ --out data/
    poselab train cvae --config run.json --data data/ --out runs/cvae.pt
    poselab train heads --cvae runs/cvae.pt --data data/ --out runs/heads.pt
    poselab infer --cvae runs/cvae.pt --heads runs/heads.pt --data data/ --out runs/results.csv
    poselab baseline lut --cvae runs/cvae.pt --data data/ --out runs/lut.csv
    poselab evaluate --results runs/results.csv --data data/ --out runs/report.json
    poselab ablate --axis alpha --data data/ --out runs/ablation/

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

from poselab import __version__
from poselab.errors import ConfigError, DataError, PoseLabError, UsageError
from poselab.models.settings import AblationAxis, RunConfig, load_run_config
from poselab.services import pipeline
from poselab.services.cvae import load_cvae, save_cvae
from poselab.services.datasets import import_bop_dataset
from poselab.services.regression import save_heads
from poselab.services.storage import (
    file_sha256,
    manifest_path,
    read_manifest,
    write_csv,
    write_run_manifest,
)
from poselab.services.synthetic import generate_synthetic_dataset
from poselab.services.training import train_cvae, train_heads

logger = logging.getLogger("poselab")

DEVICE_ENV = "POSELAB_DEVICE"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    """One stream handler on the root logger; -1 quiet, 0 info, 1+ debug."""
    level = logging.WARNING if verbosity < 0 else logging.DEBUG if verbosity > 0 else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def resolve_device() -> str:
    """Torch device from POSELAB_DEVICE (cpu by default)."""
    device = os.environ.get(DEVICE_ENV, "cpu").strip() or "cpu"
    if device != "cpu" and not device.startswith("cuda"):
        raise ConfigError(f"{DEVICE_ENV} must be 'cpu' or 'cuda[:N]', got '{device}'")
    return device


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    parser = _Parser(prog="poselab", description="Multi-object 6-DoF pose estimation")
    parser.add_argument("--version", action="version", version=f"poselab {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    dataset = commands.add_parser("dataset", help="create or import datasets")
    dataset_cmds = dataset.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = dataset_cmds.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--out", type=Path, required=True)
    bop = dataset_cmds.add_parser("import-bop", parents=[common], help="index a BOP dataset")
    bop.add_argument("bop_dir", type=Path)
    bop.add_argument("--out", type=Path, required=True)
    bop.add_argument("--train-split", default="train_pbr")
    bop.add_argument("--test-split", default="test")

    train = commands.add_parser("train", help="train the CVAE or the pose heads")
    train_cmds = train.add_subparsers(dest="action", required=True, parser_class=_Parser)
    cvae = train_cmds.add_parser("cvae", parents=[common], help="train the CVAE")
    cvae.add_argument("--data", type=Path, required=True)
    cvae.add_argument("--out", type=Path, required=True)
    heads = train_cmds.add_parser("heads", parents=[common], help="train the regression heads")
    heads.add_argument("--cvae", type=Path, required=True)
    heads.add_argument("--data", type=Path, required=True)
    heads.add_argument("--out", type=Path, required=True)

    infer = commands.add_parser("infer", parents=[common], help="estimate test poses")
    infer.add_argument("--cvae", type=Path, required=True)
    infer.add_argument("--heads", type=Path, required=True)
    infer.add_argument("--data", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)

    baseline = commands.add_parser("baseline", help="latent lookup-table baseline")
    baseline_cmds = baseline.add_subparsers(dest="action", required=True, parser_class=_Parser)
    lut = baseline_cmds.add_parser("lut", parents=[common], help="nearest-neighbour poses")
    lut.add_argument("--cvae", type=Path, required=True)
    lut.add_argument("--data", type=Path, required=True)
    lut.add_argument("--out", type=Path, required=True)

    evaluate = commands.add_parser("evaluate", parents=[common], help="score a results CSV")
    evaluate.add_argument("--results", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--compare", type=Path, help="LUT results CSV to compare against")

    ablate = commands.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    ablate.add_argument("--axis", required=True, choices=[a.value for a in AblationAxis])
    ablate.add_argument("--data", type=Path, required=True)
    ablate.add_argument("--out", type=Path, required=True)
    ablate.add_argument("--parallel", action="store_true", help="run axis values in a process pool")
    return parser


def _record(artifact: Path, argv: Sequence[str], config: RunConfig, seed: int) -> None:
    write_run_manifest(
        artifact, ["poselab", *argv], config.config_hash(), seed, config.model_dump(mode="json")
    )
    print(artifact)


def _dispatch(args: argparse.Namespace, argv: Sequence[str], config: RunConfig) -> None:
    device = resolve_device()
    logger.debug("running %s on %s", args.command, device)
    if args.command == "dataset" and args.action == "gen":
        generate_synthetic_dataset(config.generator, args.out)
        for split in ("train", "val", "test"):
            _record(manifest_path(args.out, split), argv, config, config.generator.seed)
    elif args.command == "dataset" and args.action == "import-bop":
        import_bop_dataset(
            args.bop_dir, args.out, args.train_split, args.test_split,
            config.generator.val_fraction, config.seed,
        )
        for split in ("train", "val", "test"):
            _record(manifest_path(args.out, split), argv, config, config.seed)
    elif args.command == "train" and args.action == "cvae":
        result = train_cvae(read_manifest(args.data), config, device)
        _record(save_cvae(result.model, args.out, config.seed), argv, config, config.seed)
        log = write_csv(result.log, args.out.with_suffix(".log.csv"))
        _record(log, argv, config, config.seed)
    elif args.command == "train" and args.action == "heads":
        model = load_cvae(args.cvae, device)
        result = train_heads(read_manifest(args.data), model, config, device)
        bundle = save_heads(result.regressor, args.out, file_sha256(args.cvae))
        _record(bundle, argv, config, config.seed)
        _record(write_csv(result.log, args.out.with_suffix(".log.csv")), argv, config, config.seed)
    elif args.command == "infer":
        out = pipeline.infer(args.data, args.cvae, args.heads, args.out, config, device)
        _record(out, argv, config, config.seed)
    elif args.command == "baseline":
        results, codebook = pipeline.baseline_lut(args.data, args.cvae, args.out, config, device)
        _record(codebook, argv, config, config.seed)
        _record(results, argv, config, config.seed)
    elif args.command == "evaluate":
        _, written = pipeline.evaluate(args.data, args.results, args.out, config, args.compare)
        for path in written:
            _record(path, argv, config, config.seed)
    elif args.command == "ablate":
        table = pipeline.run_ablation(
            args.axis, args.data, args.out, config, device, args.parallel or None
        )
        _record(table, argv, config, config.seed)
    else:
        raise UsageError(f"unknown command {args.command}")


def run_command(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        configure_logging(-1 if args.quiet else 1 if args.verbose else 0)
        config = load_run_config(args.config)
        _dispatch(args, argv, config)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except PoseLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        logger.debug("unhandled %s", type(exc).__name__, exc_info=exc)
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
