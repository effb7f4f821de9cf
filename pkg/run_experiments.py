from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from detadapt.config import DEFAULTS, RunConfig, describe_defaults, format_value, load_config
from detadapt.errors import CheckpointMismatchError, ConfigError, DataError, NumericalError
from detadapt.evalmap import read_metrics, write_metrics
from detadapt.toydomains import (
    MANIFEST_NAME,
    STATS_NAME,
    compute_domain_stats,
    generate_dataset,
    load_stats,
    read_manifest,
    save_stats,
    translate_manifest,
)
from detadapt.trainer import ablate, evaluate_checkpoint, run_pipeline, stats_transform
from utils import DATA_PATH, RUNS_PATH, load_json, manifest_checksum


logger = logging.getLogger("detadapt.runner")

# Checked in order; subclasses come before their bases.
_EXIT_CODES: tuple[tuple[type[BaseException], int], ...] = (
    (CheckpointMismatchError, 5),
    (NumericalError, 4),
    (ConfigError, 2),
    (DataError, 3),
    (OSError, 3),
)

SUMMARY_COLUMNS = ["method", "adaptation", "map"]


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    handler: Callable[[argparse.Namespace], int | None]
    help: str


def _configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s:%(name)s:%(message)s",
    )


def _warn(message: str) -> None:
    logger.warning(message)
    if os.environ.get("GITHUB_ACTIONS", "").lower() == "true":
        print(f"::warning::{message}", file=sys.stderr)


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from exc
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {number}")
    return number


def _load(args: argparse.Namespace, **overrides) -> RunConfig:
    return load_config(args.config, {k: v for k, v in overrides.items() if v is not None})


class _ConfigDefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Flags left unset fall back to the config, so their help shows the config default."""

    def _get_help_string(self, action: argparse.Action) -> str:
        key = getattr(action, "config_key", None)
        if key is not None and action.default is None:
            return f"{action.help} (default: {format_value(DEFAULTS[key][0])} from the config)"
        return super()._get_help_string(action)


def _config_flag(parser: argparse.ArgumentParser, *flags: str, key: str, **kwargs) -> None:
    action = parser.add_argument(*flags, **kwargs)
    action.config_key = key


def _gen_data(args: argparse.Namespace) -> None:
    config = _load(args, seed=args.seed, workers=args.workers)
    spec = config.scene_spec(args.domain, args.split)
    count = args.count if args.count is not None else config.split_count(args.domain, args.split)
    out = Path(args.out) if args.out else DATA_PATH / f"{args.domain}_{args.split}"
    manifest = generate_dataset(spec, count, out, workers=config["workers"], progress=args.verbose)
    save_stats(compute_domain_stats(manifest), out / STATS_NAME)
    manifest_path = out / MANIFEST_NAME
    logger.info("manifest checksum %s", manifest_checksum(manifest_path))
    print(manifest_path)


def _stats(args: argparse.Namespace) -> None:
    manifest = read_manifest(args.data)
    out = Path(args.out) if args.out else Path(args.data).parent / STATS_NAME
    stats = compute_domain_stats(manifest)
    save_stats(stats, out)
    logger.info("mean %s std %s", stats.mean, stats.std)
    print(out)


def _translate(args: argparse.Namespace) -> None:
    manifest = read_manifest(args.data)
    translated = translate_manifest(manifest, load_stats(args.stats), args.out)
    print(translated.root / MANIFEST_NAME)


def _train(args: argparse.Namespace) -> None:
    config = _load(
        args,
        mode=args.mode,
        levels=args.levels,
        seed=args.seed,
        iterations=args.iterations,
        source_train=args.source_train,
        target_train=args.target_train,
        source_test=args.source_test,
        target_test=args.target_test,
        **{"lambda": args.lam},
    )
    train_config = config.train_config()
    out = Path(args.out) if args.out else RUNS_PATH / train_config.mode.value
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    metrics = run_pipeline(train_config, out, progress=args.verbose)
    print(f"mAP {metrics.map_score:.4f}")


def _eval(args: argparse.Namespace) -> None:
    config = _load(args)
    manifest = read_manifest(args.data, split="test")
    transform = stats_transform(load_stats(args.translate_to)) if args.translate_to else None
    detector = config.detector_config()
    metrics = evaluate_checkpoint(
        args.checkpoint, manifest, detector, transform, config["eval_batch_size"], config["iou_threshold"]
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    write_metrics(metrics, out / "metrics.csv")
    print(f"mAP {metrics.map_score:.4f}")


def _ablate(args: argparse.Namespace) -> None:
    config = _load(
        args,
        mode=args.mode,
        ablation_subsets=args.subsets,
        ablation_seeds=args.seeds,
        workers=args.workers,
        iterations=args.iterations,
    )
    if args.mode is None and config["mode"] == "baseline":
        config = config.with_overrides({"mode": "feature_align"})
    subsets = config.ablation_subsets()
    out = Path(args.out) if args.out else RUNS_PATH / "ablation"
    table = ablate(config.train_config(), subsets, out, seeds=config["ablation_seeds"], workers=config["workers"])
    print(table.to_string(index=False))


def _summary(args: argparse.Namespace) -> None:
    if not args.run_dirs:
        raise ConfigError("summary needs at least one run directory")
    rows = []
    for run_dir in map(Path, args.run_dirs):
        run_file = run_dir / "run.json"
        metrics_file = run_dir / "metrics.csv"
        if not run_file.exists() or not metrics_file.exists():
            raise DataError(f"{run_dir} has no run.json/metrics.csv; was it produced by the train subcommand?")
        run = load_json(run_file)
        rows.append(
            {"method": run["mode"], "adaptation": run["adaptation"], "map": read_metrics(metrics_file).map_score}
        )
    table = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False)
    print(table.to_string(index=False))


def _defaults(args: argparse.Namespace) -> None:
    text = describe_defaults()
    if not args.out:
        print(text, end="")
        return
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(out)


PIPELINES = [
    PipelineSpec("gen-data", _gen_data, "Render a source or target dataset split."),
    PipelineSpec("stats", _stats, "Compute per-channel color statistics of a dataset."),
    PipelineSpec("translate", _translate, "Write a copy of a dataset translated to given statistics."),
    PipelineSpec("train", _train, "Train one mode end to end and evaluate on target test."),
    PipelineSpec("eval", _eval, "Evaluate a checkpoint on a manifest."),
    PipelineSpec("ablate", _ablate, "Train one feature-alignment model per discriminator subset."),
    PipelineSpec("summary", _summary, "Collate metrics of several run directories."),
    PipelineSpec("defaults", _defaults, "Print a starter config file with every key and its default."),
]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Domain-adversarial detection experiments on procedural scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}
    for spec in PIPELINES:
        p = sub.add_parser(spec.name, help=spec.help, description=spec.help,
                           formatter_class=_ConfigDefaultsFormatter)
        p.set_defaults(handler=spec.handler)
        p.add_argument("--verbose", action="store_true", help="Enable debug logging and progress bars.")
        commands[spec.name] = p

    p = commands["gen-data"]
    p.add_argument("--config", help="key=value config file.")
    p.add_argument("--domain", required=True, choices=["source", "target"], help="Domain to render.")
    p.add_argument("--split", default="train", choices=["train", "test"], help="Dataset split.")
    p.add_argument("--out", help="Output directory; defaults to <data path>/<domain>_<split>.")
    p.add_argument("--count", type=_positive_int, help="Number of images; defaults to the config's split count.")
    _config_flag(p, "--seed", key="seed", type=int, help="Scene seed.")
    _config_flag(p, "--workers", key="workers", type=_positive_int, help="Rendering processes.")

    p = commands["stats"]
    p.add_argument("--data", required=True, help="Manifest to measure.")
    p.add_argument("--out", help="Output stats.json; defaults to the manifest's directory.")

    p = commands["translate"]
    p.add_argument("--data", required=True, help="Manifest to translate.")
    p.add_argument("--stats", required=True, help="stats.json of the destination domain.")
    p.add_argument("--out", required=True, help="Output directory.")

    p = commands["train"]
    p.add_argument("--config", help="key=value config file.")
    _config_flag(p, "--mode", key="mode", help="Training mode.")
    _config_flag(p, "--lambda", key="lambda", dest="lam", type=float, help="Gradient reversal weight.")
    _config_flag(p, "--levels", key="levels", help="Comma-separated discriminator levels.")
    _config_flag(p, "--iterations", key="iterations", type=_positive_int, help="SGD iterations.")
    _config_flag(p, "--seed", key="seed", type=int, help="Run seed.")
    p.add_argument("--source-train", help="Source training manifest.")
    p.add_argument("--target-train", help="Target training manifest.")
    p.add_argument("--source-test", help="Source test manifest.")
    p.add_argument("--target-test", help="Target test manifest.")
    p.add_argument("--out", help="Run directory; defaults to <runs path>/<mode>.")

    p = commands["eval"]
    p.add_argument("--config", help="key=value config file describing the architecture.")
    p.add_argument("--checkpoint", required=True, help="Checkpoint file.")
    p.add_argument("--data", required=True, help="Manifest to evaluate on.")
    p.add_argument("--translate-to", help="stats.json to translate test images toward before inference.")
    p.add_argument("--out", help="Metrics directory; defaults to <checkpoint dir>/eval.")

    p = commands["ablate"]
    p.add_argument("--config", help="key=value config file.")
    p.add_argument("--mode", help="Feature-alignment mode (feature_align when the config says baseline).")
    _config_flag(p, "--subsets", key="ablation_subsets", help="Semicolon-separated level subsets.")
    _config_flag(p, "--seeds", key="ablation_seeds", help="Comma-separated seeds averaged per row.")
    _config_flag(p, "--iterations", key="iterations", type=_positive_int, help="SGD iterations per run.")
    _config_flag(p, "--workers", key="workers", type=_positive_int, help="Parallel training processes.")
    p.add_argument("--out", help="Sweep directory; defaults to <runs path>/ablation.")

    p = commands["summary"]
    p.add_argument("run_dirs", nargs="*", help="Run directories written by the train subcommand.")
    p.add_argument("--out", help="Optional CSV path for the table.")

    p = commands["defaults"]
    p.add_argument("--out", help="Write the starter config here instead of printing it.")
    return parser


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    return _build_parser().parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    _configure_logging(args.verbose)
    try:
        args.handler(args)
    except Exception as exc:
        for exc_type, code in _EXIT_CODES:
            if isinstance(exc, exc_type):
                exc_text = "".join(traceback.format_exception_only(type(exc), exc)).strip()
                _warn(f"{args.command} failed: {exc_text}")
                return code
        raise
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
