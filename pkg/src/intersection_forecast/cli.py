"""Command-line entry point for the forecasting pipeline and its multi-seed benchmark."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError
from tqdm import tqdm

from .checkpoint import CheckpointManager
from .config import PathsConfig, RunConfig, load_run_config
from .dataset import (
    SampleArchive,
    SampleDataset,
    SplitManifest,
    attach_rasters,
    extract_dataset,
    split,
    write_samples,
)
from .exceptions import ConfigError, MissingCheckpoint, UnknownSample
from .map_store import LaneGraphStore
from .model import ModelKind, predict_sample
from .plotting import (
    build_prediction_dump,
    load_prediction_dump,
    plot_prediction,
    plot_step_errors,
    save_prediction_dump,
)
from .simgen import (
    generate_scenario,
    iter_scenarios,
    load_scenario,
    read_scenarios,
    write_scenarios,
)
from .train_eval import (
    COMPARISON_ORDER,
    EXPECTED_RANKING,
    BenchmarkRow,
    EvalReport,
    displacement_error,
    evaluate,
    evaluate_by_behavior,
    format_benchmark,
    format_comparison,
    ordering_wins,
    ranking_holds,
    summarize_benchmark,
    train,
    write_benchmark_csv,
    write_comparison_csv,
    write_training_log,
)

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, ValidationError, FileNotFoundError, MissingCheckpoint, UnknownSample)
ALL_KINDS = [ModelKind(kind) for kind in COMPARISON_ORDER]


def cmd_generate(config: RunConfig, quiet: bool = False) -> Path:
    """Write config.generate.count scenarios as JSON Lines."""
    gen = config.generate
    out = config.paths.resolve("scenarios")
    scenarios = (
        generate_scenario(gen.spec_for(index, config.seed))
        for index in tqdm(range(gen.count), desc="generate", unit="scenario", disable=quiet)
    )
    count = write_scenarios(str(out), scenarios)
    print(f"generated {count} scenarios -> {out}")
    return out


def cmd_build_dataset(config: RunConfig, quiet: bool = False) -> SplitManifest:
    """Extract samples from the scenario file, write the archive and the split manifest."""
    source = config.paths.resolve("scenarios")
    scenarios = read_scenarios(str(source))
    ds = config.dataset
    samples, skipped = extract_dataset(
        scenarios,
        m=ds.m,
        n=ds.n,
        d=ds.search_distance,
        config=config.raster,
        inline_rasters=ds.inline_rasters,
        workers=ds.workers,
        show_progress=not quiet,
    )
    if not samples:
        raise ValueError(f"No samples could be extracted from {source}")
    manifest = split(samples, ds.split_ratio, config.seed)
    archive = config.paths.resolve("dataset")
    write_samples(samples, str(archive), config.raster, ds.m, ds.n, source=str(source))
    manifest.save(str(config.paths.split_file))

    scen = manifest.scenarios
    print(
        f"scenarios train/val/test: {len(scen['train'])}/{len(scen['val'])}/{len(scen['test'])}; "
        f"samples {len(manifest.train)}/{len(manifest.val)}/{len(manifest.test)}; "
        f"skipped {skipped} off-road windows -> {archive}"
    )
    return manifest


def _split_dataset(config: RunConfig, name: str, with_rasters: bool) -> SampleDataset:
    archive = SampleArchive(str(config.paths.resolve("dataset")))
    keys = SplitManifest.load(str(config.paths.split_file)).keys(name)
    if not with_rasters or not keys or archive[keys[0]].has_rasters:
        return SampleDataset(archive, keys, with_rasters=with_rasters)
    logger.info(f"Rendering rasters for the {name} split")
    scenarios = {s.scenario_id: s for s in iter_scenarios(str(config.paths.resolve("scenarios")))}
    samples = attach_rasters(
        [archive[key] for key in keys], scenarios, config.raster, config.dataset.search_distance
    )
    return SampleDataset(samples, with_rasters=True)


def cmd_train(config: RunConfig, kinds: Sequence[ModelKind], quiet: bool = False) -> List[Path]:
    """Train each kind and save its checkpoint once training succeeded."""
    manager = CheckpointManager(str(config.paths.resolve("checkpoints")))
    train_config = config.train.model_copy(update={"seed": config.seed})
    saved = []
    for kind in kinds:
        kind = ModelKind(kind)
        uses_rasters = kind != ModelKind.LSTM
        result = train(
            _split_dataset(config, "train", uses_rasters),
            _split_dataset(config, "val", uses_rasters),
            kind,
            train_config,
            config.model,
            show_progress=not quiet,
        )
        saved.append(manager.save(result.model, kind, config.model, config.seed))
        log = config.paths.resolve("reports") / f"train_{kind.value}.csv"
        write_training_log(result.history, str(log))
        print(
            f"trained {kind.value}: best val ADE {result.best_val_ade:.3f} m "
            f"at epoch {result.best_epoch} -> {saved[-1]}"
        )
    return saved


def cmd_evaluate(config: RunConfig, kinds: Sequence[ModelKind]) -> dict:
    """Evaluate each kind on the test split and write per-kind reports plus the comparison table."""
    manager = CheckpointManager(str(config.paths.resolve("checkpoints")))
    reports_dir = config.paths.resolve("reports")
    reports = {}
    for kind in kinds:
        kind = ModelKind(kind)
        model, _, _ = manager.load(kind.value)
        test_set = _split_dataset(config, "test", kind != ModelKind.LSTM)
        report = evaluate(model, test_set, config.train.batch_size)
        report.save(str(reports_dir / f"eval_{kind.value}.json"))
        by_behavior = evaluate_by_behavior(model, test_set, config.train.batch_size)
        (reports_dir / f"eval_{kind.value}_by_behavior.json").write_text(
            json.dumps({label: r.model_dump() for label, r in by_behavior.items()}, indent=2)
        )
        reports[kind.value] = report

    write_comparison_csv(reports, str(reports_dir / "comparison.csv"))
    print(format_comparison(reports))
    return reports


def cmd_predict(config: RunConfig, key: str, kind: ModelKind) -> Path:
    """Write predicted, true and constant-velocity trajectories of one sample."""
    kind = ModelKind(kind)
    archive = SampleArchive(str(config.paths.resolve("dataset")))
    if key not in archive:
        raise UnknownSample(f"Sample {key} is not in {archive.root}")
    model, _, _ = CheckpointManager(str(config.paths.resolve("checkpoints"))).load(kind.value)
    sample = archive[key]
    scenario = load_scenario(str(config.paths.resolve("scenarios")), sample.scenario_id)
    if kind != ModelKind.LSTM and not sample.has_rasters:
        sample = attach_rasters(
            [sample],
            {scenario.scenario_id: scenario},
            config.raster,
            config.dataset.search_distance,
        )[0]
    prediction = predict_sample(model, sample)
    dump = build_prediction_dump(scenario, sample, prediction, kind.value)
    out = config.paths.resolve("predictions") / f"{kind.value}_{key.replace(':', '_')}.json"
    save_prediction_dump(dump, str(out))
    fde = displacement_error(prediction, sample.future_positions, sample.n)
    print(f"predicted {key} with {kind.value}: FDE {fde:.3f} m -> {out}")
    return out


def cmd_plot(
    config: RunConfig, reports: Optional[Sequence[str]], predictions: Optional[Sequence[str]]
) -> List[Path]:
    """Plot step-error curves from reports and overlays from prediction dumps."""
    reports_dir = config.paths.resolve("reports")
    if reports is None:
        reports = [
            str(p) for p in sorted(reports_dir.glob("eval_*.json")) if "_by_behavior" not in p.name
        ]
    if predictions is None:
        predictions = [str(p) for p in sorted(config.paths.resolve("predictions").glob("*.json"))]
    if not reports and not predictions:
        logger.warning("Nothing to plot: no reports or prediction dumps found")
        return []

    plots = config.paths.resolve("plots")
    written = []
    loaded = {Path(p).stem.replace("eval_", ""): EvalReport.load(p) for p in reports}
    curve = plot_step_errors(loaded, str(plots / "step_errors.png"))
    if curve is not None:
        written.append(curve)
    for path in predictions:
        dump = load_prediction_dump(path)
        written.append(plot_prediction(dump, str(plots / f"{Path(path).stem}.png")))
    print(f"wrote {len(written)} figures -> {plots}")
    return written


def cmd_export_map(config: RunConfig, scenarios: Optional[str]) -> int:
    """Push every scenario lane graph into the Neo4j map store."""
    source = scenarios or str(config.paths.resolve("scenarios"))
    count = 0
    with LaneGraphStore(**config.map_store.model_dump()) as store:
        for scenario in iter_scenarios(source):
            store.save_graph(scenario.scenario_id, scenario.graph)
            count += 1
    print(f"exported {count} maps to {config.map_store.uri}")
    return count


def cmd_benchmark(
    config: RunConfig, kinds: Sequence[ModelKind], seeds: Sequence[int], quiet: bool = False
) -> Dict[str, BenchmarkRow]:
    """
    Run generate, build-dataset, train and evaluate once per seed, then aggregate.

    Each seed writes under <out>/benchmark/seed_<seed>. The summary goes to
    reports/benchmark.csv and reports/benchmark.json under <out>.
    """
    runs: Dict[int, Dict[str, EvalReport]] = {}
    root = Path(config.paths.out)
    for seed in seeds:
        seeded = config.model_copy(
            update={
                "seed": seed,
                "paths": PathsConfig(out=str(root / "benchmark" / f"seed_{seed}")),
            }
        )
        logger.info(f"Benchmark seed {seed} -> {seeded.paths.out}")
        cmd_generate(seeded, quiet)
        cmd_build_dataset(seeded, quiet)
        cmd_train(seeded, kinds, quiet)
        runs[seed] = cmd_evaluate(seeded, kinds)

    summary = summarize_benchmark(runs)
    reports_dir = config.paths.resolve("reports")
    write_benchmark_csv(summary, str(reports_dir / "benchmark.csv"))
    (reports_dir / "benchmark.json").write_text(
        json.dumps(
            {
                "summary": {kind: row.model_dump() for kind, row in summary.items()},
                "runs": {
                    str(seed): {kind: r.model_dump() for kind, r in reports.items()}
                    for seed, reports in runs.items()
                },
            },
            indent=2,
        )
    )
    print(format_benchmark(summary))
    verdict = "holds" if ranking_holds(summary) else "does not hold"
    print(f"mean 6s ADE ranking {' < '.join(EXPECTED_RANKING)}: {verdict}")
    full = ModelKind.SAPI.value
    for kind in COMPARISON_ORDER:
        if kind == full or kind not in summary or full not in summary:
            continue
        wins, compared = ordering_wins(runs, full, kind, metric="ade_6s")
        print(f"{full} beats {kind} on 6s ADE in {wins}/{compared} seeds")
    for row in summary.values():
        if not row.step_errors_non_decreasing:
            logger.warning(f"{row.kind}: mean per-step error is not non-decreasing")
    return summary


def _add_global_options(parser: argparse.ArgumentParser, top_level: bool) -> None:
    """Flags accepted before and after the command; later values win."""

    def default(value):
        return value if top_level else argparse.SUPPRESS

    parser.add_argument(
        "--config", default=default(None), help="JSON config file (default: $FORECAST_CONFIG)"
    )
    parser.add_argument("--seed", type=int, default=default(None), help="global seed")
    parser.add_argument("--out", default=default(None), help="output directory")
    parser.add_argument(
        "--set",
        action="append",
        dest="set" if top_level else "late_set",
        default=default([]),
        metavar="KEY=VALUE",
        help="override a config value by dot path, e.g. train.max_epochs=5",
    )
    parser.add_argument(
        "--log-level", default=default("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    parser.add_argument(
        "--quiet", action="store_true", default=default(False), help="hide progress bars"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intersection-forecast",
        description="Synthetic intersection trajectory forecasting pipeline",
    )
    _add_global_options(parser, top_level=True)
    common = argparse.ArgumentParser(add_help=False)
    _add_global_options(common, top_level=False)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate scenarios")
    sub.add_parser("build-dataset", parents=[common], help="extract samples and split them")
    kinds = [k.value for k in ModelKind]
    for name in ("train", "evaluate"):
        cmd = sub.add_parser(name, parents=[common], help=f"{name} models")
        cmd.add_argument("--model", action="append", choices=kinds, help="model kind (repeatable)")
    predict = sub.add_parser("predict", parents=[common], help="predict one sample")
    predict.add_argument("--sample", required=True, help="sample key scenario:agent:t_index")
    predict.add_argument("--model", default=ModelKind.SAPI.value, choices=kinds)
    plot = sub.add_parser("plot", parents=[common], help="emit figures")
    plot.add_argument("--reports", nargs="*", help="EvalReport JSON files")
    plot.add_argument("--predictions", nargs="*", help="prediction dump JSON files")
    export = sub.add_parser(
        "export-map", parents=[common], help="store scenario lane graphs in Neo4j"
    )
    export.add_argument("--scenarios", help="scenario JSONL file")
    bench = sub.add_parser(
        "benchmark", parents=[common], help="run the whole pipeline once per seed and aggregate"
    )
    bench.add_argument("--seeds", nargs="+", type=int, required=True, help="seeds to run")
    bench.add_argument("--model", action="append", choices=kinds, help="model kind (repeatable)")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse the command line, merging --set overrides given after the command."""
    args = build_parser().parse_args(argv)
    args.set = [*args.set, *getattr(args, "late_set", [])]
    return args


def _kinds(selected: Optional[List[str]]) -> List[ModelKind]:
    return [ModelKind(k) for k in selected] if selected else list(ALL_KINDS)


def run(args: argparse.Namespace) -> None:
    config = load_run_config(args.config, args.set, args.seed, args.out)
    if args.command == "generate":
        cmd_generate(config, args.quiet)
    elif args.command == "build-dataset":
        cmd_build_dataset(config, args.quiet)
    elif args.command == "train":
        cmd_train(config, _kinds(args.model), args.quiet)
    elif args.command == "evaluate":
        cmd_evaluate(config, _kinds(args.model))
    elif args.command == "predict":
        cmd_predict(config, args.sample, args.model)
    elif args.command == "plot":
        cmd_plot(config, args.reports, args.predictions)
    elif args.command == "export-map":
        cmd_export_map(config, args.scenarios)
    elif args.command == "benchmark":
        cmd_benchmark(config, _kinds(args.model), args.seeds, args.quiet)


def exit_code(error: BaseException) -> Tuple[int, str]:
    if isinstance(error, USAGE_ERRORS):
        return 2, "usage"
    return 1, "runtime"


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI.

    Returns:
        0 on success, 2 for configuration or input errors, 1 for runtime failures
    """
    args = parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        run(args)
    except Exception as e:
        code, kind = exit_code(e)
        logger.error(f"{args.command} failed ({kind} error): {e}")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
