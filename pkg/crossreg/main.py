"""
Crossreg - Main Application

Command-line entry point of the cross-source registration toolkit. It
generates synthetic datasets, registers scene pairs, re-evaluates stored
results at other thresholds, runs the embedded self-test and lists runs
kept in the optional results store.

Commands:
    gen       Generate a synthetic dataset of scene pairs
    register  Register a pair directory or a whole dataset
    eval      Recompute metrics from a records file or a stored run
    selftest  Run the embedded invariant suite
    history   List stored runs
"""

import argparse
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import ValidationError

# Load environment variables
load_dotenv()

from database import database_url, list_runs, load_run_records, open_store, save_run
from errors import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, ConfigError, CrossRegError, EmptyInputError
from models import (
    TOOL_VERSION,
    AttentionMode,
    DatasetConfig,
    EstimatorConfig,
    EstimatorVariant,
    PairRecord,
    PipelineConfig,
    RunManifest,
)
from stages import benchmark, fileio, selftest, simgen
from stages.pipeline import ABLATION_PRESETS, apply_ablation

logger = logging.getLogger("crossreg")

THREADS_ENV = "CROSSREG_THREADS"
LOG_LEVEL_ENV = "CROSSREG_LOG_LEVEL"

RECORDS_FILE = "records.tsv"
TABLE_FILE = "table.txt"
CURVE_FILE = "recall_curve.tsv"

ESTIMATOR_CHOICES = [variant.value for variant in EstimatorVariant] + ["all"]
# Sweep order of `--estimator all`
SWEEP_ORDER = [EstimatorVariant.WEIGHTED_SVD, EstimatorVariant.RANSAC, EstimatorVariant.LGR]


class UsageArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the config/usage code."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def configure_logging() -> None:
    level = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def resolve_workers(flag: Optional[int], configured: int) -> int:
    """
    Worker count precedence: --workers, then CROSSREG_THREADS, then the config.

    Raises:
        ConfigError: If the environment value is not a positive integer
    """
    if flag is not None:
        if flag < 1:
            raise ConfigError(f"--workers must be >= 1, got {flag}")
        return flag
    env = os.getenv(THREADS_ENV)
    if env:
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{env}'")
        if workers < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {workers}")
        return workers
    return configured


def load_pipeline_config(path: Optional[str]) -> PipelineConfig:
    return fileio.load_config(path, PipelineConfig, "pipeline") if path else PipelineConfig()


def load_dataset_config(path: Optional[str]) -> DatasetConfig:
    return fileio.load_config(path, DatasetConfig, "dataset") if path else DatasetConfig()


def dataset_snapshot(cfg: DatasetConfig) -> Dict[str, Any]:
    # Sensor poses are placed by the generator, not configured
    return cfg.model_dump(mode="json", exclude={"ring": {"pose"}, "fan": {"pose"}})


def estimator_configs(cfg: PipelineConfig, choice: Optional[str]) -> List[EstimatorConfig]:
    if choice is None:
        return [cfg.estimator]
    variants = SWEEP_ORDER if choice == "all" else [EstimatorVariant(choice)]
    return [cfg.estimator.model_copy(update={"variant": variant}) for variant in variants]


def parse_threshold_pair(text: str) -> Tuple[float, float]:
    """'RRE:RTE' -> (rre, rte); used by `eval --sweep`."""
    try:
        rre, rte = (float(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RRE:RTE, got '{text}'")
    if rre <= 0 or rte <= 0:
        raise argparse.ArgumentTypeError(f"thresholds must be positive, got '{text}'")
    return rre, rte


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


# Commands
def cmd_gen(args: argparse.Namespace) -> int:
    """Generate `count` pair directories under the output directory."""
    cfg = load_dataset_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed

    start = time.perf_counter()
    pairs = simgen.generate_suite(cfg, args.count, seed)
    timings = {"generate": _elapsed_ms(start)}

    start = time.perf_counter()
    outputs = []
    for index, pair in enumerate(pairs):
        outputs += fileio.write_pair(os.path.join(args.out, fileio.pair_dir_name(index)), pair)
    timings["write"] = _elapsed_ms(start)

    manifest = RunManifest(
        command="gen",
        config=dataset_snapshot(cfg),
        seeds={"dataset": seed},
        inputs=[args.config] if args.config else [],
        outputs=outputs,
        timings_ms=timings,
    )
    fileio.write_manifest(args.out, manifest)
    sys.stdout.write(f"Generated {len(pairs)} pairs in {args.out}\n")
    return EXIT_OK


def _register_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_pipeline_config(args.config)
    updates: Dict[str, Any] = {}
    if args.no_omp:
        updates["use_omp"] = False
    if args.attention:
        updates["attention_mode"] = AttentionMode(args.attention)
    if args.seed is not None:
        updates["estimator"] = cfg.estimator.model_copy(update={"seed": args.seed})
    if args.rre_thresh is not None:
        updates["rre_threshold"] = args.rre_thresh
    if args.rte_thresh is not None:
        updates["rte_threshold"] = args.rte_thresh
    updates["workers"] = resolve_workers(args.workers, cfg.workers)
    try:
        return PipelineConfig.model_validate({**cfg.model_dump(), **updates})
    except ValidationError as e:
        error = e.errors()[0]
        raise ConfigError(f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}")


def _write_report(
    out_dir: str,
    report: benchmark.BenchmarkReport,
    cfg: PipelineConfig,
    inputs: List[str],
    timings: Dict[str, float],
) -> List[str]:
    records_path = os.path.join(out_dir, RECORDS_FILE)
    table_path = os.path.join(out_dir, TABLE_FILE)
    fileio.write_records(records_path, report.records)
    table = benchmark.format_table(report.rows, cfg.rre_threshold, cfg.rte_threshold, [benchmark.matching_note(cfg)])
    fileio.write_text(table_path, table)
    manifest = RunManifest(
        command="register",
        config=cfg.model_dump(mode="json"),
        seeds={"estimator": cfg.estimator.seed},
        inputs=inputs,
        outputs=[records_path, table_path],
        timings_ms=timings,
    )
    fileio.write_manifest(out_dir, manifest)
    return [records_path, table_path]


def cmd_register(args: argparse.Namespace) -> int:
    """Register every pair found under `input`; exit 1 if any pair errored."""
    cfg = _register_config(args)
    estimators = estimator_configs(cfg, args.estimator)

    pair_dirs = fileio.find_pair_dirs(args.input)
    if not pair_dirs:
        raise EmptyInputError(f"No pair directories under {args.input}")
    start = time.perf_counter()
    pairs = [fileio.read_pair(directory) for directory in pair_dirs]
    load_ms = _elapsed_ms(start)

    keys = sorted(ABLATION_PRESETS) if args.ablation == "all" else [args.ablation] if args.ablation else [None]
    url = database_url(args.db)
    manager = open_store(url) if url else None

    reports = []
    for key in keys:
        run_cfg = apply_ablation(cfg, key) if key else cfg
        out_dir = os.path.join(args.out, f"ablation_{key}") if len(keys) > 1 else args.out
        start = time.perf_counter()
        report = benchmark.run_benchmark(pairs, run_cfg, estimators, workers=run_cfg.workers)
        timings = {"load": load_ms, "register": _elapsed_ms(start)}
        _write_report(out_dir, report, run_cfg, pair_dirs, timings)
        reports.append(report)
        if manager:
            run_id = save_run(
                manager, "register", report.label, run_cfg.model_dump(mode="json"),
                {"estimator": run_cfg.estimator.seed}, report.rows, report.records,
                [result.timings_ms if result else {} for result in report.results],
            )
            sys.stdout.write(f"Stored as run {run_id}\n")

    rows = [row for report in reports for row in report.rows]
    notes = [benchmark.matching_note(apply_ablation(cfg, key) if key else cfg) for key in keys]
    sys.stdout.write(benchmark.format_table(rows, cfg.rre_threshold, cfg.rte_threshold, list(dict.fromkeys(notes))))
    errored = sum(1 for report in reports for record in report.records if record.error)
    if errored:
        logger.error(f"{errored} pair records errored")
        return EXIT_PARTIAL
    return EXIT_OK


def _eval_records(args: argparse.Namespace) -> Tuple[List[PairRecord], str]:
    if args.run_id is not None:
        url = database_url(args.db)
        if not url:
            raise ConfigError("--run-id needs --db or CROSSREG_DATABASE_URL")
        return load_run_records(open_store(url), args.run_id), f"run {args.run_id}"
    if not args.records:
        raise ConfigError("eval needs a records file or --run-id")
    path = args.records
    if os.path.isdir(path):
        path = os.path.join(path, RECORDS_FILE)
    return fileio.read_records(path), path


def cmd_eval(args: argparse.Namespace) -> int:
    """Recompute RR, mean errors and IR at the given thresholds, or a recall curve."""
    records, source = _eval_records(args)
    if not records:
        raise EmptyInputError(f"No records in {source}")

    if args.sweep:
        output = benchmark.format_curve(benchmark.recall_curve(records, args.sweep))
        name = CURVE_FILE
    else:
        rows = benchmark.aggregate_records(records, os.path.basename(os.path.dirname(source)) or source,
                                           args.rre_thresh, args.rte_thresh)
        output = benchmark.format_table(rows, args.rre_thresh, args.rte_thresh)
        name = TABLE_FILE

    if args.out:
        path = os.path.join(args.out, name)
        fileio.write_text(path, output)
        fileio.write_manifest(args.out, RunManifest(
            command="eval",
            config={"rre_threshold": args.rre_thresh, "rte_threshold": args.rte_thresh,
                    "sweep": [list(pair) for pair in args.sweep or []]},
            inputs=[source],
            outputs=[path],
        ))
    sys.stdout.write(output)
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    """Run every invariant check; exit 0 iff all pass."""
    fault = args.inject_fault or os.getenv(selftest.FAULT_ENV) or None
    start = time.perf_counter()
    results = selftest.run_selftest(inject_fault=fault)
    sys.stdout.write(selftest.format_results(results))
    if args.out:
        path = os.path.join(args.out, "selftest.txt")
        fileio.write_text(path, selftest.format_results(results))
        fileio.write_manifest(args.out, RunManifest(
            command="selftest", outputs=[path], timings_ms={"selftest": _elapsed_ms(start)},
        ))
    return EXIT_OK if all(result.passed for result in results) else EXIT_PARTIAL


def cmd_history(args: argparse.Namespace) -> int:
    url = database_url(args.db)
    if not url:
        raise ConfigError("history needs --db or CROSSREG_DATABASE_URL")
    manager = open_store(url)
    runs = list_runs(manager, args.limit)
    if not runs:
        sys.stdout.write("No stored runs\n")
        return EXIT_OK
    for run in runs:
        recall = "-" if run["recall"] is None else f"{run['recall'] * 100.0:.1f}"
        mean_ir = "-" if run["mean_ir"] is None else f"{run['mean_ir'] * 100.0:.1f}"
        sys.stdout.write(
            f"{run['id']}\t{run['created']}\t{run['command']}\t{run['label']}\t"
            f"pairs={run['pairs']}\tRR(%)={recall}\tIR(%)={mean_ir}\n"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = UsageArgumentParser(prog="crossreg", description="Cross-source point cloud registration toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=UsageArgumentParser)

    gen = commands.add_parser("gen", help="Generate a synthetic dataset")
    gen.add_argument("--config", help="Dataset INI file")
    gen.add_argument("--out", required=True, help="Output dataset directory")
    gen.add_argument("--count", type=int, default=50, help="Number of pairs")
    gen.add_argument("--seed", type=int, help="Overrides the config seed")
    gen.set_defaults(handler=cmd_gen)

    register = commands.add_parser("register", help="Register a pair or dataset directory")
    register.add_argument("input", help="Pair directory or dataset directory")
    register.add_argument("--config", help="Pipeline INI file")
    register.add_argument("--estimator", choices=ESTIMATOR_CHOICES, help="Estimator, or 'all' to sweep")
    register.add_argument("--no-omp", action="store_true", help="Disable the overlap masks")
    register.add_argument("--attention", choices=[mode.value for mode in AttentionMode])
    register.add_argument("--ablation", choices=sorted(ABLATION_PRESETS) + ["all"], help="Ablation row preset")
    register.add_argument("--out", default="results", help="Output directory")
    register.add_argument("--workers", type=int, help="Concurrent pairs")
    register.add_argument("--seed", type=int, help="Overrides the estimator seed")
    register.add_argument("--rre-thresh", type=float, help="Success RRE threshold (deg)")
    register.add_argument("--rte-thresh", type=float, help="Success RTE threshold (m)")
    register.add_argument("--db", help="Results store URL")
    register.set_defaults(handler=cmd_register)

    evaluate = commands.add_parser("eval", help="Recompute metrics from records")
    evaluate.add_argument("records", nargs="?", help="records.tsv, or a register output directory")
    evaluate.add_argument("--rre-thresh", type=float, default=2.0, help="Success RRE threshold (deg)")
    evaluate.add_argument("--rte-thresh", type=float, default=0.5, help="Success RTE threshold (m)")
    evaluate.add_argument("--sweep", nargs="+", type=parse_threshold_pair, metavar="RRE:RTE",
                          help="Emit a recall curve over these threshold pairs")
    evaluate.add_argument("--run-id", type=int, help="Stored run to evaluate")
    evaluate.add_argument("--db", help="Results store URL")
    evaluate.add_argument("--out", help="Also write the output here")
    evaluate.set_defaults(handler=cmd_eval)

    check = commands.add_parser("selftest", help="Run the embedded invariant suite")
    check.add_argument("--inject-fault", help=argparse.SUPPRESS)
    check.add_argument("--out", help="Also write the report here")
    check.set_defaults(handler=cmd_selftest)

    history = commands.add_parser("history", help="List stored runs")
    history.add_argument("--db", help="Results store URL")
    history.add_argument("--limit", type=int, default=20)
    history.set_defaults(handler=cmd_history)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run the command.

    Returns:
        int: Process exit code (0 success, 1 partial, 2 I/O, 3 config, 4 parse, 5 empty)
    """
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except CrossRegError as e:
        logger.error(str(e))
        sys.stderr.write(f"crossreg: {e}\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
