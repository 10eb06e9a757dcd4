import argparse
import datetime
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from cuspbranch import __version__
from cuspbranch.experiments.runner import run_experiment
from cuspbranch.schemas.run_config import RunConfig, load_config
from cuspbranch.utils.constant import OUTPUT_ENV, THREADS_ENV, ExitCode, Experiment
from cuspbranch.utils.errors import ConfigInvalid, CuspBranchError
from cuspbranch.utils.storage_utils import (
    create_run_dir,
    save_plot_data,
    save_table,
    write_manifest,
)

logger = logging.getLogger(__name__)


def get_param_value(request_val: Any, env_key: str, default_val: Any) -> Any:
    """Get parameter value with priority: request -> env -> default"""
    if request_val is not None:
        return request_val
    return os.getenv(env_key, default_val)


def resolve_threads(requested: Optional[int]) -> int:
    value = get_param_value(requested, THREADS_ENV, os.cpu_count() or 1)
    try:
        threads = int(value)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid([f"threads: '{value}' is not an integer"]) from e
    if threads < 1:
        raise ConfigInvalid([f"threads: {threads} must be positive"])
    return threads


def run(
    config: RunConfig, out: Optional[str] = None, threads: Optional[int] = None
) -> Tuple[ExitCode, Path]:
    """
    Run one experiment and write its artifacts.

    The manifest is written even when the experiment fails; its ``error`` and
    ``failures`` entries say what went wrong.

    Args:
        config: validated run configuration
        out: base output directory, overriding CUSPBRANCH_OUT and the config
        threads: worker pool size, overriding CUSPBRANCH_THREADS

    Returns:
        Exit code and the run directory
    """
    workers = resolve_threads(threads)
    run_dir = create_run_dir(config, get_param_value(out, OUTPUT_ENV, config.output_dir))
    manifest: Dict[str, Any] = {
        "tool": "cuspbranch",
        "version": __version__,
        "experiment": config.experiment.value,
        "config": config.model_dump(mode="json"),
        "threads": workers,
        "started": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    exit_code = ExitCode.OK
    start_time = time.time()
    try:
        logger.info("Starting experiment %s", config.experiment.value)
        output = run_experiment(config, run_dir, workers)
        written: List[str] = []
        for name, table in output.tables.items():
            written.append(save_table(table, run_dir, name).name)
        for name, (table, columns) in output.plots.items():
            written.append(save_plot_data(table, run_dir, name, columns).name)
        manifest["artifacts"] = sorted(written)
        manifest["summary"] = output.summary
        manifest["failures"] = output.failures
        if output.failures:
            logger.warning("%d items failed; see the manifest", len(output.failures))
            exit_code = ExitCode.NUMERICAL_FAILURE
    except (CuspBranchError, ValueError, ArithmeticError, RuntimeError) as e:
        logger.error(f"Experiment {config.experiment.value} failed: {e}")
        manifest["error"] = f"{type(e).__name__}: {e}"
        exit_code = ExitCode.NUMERICAL_FAILURE
    finally:
        elapsed = time.time() - start_time
        manifest["wall_time_seconds"] = elapsed
        manifest["exit_code"] = exit_code.value
        write_manifest(run_dir, manifest)
        logger.info(f"Experiment {config.experiment.value} time: {elapsed:.2f} seconds")
    return exit_code, run_dir


def cli(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cuspbranch",
        description="Eigenvalue branches of degenerating cusped hyperbolic triangles",
    )
    parser.add_argument("experiment", choices=[e.value for e in Experiment])
    parser.add_argument("--config", required=True, help="key=value configuration file")
    parser.add_argument("--out", default=None, help="Base directory of run directories")
    parser.add_argument("--threads", type=int, default=None, help="Worker pool size")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, overrides={"experiment": args.experiment})
        exit_code, run_dir = run(config, args.out, args.threads)
    except ConfigInvalid as e:
        for message in e.field_errors:
            logger.error("Config error: %s", message)
        return ExitCode.CONFIG_ERROR.value
    logger.info("Run directory: %s", run_dir)
    return exit_code.value


if __name__ == "__main__":
    sys.exit(cli())
