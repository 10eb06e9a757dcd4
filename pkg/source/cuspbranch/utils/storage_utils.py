"""
Helper functions for storing run artifacts
"""

import datetime
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import pandas as pd

from cuspbranch.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"


def config_hash(config: RunConfig) -> str:
    """Short digest of the validated configuration."""
    payload = config.model_dump_json().encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:10]


def create_run_dir(config: RunConfig, base: Optional[Union[str, Path]] = None) -> Path:
    """Create the directory of one run with the hierarchy below:
    output_dir
        ├── 2026-01-31-12-00-00-<hash> (one run)
        │   ├── manifest.json (config echo, version, wall times, errors)
        │   ├── <table>.csv (one per table the experiment produces)
        │   ├── <plot>.dat (whitespace-separated plot data)
        ├── 2026-01-31-12-05-00-<hash>
        │   ├── ...
        ...
    """
    root = Path(base if base is not None else config.output_dir)
    timestamp = datetime.datetime.now().strftime("%Y-%m-%d-%H-%M-%S")
    run_dir = root / f"{timestamp}-{config_hash(config)}"
    suffix = 1
    while run_dir.exists():
        run_dir = root / f"{timestamp}-{config_hash(config)}-{suffix}"
        suffix += 1
    run_dir.mkdir(parents=True)
    logger.info("Writing run artifacts to %s", run_dir)
    return run_dir


def save_table(table: pd.DataFrame, run_dir: Path, name: str) -> Path:
    """Save a table as CSV with a header row and round-trip float precision."""
    path = run_dir / f"{name}.csv"
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug("Saved %d rows to %s", len(table), path)
    return path


def save_plot_data(
    table: pd.DataFrame, run_dir: Path, name: str, columns: Optional[Iterable[str]] = None
) -> Path:
    """Save columns as gnuplot-readable text: a '#' header, then one row per line."""
    selected = table[list(columns)] if columns is not None else table
    path = run_dir / f"{name}.dat"
    with open(path, "w") as handle:
        handle.write("# " + " ".join(str(c) for c in selected.columns) + "\n")
        selected.to_csv(
            handle, sep=" ", header=False, index=False, float_format=FLOAT_FORMAT
        )
    return path


def write_manifest(run_dir: Path, manifest: Dict[str, Any]) -> Path:
    path = run_dir / MANIFEST_NAME
    try:
        with open(path, "w") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True, default=str)
    except OSError as e:
        logger.error(f"Error writing manifest {path}: {e}")
        raise
    return path
