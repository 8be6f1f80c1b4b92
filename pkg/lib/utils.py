"""
Utility functions shared by the command-line front end and the pipeline modules.
"""

import json
import logging
from collections.abc import Iterable
from pathlib import Path

import numpy as np
import pandas as pd

from lib.errors import BiscuitError


def setup_logging(level=logging.INFO):
    """
    Configure logging with specified level.

    Args:
        level: Logging level (default: INFO)
    """
    logging.basicConfig(
        level=level, format="%(asctime)s - %(levelname)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
    )


def prepare_output_dir(out_dir: Path, force: bool = False) -> Path:
    """
    Create an output directory, refusing to reuse a non-empty one unless forced.

    Args:
        out_dir: Target directory
        force: Allow writing into an existing non-empty directory

    Returns:
        The directory path

    Raises:
        BiscuitError: If the directory exists, is non-empty and force is False
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise BiscuitError(f"Output path is not a directory: {out_dir}")
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise BiscuitError(f"Output directory {out_dir} is not empty (use --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(data) -> str:
    """Deterministic JSON text (sorted keys, numpy scalars and arrays converted)."""
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_json(data, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_json(data))


def read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise BiscuitError(f"Error reading {path}: {e}") from e


def write_table(rows: Iterable[dict], path: Path, columns: list[str] | None = None) -> pd.DataFrame:
    """
    Write dict rows as a CSV file.

    Args:
        rows: One dict per row
        path: Output CSV path
        columns: Column order (defaults to the keys of the first row)

    Returns:
        The written DataFrame
    """
    frame = pd.DataFrame(list(rows), columns=columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return frame
