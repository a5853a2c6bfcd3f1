import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LOGGER = logging.getLogger("coupled_stabilization.helpers")


# ----------------------
# Console output
# ----------------------


def print_table(header: Sequence[str], records: Iterable[Sequence[str]], title: str = "") -> None:
    """
    Prints rows of strings as an aligned text table.

    Args:
        header (Sequence[str]): Column names.
        records (Iterable[Sequence[str]]): Rows of already formatted cells.
        title (str): Optional line printed above the table.
    """
    records = [list(r) for r in records]
    widths = [len(h) for h in header]
    for rec in records:
        widths = [max(w, len(cell)) for w, cell in zip(widths, rec)]

    if title:
        print(f">>> {title}")
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    print("  ".join("-" * w for w in widths))
    for rec in records:
        print("  ".join(cell.rjust(w) for cell, w in zip(rec, widths)))
    print()


# ----------------------
# File output
# ----------------------


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    """Write ``rows`` under ``header``; parent directories are created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    LOGGER.info("wrote %s", path)
    return path


def save_checkpoint(path, state: np.ndarray) -> Path:
    """Save a coefficient vector as ``.npy`` (shape header followed by the data)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(state, dtype=float))
    LOGGER.debug("[checkpoint] saved -> %s", path)
    return path


def load_checkpoint(path) -> np.ndarray:
    """Load a vector written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = np.load(path, allow_pickle=False)
    if data.ndim != 1:
        raise ValueError(f"{path} holds an array of shape {data.shape}, not a vector")
    return data

