"""
Convergence tables and the numerical order of convergence.

A :class:`ConvergenceTable` stores, per mesh size, named values (for example
the real and imaginary part of a computed eigenvalue), named errors and the
orders computed from consecutive errors by
``alpha_{i+1} = log(e_{i+1} / e_i) / log(h_{i+1} / h_i)``.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from coupled_stabilization.helpers.helper import write_csv

LOGGER = logging.getLogger("coupled_stabilization.tables")


def compute_order(
    errors: Sequence[Optional[float]], hs: Sequence[float]
) -> List[Optional[float]]:
    """
    Observed orders of convergence between consecutive levels.

    Parameters
    ----------
    errors : sequence of float or None
        Errors ``e_i``, one per level; ``None`` marks a missing entry.
    hs : sequence of float
        Mesh sizes ``h_i`` (same length as ``errors``).

    Returns
    -------
    list of float or None
        ``None`` for the first level and wherever the formula is undefined
        (zero or non-positive error, identical mesh sizes).

    Examples
    --------
    >>> compute_order([4.0, 1.0], [0.5, 0.25])
    [None, 2.0]
    """
    if len(errors) != len(hs):
        raise ValueError(f"{len(errors)} errors for {len(hs)} mesh sizes")
    orders: List[Optional[float]] = [None] * len(errors)
    for i in range(1, len(errors)):
        if errors[i - 1] is None or errors[i] is None:
            continue
        e0, e1 = float(errors[i - 1]), float(errors[i])
        h0, h1 = float(hs[i - 1]), float(hs[i])
        if e0 <= 0.0 or e1 <= 0.0:
            LOGGER.warning("zero error at h=%g; order left blank", h1)
            continue
        if h0 <= 0.0 or h1 <= 0.0 or h0 == h1:
            continue
        orders[i] = math.log(e1 / e0) / math.log(h1 / h0)
    return orders


def format_number(value: Optional[float], precision: str = "short") -> str:
    """Six significant digits, or round-trip ``repr`` with ``precision='full'``."""
    if value is None:
        return ""
    if precision == "full":
        return repr(float(value))
    return f"{float(value):.6g}"


@dataclass
class ConvergenceRow:
    h: float
    values: Dict[str, float] = field(default_factory=dict)
    errors: Dict[str, float] = field(default_factory=dict)
    orders: Dict[str, Optional[float]] = field(default_factory=dict)


@dataclass
class ConvergenceTable:
    """
    Rows of per-level errors with their orders.

    Attributes
    ----------
    rows : List[ConvergenceRow]
        One row per mesh size, coarsest first.
    value_names : List[str]
        Column names of ``values`` in output order.
    error_names : List[str]
        Column names of ``errors`` in output order.
    """

    rows: List[ConvergenceRow] = field(default_factory=list)
    value_names: List[str] = field(default_factory=list)
    error_names: List[str] = field(default_factory=list)

    def add_row(
        self,
        h: float,
        errors: Dict[str, float],
        values: Optional[Dict[str, float]] = None,
    ) -> ConvergenceRow:
        row = ConvergenceRow(h=float(h), values=dict(values or {}), errors=dict(errors))
        for name in row.values:
            if name not in self.value_names:
                self.value_names.append(name)
        for name in row.errors:
            if name not in self.error_names:
                self.error_names.append(name)
        self.rows.append(row)
        return row

    def compute_orders(self) -> "ConvergenceTable":
        """Fill ``orders`` of every row from the stored errors."""
        hs = [row.h for row in self.rows]
        for name in self.error_names:
            errors = [row.errors.get(name) for row in self.rows]
            for row, order in zip(self.rows, compute_order(errors, hs)):
                row.orders[name] = order
        return self

    def column(self, name: str) -> List[Optional[float]]:
        """Error column ``name`` across rows."""
        return [row.errors.get(name) for row in self.rows]

    def order_column(self, name: str) -> List[Optional[float]]:
        return [row.orders.get(name) for row in self.rows]

    def header(self) -> List[str]:
        cols = ["h"] + list(self.value_names)
        for name in self.error_names:
            cols += [name, f"{name}_order"]
        return cols

    def records(self, precision: str = "short") -> List[List[str]]:
        out = []
        for row in self.rows:
            rec = [format_number(row.h, precision)]
            rec += [format_number(row.values.get(n), precision) for n in self.value_names]
            for name in self.error_names:
                rec.append(format_number(row.errors.get(name), precision))
                rec.append(format_number(row.orders.get(name), precision))
            out.append(rec)
        return out

    def to_csv(self, path, precision: str = "short") -> Path:
        """Write the table; blank cells stand for undefined orders."""
        return write_csv(path, self.header(), self.records(precision))
