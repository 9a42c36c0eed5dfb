"""Margin reports produced by the numerical certificates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

CSV_COLUMNS = ("estimate", "samples", "min_margin", "fitted_constants", "worst_sample")


def _plain(value):
    """Convert numpy scalars/arrays into JSON-friendly python objects."""
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()] if value.ndim else _plain(value.item())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if np.isnan(value):
            return "nan"
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class EstimateReport:
    """Margin statistics of one inequality over a batch of sampled configurations.

    ``min_margin`` is the smallest value of (right side slack) observed; an
    inequality holds on the sample when it is nonnegative up to ``tolerance``.
    """

    name: str
    samples: int
    min_margin: float
    tolerance: float = 1e-6
    fitted_constants: dict[str, float] = field(default_factory=dict)
    worst_sample: dict[str, Any] | None = None
    violations: int = 0
    standard_error: float | None = None
    params: dict[str, Any] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)
    passed: bool | None = None

    def __post_init__(self):
        if self.passed is None:
            self.passed = bool(np.isfinite(self.min_margin) and self.min_margin >= -self.tolerance)

    def csv_row(self) -> dict[str, Any]:
        return {
            "estimate": self.name,
            "samples": self.samples,
            "min_margin": f"{self.min_margin:.17g}",
            "fitted_constants": json.dumps(_plain(self.fitted_constants), sort_keys=True),
            "worst_sample": json.dumps(_plain(self.worst_sample), sort_keys=True),
        }

    def json_record(self) -> dict[str, Any]:
        return _plain({
            "check": self.name,
            "params": self.params,
            "min_margin": self.min_margin,
            "standard_error": self.standard_error,
            "pass": bool(self.passed),
            "samples": self.samples,
            "fitted_constants": self.fitted_constants,
            "worst_sample": self.worst_sample,
            "details": self.details,
        })


def margin_report(name, margins, tolerance=1e-6, sample_fields=None, **kwargs):
    """Build an :class:`EstimateReport` from an array of per-sample margins.

    ``sample_fields`` maps names to per-sample arrays; the entries at the
    worst index are stored as the offending sample.
    """
    margins = np.asarray(margins, dtype=float).ravel()
    if margins.size == 0:
        return EstimateReport(name, 0, float("inf"), tolerance, **kwargs)
    bad = ~np.isfinite(margins)
    work = np.where(bad, -np.inf, margins)
    worst = int(np.argmin(work))
    worst_sample = None
    if sample_fields:
        worst_sample = {k: np.asarray(v)[worst] for k, v in sample_fields.items()}
        worst_sample["index"] = worst
    return EstimateReport(
        name=name,
        samples=int(margins.size),
        min_margin=float(work[worst]),
        tolerance=tolerance,
        worst_sample=worst_sample,
        violations=int(np.sum(work < -tolerance)),
        **kwargs,
    )
