"""Case/test time series containers and CSV ingestion."""

from __future__ import annotations

import csv
import datetime as dt
import io
import warnings
from dataclasses import dataclass

import numpy as np

STEPS = {"daily": 1, "weekly": 7}


class SchemaError(ValueError):
    """Input file does not follow the expected layout."""


@dataclass(frozen=True)
class ObservedSeries:
    """Aligned observed cases ``O_t`` and administered tests ``M_t``.

    Estimators require at least two time steps (see ``require_length``).
    ``start`` is either a :class:`datetime.date` or an integer index for the
    first time step; ``step`` is ``"daily"`` or ``"weekly"``.
    """

    cases: np.ndarray
    tests: np.ndarray
    step: str = "weekly"
    start: object = 1

    def __post_init__(self):
        cases = np.asarray(self.cases)
        tests = np.asarray(self.tests)
        if cases.ndim != 1 or cases.shape != tests.shape:
            raise ValueError("cases and tests must be vectors of equal length")
        if cases.size < 1:
            raise ValueError("series is empty")
        if self.step not in STEPS:
            raise ValueError(f"step must be one of {sorted(STEPS)}")
        if not (np.all(np.mod(cases, 1) == 0) and np.all(np.mod(tests, 1) == 0)):
            raise ValueError("cases and tests must be integers")
        cases = cases.astype(np.int64)
        tests = tests.astype(np.int64)
        if np.any(cases < 0):
            raise ValueError("cases must be non-negative")
        if np.any(tests <= 0):
            raise ValueError("tests must be positive")
        if np.any(cases > tests):
            raise ValueError("cases cannot exceed tests")
        cases.setflags(write=False)
        tests.setflags(write=False)
        object.__setattr__(self, "cases", cases)
        object.__setattr__(self, "tests", tests)

    def __len__(self):
        return self.cases.size

    @property
    def step_days(self):
        return STEPS[self.step]

    def labels(self):
        """Row labels: ISO dates when the start is a date, else integers."""
        if isinstance(self.start, dt.date):
            return [
                (self.start + dt.timedelta(days=self.step_days * i)).isoformat()
                for i in range(len(self))
            ]
        return [str(int(self.start) + i) for i in range(len(self))]

    def require_length(self, minimum=2):
        if len(self) < minimum:
            raise ValueError(f"need at least {minimum} time steps, got {len(self)}")
        return self

    def slice(self, first, stop=None):
        """Sub-series ``[first:stop]`` with a shifted start label."""
        stop = len(self) if stop is None else stop
        if isinstance(self.start, dt.date):
            start = self.start + dt.timedelta(days=self.step_days * first)
        else:
            start = int(self.start) + first
        return ObservedSeries(self.cases[first:stop], self.tests[first:stop], self.step, start)


def aggregate_weekly(series: ObservedSeries) -> ObservedSeries:
    """Sum a daily series into weeks; a trailing partial week is dropped."""
    if series.step != "daily":
        raise ValueError("aggregate_weekly needs a daily series")
    n_weeks = len(series) // 7
    if n_weeks < 1:
        raise ValueError("need at least 7 days to aggregate")
    if len(series) % 7:
        warnings.warn(
            f"dropping {len(series) % 7} trailing day(s) of a partial week", stacklevel=2
        )
    keep = 7 * n_weeks
    cases = series.cases[:keep].reshape(n_weeks, 7).sum(axis=1)
    tests = series.tests[:keep].reshape(n_weeks, 7).sum(axis=1)
    return ObservedSeries(cases, tests, "weekly", series.start)


def _parse_label(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise SchemaError(f"bad date/index {text!r}") from exc


def _parse_count(text, what, row):
    text = text.strip()
    if text == "":
        raise SchemaError(f"row {row}: missing {what}")
    try:
        value = float(text)
    except ValueError as exc:
        raise SchemaError(f"row {row}: {what} {text!r} is not a number") from exc
    if value < 0:
        raise SchemaError(f"row {row}: negative {what}")
    if value != int(value):
        raise SchemaError(f"row {row}: {what} must be an integer")
    return int(value)


def read_series(source, step=None) -> ObservedSeries:
    """Read a ``date,cases,tests`` CSV.

    ``source`` is a path or an open text stream.  The step is inferred from
    the spacing of ISO dates unless given; integer indices default to weekly.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty file") from None
    if header != ["date", "cases", "tests"]:
        raise SchemaError(f"header must be date,cases,tests; got {','.join(header)}")
    labels, cases, tests = [], [], []
    for i, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise SchemaError(f"row {i}: expected 3 cells, got {len(row)}")
        labels.append(_parse_label(row[0]))
        cases.append(_parse_count(row[1], "cases", i))
        tests.append(_parse_count(row[2], "tests", i))
    if len(labels) < 2:
        raise SchemaError("need at least two rows")
    kinds = {type(x) for x in labels}
    if len(kinds) != 1:
        raise SchemaError("mixed date and integer labels")
    if step is None:
        if isinstance(labels[0], dt.date):
            gaps = {(b - a).days for a, b in zip(labels, labels[1:])}
            if gaps == {1}:
                step = "daily"
            elif gaps == {7}:
                step = "weekly"
            else:
                raise SchemaError(f"irregular date spacing {sorted(gaps)}")
        else:
            step = "weekly"
    try:
        return ObservedSeries(np.array(cases), np.array(tests), step, labels[0])
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def write_series(series: ObservedSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "cases", "tests"])
        for label, c, m in zip(series.labels(), series.cases, series.tests):
            w.writerow([label, int(c), int(m)])
