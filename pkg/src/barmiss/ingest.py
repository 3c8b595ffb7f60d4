"""Incident CSV -> binned binary event matrix, node selection, train/test split.

The City of Chicago "Crimes - 2001 to present" export is the reference schema
(``Date``, ``Primary Type``, ``Community Area``), but column names are
configurable.  The data set itself is not shipped; download it from
https://data.cityofchicago.org (dataset id ijzp-q8t2) and pass the CSV path.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestError
from .model import EventMatrix, MissingnessSpec, apply_missingness

log = logging.getLogger(__name__)

DATE_FORMATS = (
    "%m/%d/%Y %I:%M:%S %p",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S.%f",
    "%Y-%m-%d",
)
MAX_REJECT_FRACTION = 0.10
CHICAGO_SOURCE = "https://data.cityofchicago.org/Public-Safety/Crimes-2001-to-Present/ijzp-q8t2"


@dataclass(frozen=True)
class ColumnMap:
    date: str = "Date"
    primary_type: str = "Primary Type"
    node: str = "Community Area"


@dataclass(frozen=True)
class IncidentRecord:
    timestamp: datetime
    node_key: str
    type_filter: str = ""


@dataclass
class IngestReport:
    n_rows: int = 0
    n_kept: int = 0
    n_filtered: int = 0
    rejects: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "n_kept": self.n_kept, "n_filtered_by_type": self.n_filtered,
                "n_rejected": len(self.rejects), "rejects": self.rejects}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def parse_timestamp(text: str, formats=DATE_FORMATS) -> datetime:
    text = text.strip()
    for fmt in formats:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unrecognised date {text!r}")


def _normalise_key(raw: str) -> str:
    key = raw.strip()
    # the portal exports community areas as floats in some snapshots ("25.0")
    if key.endswith(".0") and key[:-2].isdigit():
        key = key[:-2]
    return key


def read_incidents(path, columns: ColumnMap = ColumnMap(), type_filter: str | None = None,
                   date_formats=DATE_FORMATS):
    """Parse an incident CSV into records, collecting unparseable rows.

    Raises IngestError when more than 10% of the (type-matching) rows are rejected.
    """
    report = IngestReport()
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {columns.date, columns.node} - set(reader.fieldnames or ())
        if type_filter is not None and columns.primary_type not in (reader.fieldnames or ()):
            missing.add(columns.primary_type)
        if missing:
            raise IngestError(f"{path}: missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            report.n_rows += 1
            kind = (row.get(columns.primary_type) or "").strip()
            if type_filter is not None and kind.upper() != type_filter.upper():
                report.n_filtered += 1
                continue
            try:
                ts = parse_timestamp(row[columns.date] or "", date_formats)
                key = _normalise_key(row[columns.node] or "")
                if not key:
                    raise ValueError("empty node key")
            except ValueError as exc:
                report.rejects.append({"line": line_no, "reason": str(exc)})
                continue
            records.append(IncidentRecord(ts, key, kind))
    report.n_kept = len(records)
    considered = report.n_kept + len(report.rejects)
    if considered and len(report.rejects) / considered > MAX_REJECT_FRACTION:
        raise IngestError(f"{path}: {len(report.rejects)} of {considered} rows unparseable "
                          f"(first at line {report.rejects[0]['line']})")
    return records, report


def top_k_nodes(records, k: int) -> list:
    """The k most frequent node keys; ties go to the lexicographically smaller key."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    counts = Counter(r.node_key for r in records)
    if len(counts) < k:
        raise ConfigurationError(f"only {len(counts)} distinct nodes, asked for {k}")
    return [key for key, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def default_origin(records, bin_width: timedelta) -> datetime:
    """Midnight of the first record's day, moved back to Monday for week-multiple bins."""
    first = min(r.timestamp for r in records)
    origin = first.replace(hour=0, minute=0, second=0, microsecond=0)
    if bin_width.total_seconds() % (7 * 86400) == 0:
        origin -= timedelta(days=origin.weekday())
    return origin


@dataclass(frozen=True)
class BinResult:
    events: EventMatrix
    n_out_of_span: int
    n_other_nodes: int


def bin_events(records, bin_width: timedelta, origin: datetime | None, nodes, n_bins: int | None = None) -> BinResult:
    """Entry (i, t) is 1 iff some record of ``nodes[i]`` falls in [origin + t w, origin + (t+1) w).

    Without ``n_bins`` the span runs through the last record.  Records outside
    the span are counted in ``n_out_of_span``.
    """
    nodes = [str(n) for n in nodes]
    if not nodes:
        raise ConfigurationError("need at least one node")
    if bin_width <= timedelta(0):
        raise ConfigurationError("bin width must be positive")
    records = list(records)
    if origin is None:
        if not records:
            raise ConfigurationError("cannot infer an origin from no records")
        origin = default_origin(records, bin_width)
    index = {key: i for i, key in enumerate(nodes)}
    bins = [((r.timestamp - origin) // bin_width, index.get(r.node_key)) for r in records]
    if n_bins is None:
        n_bins = max([b + 1 for b, _ in bins if b >= 0], default=0)
    data = np.zeros((len(nodes), n_bins), dtype=np.uint8)
    out_of_span = other = 0
    for b, i in bins:
        if i is None:
            other += 1
        elif 0 <= b < n_bins:
            data[i, b] = 1
        else:
            out_of_span += 1
    if out_of_span:
        log.warning("%d records fall outside the %d-bin span starting %s", out_of_span, n_bins, origin)
    return BinResult(EventMatrix(data, nodes, str(bin_width)), out_of_span, other)


@dataclass(frozen=True)
class SplitSpec:
    train_bins: int
    test_bins: int
    mask_p: float = 1.0
    seed: int = 0


def split_and_mask(x: EventMatrix, spec: SplitSpec):
    """``(x_train, z_train, x_test)``: column split, then thin the training block."""
    if spec.train_bins < 2 or spec.test_bins < 0:
        raise ConfigurationError("need train_bins >= 2 and test_bins >= 0")
    if spec.train_bins + spec.test_bins > x.T:
        raise ConfigurationError(f"split {spec.train_bins}+{spec.test_bins} exceeds {x.T} bins")
    x_train = x.columns(0, spec.train_bins)
    x_test = x.columns(spec.train_bins, spec.train_bins + spec.test_bins)
    z_train, _ = apply_missingness(x_train, MissingnessSpec(spec.mask_p), spec.seed)
    return x_train, z_train, x_test
