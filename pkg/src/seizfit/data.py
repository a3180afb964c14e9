"""Event ingestion, cumulative binning and synthetic observation series.

File formats
------------
Events CSV      header ``timestamp``; one ISO-8601 instant per row.
Events JSONL    one object per line with a ``timestamp`` field.
Binned CSV      header ``bin_index,cumulative_count`` plus a JSON sidecar
                ``{"t0": iso8601, "bin_width_seconds": int}``.

Timestamps without an offset are taken to be UTC. Bins are left-closed and
right-open, so an event exactly on a boundary is counted in the later bin.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Optional, Union

import numpy as np

from .errors import EmptyLogError, EmptyWindowError, ParameterDomainError, ParseError
from .integrator import SolverConfig, simulate
from .models import CompartmentState, ModelKind, SeizParams, params_to_array, validate_params

DEFAULT_BIN_SECONDS = 900
# Nominal start instant of synthetic series.
DEFAULT_T0 = datetime(2020, 6, 1, tzinfo=timezone.utc)

Source = Union[str, os.PathLike, bytes, IO]


def parse_instant(text: str) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        return stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def format_instant(stamp: datetime) -> str:
    stamp = stamp.astimezone(timezone.utc)
    if stamp.microsecond:
        return stamp.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return stamp.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class EventLog:
    """Sorted event instants; duplicates are kept."""

    timestamps: tuple[datetime, ...]

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(sorted(self.timestamps)))

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class ObservationSeries:
    """Cumulative event counts at successive bin boundaries.

    ``counts[k]`` is the number of events before ``t0 + (k + 1) * bin_width``.
    """

    t0: datetime
    bin_width: float
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size == 0:
            raise ParameterDomainError("counts must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise ParameterDomainError("counts must be finite and non-negative")
        if np.any(np.diff(counts) < 0):
            raise ParameterDomainError("cumulative counts must be non-decreasing")
        if not self.bin_width > 0:
            raise ParameterDomainError(f"bin_width={self.bin_width!r} must be > 0")
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return self.counts.size

    @property
    def total(self):
        return self.counts[-1]

    def bin_times(self) -> np.ndarray:
        """Model times of the observations, in bins (the model clock starts at bin 0)."""
        return np.arange(self.counts.size, dtype=float)


def _read_text(source: Source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8-sig")
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_text(encoding="utf-8-sig")
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    return data


def load_events(source: Source, format: str = "csv") -> EventLog:
    """Parse an events CSV or JSONL document into a sorted :class:`EventLog`."""
    text = _read_text(source)
    stamps: list[datetime] = []
    if format == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            raise EmptyLogError("events file is empty")
        header = [h.strip() for h in header]
        if "timestamp" not in header:
            raise ParseError("missing 'timestamp' column in header", line=1)
        col = header.index("timestamp")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                stamps.append(parse_instant(row[col]))
            except (ValueError, IndexError):
                raise ParseError(f"bad timestamp {row!r}", line=line) from None
    elif format == "jsonl":
        for line, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                stamps.append(parse_instant(json.loads(raw)["timestamp"]))
            except (ValueError, KeyError, TypeError, AttributeError):
                raise ParseError(f"bad event record {raw!r}", line=line) from None
    else:
        raise ValueError(f"unknown events format {format!r}; expected csv or jsonl")
    if not stamps:
        raise EmptyLogError("no events in input")
    return EventLog(tuple(stamps))


def write_events(log: Union[EventLog, Iterable[datetime]], sink: IO[str], format: str = "csv") -> None:
    stamps = log.timestamps if isinstance(log, EventLog) else log
    if format == "csv":
        sink.write("timestamp\n")
        for s in stamps:
            sink.write(format_instant(s) + "\n")
    elif format == "jsonl":
        for s in stamps:
            sink.write(json.dumps({"timestamp": format_instant(s)}) + "\n")
    else:
        raise ValueError(f"unknown events format {format!r}")


def bin_cumulative(
    events: EventLog,
    t0: Optional[datetime] = None,
    bin_width: float = DEFAULT_BIN_SECONDS,
    n_bins: Optional[int] = None,
) -> ObservationSeries:
    """Count events cumulatively at every bin boundary after ``t0``.

    ``t0`` defaults to the first event. Events before ``t0`` are outside the
    window and ignored. With ``n_bins=None`` the window extends through the
    last event.
    """
    if not bin_width > 0:
        raise ParameterDomainError(f"bin_width={bin_width!r} must be > 0")
    if len(events) == 0:
        raise EmptyLogError("no events to bin")
    if t0 is None:
        t0 = events.timestamps[0]
    offsets = np.array([(s - t0).total_seconds() for s in events.timestamps])
    offsets = offsets[offsets >= 0]
    if n_bins is None:
        if offsets.size == 0:
            raise EmptyWindowError("every event precedes the window start")
        n_bins = int(offsets.max() // bin_width) + 1
    elif n_bins < 1:
        raise ParameterDomainError(f"n_bins={n_bins!r} must be >= 1")
    bin_index = np.floor(offsets / bin_width).astype(np.int64)
    inside = bin_index[bin_index < n_bins]
    if inside.size == 0:
        raise EmptyWindowError("no events fall inside the binning window")
    counts = np.cumsum(np.bincount(inside, minlength=n_bins))
    return ObservationSeries(t0=t0, bin_width=float(bin_width), counts=counts)


def load_binned(csv_source: Source, sidecar: Union[Source, dict]) -> ObservationSeries:
    """Read a pre-binned ``bin_index,cumulative_count`` CSV and its metadata sidecar."""
    meta = sidecar if isinstance(sidecar, dict) else json.loads(_read_text(sidecar))
    try:
        t0 = parse_instant(meta["t0"])
        width = float(meta["bin_width_seconds"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad sidecar metadata: {exc}") from None
    reader = csv.reader(io.StringIO(_read_text(csv_source)))
    header = [h.strip() for h in next(reader, [])]
    if header != ["bin_index", "cumulative_count"]:
        raise ParseError("header must be 'bin_index,cumulative_count'", line=1)
    counts = []
    for row in reader:
        if not row:
            continue
        try:
            index, count = int(row[0]), int(row[1])
        except (ValueError, IndexError):
            raise ParseError(f"bad row {row!r}", line=reader.line_num) from None
        if index != len(counts):
            raise ParseError(f"expected bin_index {len(counts)}, got {index}", line=reader.line_num)
        if count < 0:
            raise ParseError("counts must be non-negative", line=reader.line_num)
        counts.append(count)
    if not counts:
        raise EmptyLogError("binned file has no rows")
    return ObservationSeries(t0=t0, bin_width=width, counts=np.array(counts, dtype=np.int64))


def write_binned(series: ObservationSeries, csv_sink: IO[str], sidecar_sink: IO[str]) -> None:
    csv_sink.write("bin_index,cumulative_count\n")
    for k, c in enumerate(series.counts):
        csv_sink.write(f"{k},{int(c)}\n")
    width = series.bin_width
    meta = {
        "t0": format_instant(series.t0),
        "bin_width_seconds": int(width) if float(width).is_integer() else width,
    }
    json.dump(meta, sidecar_sink, indent=2, sort_keys=True)
    sidecar_sink.write("\n")


def generate_synthetic(
    params: SeizParams,
    init: CompartmentState,
    n_bins: int,
    sigma_rel: Optional[float] = None,
    seed: int = 0,
    t0: datetime = DEFAULT_T0,
    bin_width: float = DEFAULT_BIN_SECONDS,
    config: Optional[SolverConfig] = None,
) -> ObservationSeries:
    """Simulate SEIZ and turn the Infected curve into an integer cumulative series.

    With ``sigma_rel`` set, each value is scaled by ``1 + sigma_rel * z`` with
    ``z`` standard normal; the series is then made non-decreasing with a
    running maximum and rounded.
    """
    params = validate_params(ModelKind.SEIZ, params)
    if init.kind is not ModelKind.SEIZ:
        raise ParameterDomainError(f"expected a seiz initial state, got {init.kind.value}")
    if n_bins < 1:
        raise ParameterDomainError(f"n_bins={n_bins!r} must be >= 1")
    if sigma_rel is not None and not sigma_rel >= 0:
        raise ParameterDomainError(f"sigma_rel={sigma_rel!r} must be >= 0")
    traj = simulate(ModelKind.SEIZ, params_to_array(params), init, np.arange(n_bins, dtype=float), config)
    infected = traj.compartment("I").copy()
    if sigma_rel:
        rng = np.random.default_rng(seed)
        infected = infected * (1.0 + sigma_rel * rng.standard_normal(n_bins))
    infected = np.maximum.accumulate(np.maximum(infected, 0.0))
    counts = np.rint(infected).astype(np.int64)
    return ObservationSeries(t0=t0, bin_width=float(bin_width), counts=counts)


def seiz_state(s: float, e: float, i: float, z: float) -> CompartmentState:
    return CompartmentState(ModelKind.SEIZ, (s, e, i, z))

