"""Fit reports: assembly, threshold classification and JSON/CSV/SVG output."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import plotting
from .data import ObservationSeries, format_instant
from .errors import ParameterDomainError, SeizfitError, ShapeError
from .fitting import FitResult, relative_error_2norm
from .models import COMPARTMENTS, ModelKind

SCHEMA_VERSION = 1
ENDEMIC_TOL = 1e-9


class R0Outcome(str, Enum):
    EPIDEMIC = "epidemic"
    ENDEMIC = "endemic"
    SUBCRITICAL = "subcritical"


def classify_r0(r0: float) -> R0Outcome:
    """Threshold outcome for a basic reproduction number.

    Values within ``1e-9`` of one are endemic; above that an epidemic, below it
    the spread dies out.
    """
    if not math.isfinite(r0) or r0 < 0:
        raise ParameterDomainError(f"r0={r0!r} must be finite and >= 0")
    if abs(r0 - 1.0) <= ENDEMIC_TOL:
        return R0Outcome.ENDEMIC
    return R0Outcome.EPIDEMIC if r0 > 1.0 else R0Outcome.SUBCRITICAL


def digest(data: Union[bytes, str, os.PathLike]) -> str:
    if not isinstance(data, bytes):
        data = Path(data).read_bytes()
    return "sha256:" + hashlib.sha256(data).hexdigest()


@dataclass
class FitReport:
    model: str
    theta_hat: dict
    rel_error: float
    residual_norm: float
    converged: str
    iterations: int
    start_index: int
    t0: str
    bin_width_seconds: float
    times: list
    observed: list
    compartments: dict  # name -> list of per-bin values
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def names(self) -> tuple[str, ...]:
        return COMPARTMENTS[ModelKind.parse(self.model)]

    def states(self) -> np.ndarray:
        return np.column_stack([self.compartments[n] for n in self.names])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "FitReport":
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {payload.get('schema_version')!r}")
        return cls(**payload)


def build_report(fit: FitResult, obs: ObservationSeries, meta: Optional[dict] = None) -> FitReport:
    """Collect a fit and its observations into a serializable report.

    The relative error is recomputed from the stored series and must match the
    fit's own value.
    """
    traj = fit.fitted_trajectory
    observed = np.asarray(obs.counts, dtype=float)
    if len(traj) != observed.size:
        raise ShapeError(f"trajectory has {len(traj)} samples, observations {observed.size}")
    fitted_i = traj.compartment("I")
    rel = relative_error_2norm(fitted_i, observed)
    if abs(rel - fit.rel_error) > 1e-12:
        raise SeizfitError(f"relative error mismatch: stored {fit.rel_error!r}, recomputed {rel!r}")
    names = COMPARTMENTS[fit.kind]
    return FitReport(
        model=fit.kind.value,
        theta_hat={k: float(v) for k, v in zip(fit.names, fit.theta_hat)},
        rel_error=rel,
        residual_norm=float(fit.residual_norm),
        converged=fit.converged,
        iterations=int(fit.iterations),
        start_index=int(fit.start_index),
        t0=format_instant(obs.t0),
        bin_width_seconds=float(obs.bin_width),
        times=[float(t) for t in traj.times],
        observed=[float(v) for v in observed],
        compartments={n: [float(v) for v in traj.states[:, j]] for j, n in enumerate(names)},
        provenance=dict(meta or {}),
    )


def write_trajectory_csv(sink, times, states, names: Sequence[str], observed=None, window=None) -> None:
    """One row per bin: ``t``, each compartment, then ``observed`` if given."""
    n = len(times) if window is None else min(int(window), len(times))
    writer = csv.writer(sink, lineterminator="\n")
    header = ["t", *names] + (["observed"] if observed is not None else [])
    writer.writerow(header)
    for k in range(n):
        row = [repr(float(times[k]))] + [repr(float(v)) for v in states[k]]
        if observed is not None:
            row.append(repr(float(observed[k])))
        writer.writerow(row)


def emit(report: FitReport, format: str, sink: Union[str, os.PathLike], window: Optional[int] = None) -> None:
    """Write ``report`` as ``json``, ``csv`` or a two-panel ``svg`` to ``sink``."""
    path = Path(sink)
    if format == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        path.write_text(text + "\n", encoding="utf-8")
    elif format == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            write_trajectory_csv(fh, report.times, report.states(), report.names, report.observed, window)
    elif format == "svg":
        plotting.save_report_svg(
            path, report.times, report.compartments["I"], report.observed,
            report.states(), report.names, window,
        )
    else:
        raise ValueError(f"unknown format {format!r}; expected json, csv or svg")


def load_report(source: Union[str, os.PathLike]) -> FitReport:
    return FitReport.from_dict(json.loads(Path(source).read_text(encoding="utf-8")))
