"""Adaptive Dormand-Prince 5(4) integrator with dense output.

The solver advances the 5th order solution, controls the step with the
embedded 4th order estimate through a PI controller, and interpolates
requested output times with the standard 4th order continuous extension.
States may carry leading batch axes; the step size is shared by the batch and
the error norm is the worst member's.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ParameterDomainError, StepBudgetError, StiffnessError
from .models import COMPARTMENTS, CompartmentState, ModelKind

RHS = Callable[[float, np.ndarray], np.ndarray]

# Butcher tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th order minus embedded 4th order weights
E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

# Continuous extension: y(t + s*h) = y + h * sum_i K_i * (P[i] @ [s, s^2, s^3, s^4])
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
PI_BETA = 0.04
PI_ALPHA = 0.2 - 0.75 * PI_BETA


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-9
    h_init: Optional[float] = None
    h_max: float = math.inf
    max_steps: int = 100_000

    def __post_init__(self):
        if not self.rtol > 0:
            raise ParameterDomainError(f"rtol={self.rtol!r} must be > 0")
        if not self.atol >= 0:
            raise ParameterDomainError(f"atol={self.atol!r} must be >= 0")
        if not self.h_max > 0:
            raise ParameterDomainError(f"h_max={self.h_max!r} must be > 0")
        if self.h_init is not None and not self.h_init > 0:
            raise ParameterDomainError(f"h_init={self.h_init!r} must be > 0")
        if int(self.max_steps) < 1:
            raise ParameterDomainError(f"max_steps={self.max_steps!r} must be >= 1")


@dataclass
class SolverStats:
    accepted: int = 0
    rejected: int = 0
    n_rhs: int = 0


@dataclass
class StepSegment:
    """One accepted step, enough to interpolate anywhere inside it."""

    t_start: float
    t_end: float
    y_start: np.ndarray
    y_end: np.ndarray
    k: np.ndarray  # stage derivatives, shape (7, *y.shape)


def dense_eval(segment: StepSegment, t: float) -> np.ndarray:
    """Interpolate the state at ``t`` inside ``segment``.

    Endpoints return the stored states exactly.
    """
    if not segment.t_start <= t <= segment.t_end:
        raise ParameterDomainError(
            f"t={t!r} outside segment [{segment.t_start!r}, {segment.t_end!r}]"
        )
    if t == segment.t_start:
        return segment.y_start.copy()
    if t == segment.t_end:
        return segment.y_end.copy()
    h = segment.t_end - segment.t_start
    s = (t - segment.t_start) / h
    weights = P @ np.array([s, s * s, s**3, s**4])
    return segment.y_start + h * np.tensordot(weights, segment.k, axes=1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # shape (len(times), *state_shape)
    stats: SolverStats = field(default_factory=SolverStats)
    kind: Optional[ModelKind] = None

    def __len__(self):
        return len(self.times)

    def state(self, index: int) -> CompartmentState:
        if self.kind is None:
            raise ValueError("trajectory has no model kind attached")
        # Solver noise may leave populations a hair below zero.
        return CompartmentState(self.kind, tuple(np.maximum(self.states[index], 0.0)))

    def compartment(self, name: str) -> np.ndarray:
        if self.kind is None:
            raise ValueError("trajectory has no model kind attached")
        return self.states[..., COMPARTMENTS[self.kind].index(name)]


def _rms_worst(x: np.ndarray) -> float:
    """Root-mean-square over the last axis, worst over any batch axes."""
    if x.ndim <= 1:
        return float(np.sqrt(np.mean(x * x)))
    return float(np.sqrt(np.mean(x * x, axis=-1)).max())


def _initial_step(rhs, t0, y0, f0, direction_span, rtol, atol):
    scale = atol + rtol * np.abs(y0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = _rms_worst(np.where(scale > 0, y0 / scale, 0.0))
        d1 = _rms_worst(np.where(scale > 0, f0 / scale, 0.0))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = _rms_worst(np.where(scale > 0, (f1 - f0) / scale, 0.0)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, direction_span)


def _stages(rhs, t, y, f, h):
    k = np.empty((7,) + y.shape)
    k[0] = f
    for i in range(1, 7):
        dy = np.tensordot(np.asarray(A[i]), k[:i], axes=1)
        k[i] = rhs(t + C[i] * h, y + h * dy)
    y_new = y + h * np.tensordot(B[:6], k[:6], axes=1)
    err = h * np.tensordot(E, k, axes=1)
    return k, y_new, err


def _check_times(eval_times, t0):
    times = np.asarray(eval_times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ParameterDomainError("eval_times must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(times)):
        raise ParameterDomainError("eval_times must be finite")
    if np.any(np.diff(times) <= 0):
        raise ParameterDomainError("eval_times must be strictly increasing")
    if times[0] < t0:
        raise ParameterDomainError(f"first eval time {times[0]!r} precedes t0={t0!r}")
    return times


def _as_array(y0):
    if isinstance(y0, CompartmentState):
        return y0.as_array(), y0.kind
    return np.array(y0, dtype=float), None


def integrate(
    rhs: RHS,
    y0,
    eval_times: Sequence[float],
    config: Optional[SolverConfig] = None,
    t0: float = 0.0,
) -> Trajectory:
    """Solve ``y' = rhs(t, y)`` from ``y(t0) = y0`` and sample at ``eval_times``.

    Raises StepBudgetError when ``config.max_steps`` accepted and rejected
    steps are spent, StiffnessError when the step size underflows, and
    NumericError on non-finite derivatives or populations that stay negative.
    """
    config = config or SolverConfig()
    times = _check_times(eval_times, t0)
    y, kind = _as_array(y0)
    rtol, atol = config.rtol, config.atol
    stats = SolverStats()
    out = np.empty((times.size,) + y.shape)

    idx = 0
    while idx < times.size and times[idx] == t0:
        out[idx] = y
        idx += 1

    t = float(t0)
    t_final = float(times[-1])
    f = rhs(t, y)
    stats.n_rhs += 1
    if not np.all(np.isfinite(f)):
        raise NumericError(f"non-finite derivative at t={t!r}")

    if idx < times.size:
        if config.h_init is not None:
            h = min(config.h_init, t_final - t)
        else:
            h = _initial_step(rhs, t, y, f, t_final - t, rtol, atol)
            stats.n_rhs += 1
        h = min(h, config.h_max)

    err_prev = 1e-4
    last_rejected = False
    trouble = None  # reason for the latest rejection other than error size
    n_steps = 0
    while idx < times.size:
        if n_steps >= config.max_steps:
            raise StepBudgetError(
                f"step budget of {config.max_steps} exhausted at t={t!r} "
                f"with {idx} of {times.size} outputs done",
                n_completed=idx,
            )
        n_steps += 1
        h = min(h, config.h_max)
        remaining = t_final - t
        if h >= remaining or t + 1.01 * h >= t_final:
            h = remaining
        if h <= 16 * np.spacing(max(abs(t), 1.0)):
            if trouble is not None:
                raise NumericError(f"{trouble} near t={t!r}; step size underflow")
            raise StiffnessError(f"step size {h!r} underflow at t={t!r}")

        with np.errstate(over="ignore", invalid="ignore"):
            k, y_new, err = _stages(rhs, t, y, f, h)
        stats.n_rhs += 6

        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(y_new))):
            stats.rejected += 1
            trouble = "non-finite derivative"
            h *= MIN_FACTOR
            last_rejected = True
            continue

        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(scale > 0, err / scale, np.where(err == 0, 0.0, np.inf))
        err_norm = _rms_worst(ratio)

        if err_norm > 1.0:
            stats.rejected += 1
            h *= max(MIN_FACTOR, SAFETY * err_norm ** -0.2)
            last_rejected = True
            continue
        if np.any((y_new < -atol) & (y >= -atol)):
            stats.rejected += 1
            trouble = "negative population"
            h *= 0.5
            last_rejected = True
            continue

        t_new = t + h
        if t_new >= t_final or h == remaining:
            t_new = t_final
        segment = StepSegment(t, t_new, y, y_new, k)
        while idx < times.size and times[idx] <= t_new:
            out[idx] = y_new if times[idx] == t_new else dense_eval(segment, times[idx])
            idx += 1
        stats.accepted += 1

        if err_norm == 0.0:
            factor = MAX_FACTOR
        else:
            factor = SAFETY * err_norm ** -PI_ALPHA * err_prev**PI_BETA
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
        if last_rejected:
            factor = min(1.0, factor)
        err_prev = max(err_norm, 1e-4)
        last_rejected = False
        trouble = None
        t, y, f = t_new, y_new, k[6]
        h *= factor

    return Trajectory(times=times, states=out, stats=stats, kind=kind)


def integrate_fixed_step(rhs: RHS, y0, eval_times: Sequence[float], h: float, t0: float = 0.0) -> Trajectory:
    """Fixed-step variant of the same scheme, used to measure its order.

    Steps of exactly ``h`` are taken (the last one shortened to land on the
    final time); intermediate outputs come from the continuous extension.
    """
    if not h > 0:
        raise ParameterDomainError(f"h={h!r} must be > 0")
    times = _check_times(eval_times, t0)
    y, kind = _as_array(y0)
    stats = SolverStats()
    out = np.empty((times.size,) + y.shape)
    idx = 0
    while idx < times.size and times[idx] == t0:
        out[idx] = y
        idx += 1
    t = float(t0)
    t_final = float(times[-1])
    f = rhs(t, y)
    stats.n_rhs += 1
    n = 0
    while idx < times.size:
        n += 1
        t_new = min(t0 + n * h, t_final)
        if t_final - t_new < 1e-9 * h:
            t_new = t_final
        k, y_new, _ = _stages(rhs, t, y, f, t_new - t)
        stats.n_rhs += 6
        stats.accepted += 1
        segment = StepSegment(t, t_new, y, y_new, k)
        while idx < times.size and times[idx] <= t_new:
            out[idx] = dense_eval(segment, times[idx])
            idx += 1
        t, y, f = t_new, y_new, k[6]
    return Trajectory(times=times, states=out, stats=stats, kind=kind)


def simulate(kind, params, y0, eval_times: Sequence[float], config: Optional[SolverConfig] = None) -> Trajectory:
    """Integrate a built-in model through the compiled solver loop.

    ``params`` is the raw parameter array of ``kind`` (or a batch of them, shape
    ``(m, n_params)``) and ``y0`` the matching initial state(s). For SEIZ the
    fixed population ``N`` is taken from the initial state sums. The step
    sequence is shared across a batch.
    """
    from . import _kernels

    kind = ModelKind.parse(kind)
    config = config or SolverConfig()
    times = _check_times(eval_times, 0.0)
    y0_arr, _ = _as_array(y0)
    theta = np.asarray(params, dtype=float)
    batched = y0_arr.ndim == 2
    y_b = np.ascontiguousarray(np.atleast_2d(y0_arr))
    theta_b = np.ascontiguousarray(np.broadcast_to(np.atleast_2d(theta), (y_b.shape[0], theta.shape[-1])))
    if y_b.shape[1] != len(COMPARTMENTS[kind]):
        raise ParameterDomainError(f"{kind.value} state needs {len(COMPARTMENTS[kind])} compartments")
    n = y_b.sum(axis=1)
    out, status, idx, accepted, rejected, n_rhs = _kernels.run(
        kind.value, theta_b, n, y_b, times, config.rtol, config.atol,
        config.h_init or 0.0, config.h_max, config.max_steps,
    )
    if status == _kernels.STATUS_BUDGET:
        raise StepBudgetError(
            f"step budget of {config.max_steps} exhausted with {idx} of {times.size} outputs done",
            n_completed=idx,
        )
    if status == _kernels.STATUS_STIFF:
        raise StiffnessError(f"step size underflow after {idx} of {times.size} outputs")
    if status == _kernels.STATUS_NUMERIC:
        raise NumericError(f"non-finite derivative or negative population after {idx} of {times.size} outputs")
    stats = SolverStats(accepted=int(accepted), rejected=int(rejected), n_rhs=int(n_rhs))
    states = out if batched else out[:, 0, :]
    return Trajectory(times=times, states=states, stats=stats, kind=kind)
