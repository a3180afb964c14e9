"""Bounded least-squares estimation of model parameters and initial states.

The unknown vector ``theta`` holds the model parameters followed by the
initial compartment sizes, e.g. for SEIZ::

    [beta, b, rho, p, l, epsilon, S0, E0, I0, Z0]

Residuals are ``I(t_k) - obs_k`` for every bin. The optimizer is a
Levenberg-Marquardt iteration in column-scaled variables that freezes
parameters held at a bound by the gradient and reflects trial points that
leave the box back inside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import ObservationSeries
from .errors import (
    DegenerateProblemError,
    IntegrationError,
    ParameterDomainError,
    ShapeError,
    UnfittableProblemError,
)
from .integrator import SolverConfig, Trajectory, simulate
from .models import COMPARTMENTS, CompartmentState, ModelKind, param_names, params_from_array

EPS = np.finfo(float).eps


def theta_names(kind) -> tuple[str, ...]:
    kind = ModelKind.parse(kind)
    return param_names(kind) + tuple(f"{c}0" for c in COMPARTMENTS[kind])


def n_params(kind) -> int:
    return len(param_names(kind))


def default_bounds(kind, total: float) -> tuple[np.ndarray, np.ndarray]:
    """Box derived from the total number of observed events ``total``.

    The initial-Infected entry gets the full state range here; callers pin it
    to the first observation.
    """
    kind = ModelKind.parse(kind)
    t = max(float(total), 1.0)
    if kind is ModelKind.SEIZ:
        low = [0, 0, 0, 0, 0, 0, t, 0, 0, 0]
        high = [20, 20, 10, 1, 1, 1, 100 * t, 100 * t, 100 * t, 100 * t]
    elif kind is ModelKind.SIS:
        # raw mass action: beta carries a 1/N scale
        low = [0, 0, t, 0]
        high = [20 / t, 20, 100 * t, 100 * t]
    else:
        low = [0, 0, t, 0, 0]
        high = [20, 20, 100 * t, 100 * t, 100 * t]
    return np.array(low, dtype=float), np.array(high, dtype=float)


def default_theta_init(kind, observations: ObservationSeries) -> np.ndarray:
    kind = ModelKind.parse(kind)
    t = max(float(observations.total), 1.0)
    i0 = float(observations.counts[0])
    if kind is ModelKind.SEIZ:
        return np.array([1.0, 1.0, 0.1, 0.5, 0.5, 0.1, 2 * t, 0.0, i0, max(i0, 1.0)])
    if kind is ModelKind.SIS:
        return np.array([1.0 / t, 0.1, 2 * t, i0])
    return np.array([0.1, 0.1, 2 * t, i0, 0.0])


@dataclass
class OptimizerConfig:
    ftol: float = 1e-8
    xtol: float = 1e-8
    gtol: float = 1e-8
    max_iter: int = 200


@dataclass
class FitProblem:
    observations: ObservationSeries
    kind: ModelKind
    theta_init: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    fixed_mask: np.ndarray
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind)
        size = len(theta_names(self.kind))
        self.theta_init = np.array(self.theta_init, dtype=float)
        self.lower = np.array(self.lower, dtype=float)
        self.upper = np.array(self.upper, dtype=float)
        self.fixed_mask = np.array(self.fixed_mask, dtype=bool)
        for name in ("theta_init", "lower", "upper", "fixed_mask"):
            if getattr(self, name).shape != (size,):
                raise ShapeError(f"{name} must have length {size} for {self.kind.value}")
        names = theta_names(self.kind)
        for j in range(size):
            lo, hi, x = self.lower[j], self.upper[j], self.theta_init[j]
            if not lo <= hi:
                raise ParameterDomainError(f"bounds for {names[j]}: low {lo} > high {hi}")
            if not lo <= x <= hi:
                raise ParameterDomainError(f"initial {names[j]}={x} outside [{lo}, {hi}]")
            if self.fixed_mask[j] and not lo == hi == x:
                raise ParameterDomainError(f"pinned {names[j]} needs low == high == value")

    @classmethod
    def from_observations(
        cls,
        observations: ObservationSeries,
        kind="seiz",
        theta_init: Optional[Sequence[float]] = None,
        bounds: Optional[Mapping[str, Sequence[float]]] = None,
        pin: Optional[Mapping[str, float]] = None,
        pin_initial_infected: bool = True,
        solver: Optional[SolverConfig] = None,
    ) -> "FitProblem":
        """Build a problem with default bounds, optionally overridden by name.

        ``bounds`` maps theta names to ``[low, high]``; ``pin`` maps names to the
        value they are held at. By default ``I0`` is pinned to the first count.
        Start values falling outside the resulting box are clipped into it.
        """
        kind = ModelKind.parse(kind)
        names = theta_names(kind)
        lower, upper = default_bounds(kind, observations.total)
        for name, (lo, hi) in (bounds or {}).items():
            if name not in names:
                raise ParameterDomainError(f"unknown parameter {name!r}; expected one of {names}")
            lower[names.index(name)], upper[names.index(name)] = float(lo), float(hi)
        start = default_theta_init(kind, observations) if theta_init is None else np.array(theta_init, dtype=float)
        fixed = np.zeros(len(names), dtype=bool)
        pins = dict(pin or {})
        if pin_initial_infected and "I0" not in pins:
            pins["I0"] = float(observations.counts[0])
        for name, value in pins.items():
            if name not in names:
                raise ParameterDomainError(f"unknown parameter {name!r}; expected one of {names}")
            j = names.index(name)
            lower[j] = upper[j] = start[j] = float(value)
            fixed[j] = True
        start = np.clip(start, lower, upper)
        return cls(observations, kind, start, lower, upper, fixed, solver or SolverConfig())

    @property
    def names(self) -> tuple[str, ...]:
        return theta_names(self.kind)

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.fixed_mask)

    @property
    def target(self) -> np.ndarray:
        return np.asarray(self.observations.counts, dtype=float)

    @property
    def infected_index(self) -> int:
        return COMPARTMENTS[self.kind].index("I")

    def split(self, theta):
        k = n_params(self.kind)
        theta = np.asarray(theta, dtype=float)
        return theta[..., :k], theta[..., k:]

    def typical_scale(self) -> np.ndarray:
        span = self.upper - self.lower
        return np.where(np.isfinite(span) & (span > 0), np.minimum(1e-2 * span, 1.0), 1.0)


@dataclass
class FitResult:
    kind: ModelKind
    names: tuple[str, ...]
    theta_hat: np.ndarray
    residual_norm: float
    rel_error: float
    fitted_trajectory: Trajectory
    iterations: int
    converged: str  # gradient-tol | step-tol | residual-tol | budget
    start_index: int = 0
    theta_start: Optional[np.ndarray] = None
    start_residual_norm: float = math.nan
    norm_history: list = field(default_factory=list)
    theta_history: list = field(default_factory=list)
    failed_trials: int = 0
    failed_starts: list = field(default_factory=list)

    @property
    def params(self):
        return params_from_array(self.kind, self.theta_hat[: n_params(self.kind)])

    @property
    def initial_state(self) -> CompartmentState:
        return CompartmentState(self.kind, tuple(self.theta_hat[n_params(self.kind):]))

    @property
    def fitted_infected(self) -> np.ndarray:
        return self.fitted_trajectory.compartment("I")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, (float(v) for v in self.theta_hat)))


def relative_error_2norm(fitted, obs) -> float:
    """``||fitted - obs||_2 / ||obs||_2``."""
    fitted = np.asarray(fitted, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if fitted.shape != obs.shape:
        raise ShapeError(f"length mismatch: {fitted.shape} vs {obs.shape}")
    denom = np.linalg.norm(obs)
    if denom == 0:
        raise ZeroDivisionError("observations have zero 2-norm")
    return float(np.linalg.norm(fitted - obs) / denom)


def _check_inside(theta, problem):
    if theta.shape != problem.theta_init.shape:
        raise ShapeError(f"theta must have length {problem.theta_init.size}")
    bad = (theta < problem.lower) | (theta > problem.upper) | ~np.isfinite(theta)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise ParameterDomainError(
            f"{problem.names[j]}={theta[j]} outside [{problem.lower[j]}, {problem.upper[j]}]"
        )


def trajectory_at(theta, problem: FitProblem) -> Trajectory:
    params, y0 = problem.split(theta)
    if not y0.sum() > 0:
        raise ParameterDomainError("initial state has zero total population")
    try:
        return simulate(problem.kind, params, y0, problem.observations.bin_times(), problem.solver)
    except IntegrationError as exc:
        exc.theta = np.array(theta, dtype=float)
        raise


def residuals(theta, problem: FitProblem) -> np.ndarray:
    """Model Infected minus observed counts, one entry per bin."""
    theta = np.asarray(theta, dtype=float)
    _check_inside(theta, problem)
    return trajectory_at(theta, problem).compartment("I") - problem.target


def _fd_steps(theta, problem):
    """Forward step per entry, flipped to point inward where the box requires."""
    h = math.sqrt(EPS) * np.maximum(np.abs(theta), problem.typical_scale())
    up_room = problem.upper - theta
    down_room = theta - problem.lower
    flip = (theta + h > problem.upper) & (down_room > up_room)
    h = np.where(flip, -h, h)
    # a box narrower than the step: take what room there is
    h = np.where(np.abs(h) > np.maximum(up_room, down_room), np.where(flip, -down_room, up_room), h)
    return h


def numerical_jacobian(theta, problem: FitProblem, r0: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference Jacobian of :func:`residuals` over the free entries.

    Returns ``(J, free)`` where ``J[:, c]`` is the derivative with respect to
    ``theta[free[c]]``. The base point and all perturbed points are solved as
    one batch sharing a single step sequence, so the differences are free of
    step-selection noise. If the batch fails, columns are evaluated one at a
    time with individually halved steps.
    """
    theta = np.asarray(theta, dtype=float)
    _check_inside(theta, problem)
    free = problem.free
    if free.size == 0:
        raise DegenerateProblemError("no free parameters")
    h = _fd_steps(theta, problem)[free]
    batch = np.repeat(theta[None, :], free.size + 1, axis=0)
    batch[np.arange(1, free.size + 1), free] += h
    # exact steps actually representable in floating point
    h = batch[np.arange(1, free.size + 1), free] - theta[free]
    params, y0 = problem.split(batch)
    ii = problem.infected_index
    try:
        traj = simulate(problem.kind, params, y0, problem.observations.bin_times(), problem.solver)
        infected = traj.states[:, :, ii]
        return (infected[:, 1:] - infected[:, :1]) / h, free
    except IntegrationError:
        pass

    if r0 is None:
        r0 = residuals(theta, problem)
    jac = np.empty((r0.size, free.size))
    for c, j in enumerate(free):
        step = h[c]
        for _ in range(2):
            trial = theta.copy()
            trial[j] += step
            try:
                jac[:, c] = (residuals(trial, problem) - r0) / (trial[j] - theta[j])
                break
            except IntegrationError:
                step *= 0.5
        else:
            raise IntegrationError(f"cannot difference {problem.names[j]} at theta={theta.tolist()}")
    return jac, free


def _reflect(x, lower, upper):
    x = np.where(x < lower, 2 * lower - x, x)
    x = np.where(x > upper, 2 * upper - x, x)
    return np.clip(x, lower, upper)


def solve_bounded_lsq(problem: FitProblem, opt: Optional[OptimizerConfig] = None, theta_start=None) -> FitResult:
    """Minimize ``||residuals||_2`` inside the box from ``theta_start``.

    ``theta_start`` defaults to ``problem.theta_init``. Stops on the projected
    gradient test (``gradient-tol``), a relative step below ``xtol``
    (``step-tol``), a relative decrease of the sum of squares below ``ftol`` or
    a vanishing residual (``residual-tol``), or after ``max_iter`` Jacobians
    (``budget``). Integration failures at trial points count as rejected steps.
    """
    opt = opt or OptimizerConfig()
    free = problem.free
    if free.size == 0:
        raise DegenerateProblemError("no free parameters to fit")
    lower, upper = problem.lower, problem.upper
    x = np.array(problem.theta_init if theta_start is None else theta_start, dtype=float)
    x[problem.fixed_mask] = problem.theta_init[problem.fixed_mask]
    x = np.clip(x, lower, upper)
    target = problem.target
    obs_norm = float(np.linalg.norm(target))

    traj = trajectory_at(x, problem)
    r = traj.compartment("I") - target
    cost = float(r @ r)
    start_norm = math.sqrt(cost)
    norms = [start_norm]
    thetas = [x.copy()]
    failed = 0
    status = None
    iterations = 0

    if start_norm <= opt.ftol * obs_norm:
        status = "residual-tol"

    mu = None
    nu = 2.0
    diag = None
    while status is None:
        if iterations >= opt.max_iter:
            status = "budget"
            break
        iterations += 1
        jac, _ = numerical_jacobian(x, problem, r)
        col_norms = np.linalg.norm(jac, axis=0)
        diag = np.where(col_norms > 0, col_norms, 1.0)
        g = jac.T @ r
        xf = x[free]
        blocked = ((xf <= lower[free]) & (g > 0)) | ((xf >= upper[free]) & (g < 0))
        open_ = ~blocked

        # cosine between residual and each usable column
        r_norm = math.sqrt(cost)
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(col_norms > 0, np.abs(g) / (col_norms * r_norm), 0.0)
        if not np.any(open_) or cosines[open_].max() <= opt.gtol:
            status = "gradient-tol"
            break

        js = jac[:, open_] / diag[open_]
        gs = g[open_] / diag[open_]
        jtj = js.T @ js
        if mu is None:
            mu = 1e-3 * np.trace(jtj) / jtj.shape[0]

        while True:
            try:
                dz = np.linalg.solve(jtj + mu * np.eye(jtj.shape[0]), -gs)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2
                continue
            step = np.zeros(free.size)
            step[open_] = dz / diag[open_]
            trial = x.copy()
            trial[free] = _reflect(xf + step, lower[free], upper[free])
            taken = trial[free] - xf
            scaled_x = float(np.linalg.norm(diag * xf))
            scaled_step = float(np.linalg.norm(diag * taken))
            if scaled_step <= opt.xtol * (scaled_x + opt.xtol):
                status = "step-tol"
                break
            js_taken = jac @ taken
            predicted = -(2 * g @ taken + js_taken @ js_taken)
            try:
                trial_traj = trajectory_at(trial, problem)
                r_trial = trial_traj.compartment("I") - target
                cost_trial = float(r_trial @ r_trial)
                if not math.isfinite(cost_trial):
                    raise IntegrationError("non-finite residual")
            except IntegrationError:
                failed += 1
                mu *= nu
                nu *= 2
                continue
            actual = cost - cost_trial
            gain = actual / predicted if predicted > 0 else -1.0
            if gain > 1e-4 and actual > 0:
                mu *= max(1 / 3, 1 - (2 * gain - 1) ** 3)
                nu = 2.0
                old_cost = cost
                x, r, cost, traj = trial, r_trial, cost_trial, trial_traj
                norms.append(math.sqrt(cost))
                thetas.append(x.copy())
                if math.sqrt(cost) <= opt.ftol * obs_norm:
                    status = "residual-tol"
                elif actual <= opt.ftol * old_cost and predicted <= opt.ftol * old_cost:
                    status = "residual-tol"
                elif scaled_step <= opt.xtol * (scaled_x + opt.xtol):
                    status = "step-tol"
                break
            mu *= nu
            nu *= 2

    residual_norm = math.sqrt(cost)
    return FitResult(
        kind=problem.kind,
        names=problem.names,
        theta_hat=x,
        residual_norm=residual_norm,
        rel_error=relative_error_2norm(traj.compartment("I"), target),
        fitted_trajectory=traj,
        iterations=iterations if status != "residual-tol" or len(norms) > 1 else 0,
        converged=status,
        theta_start=thetas[0],
        start_residual_norm=start_norm,
        norm_history=norms,
        theta_history=thetas,
        failed_trials=failed,
    )


def latin_hypercube(n: int, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """``n`` stratified uniform draws inside the box, one stratum per draw per axis."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.size
    u = (rng.permuted(np.tile(np.arange(n), (d, 1)), axis=1).T + rng.random((n, d))) / n
    return lower + u * (upper - lower)


def start_points(problem: FitProblem, n_starts: int, seed: int) -> np.ndarray:
    if n_starts < 1:
        raise ParameterDomainError(f"n_starts={n_starts!r} must be >= 1")
    starts = np.repeat(problem.theta_init[None, :], n_starts, axis=0)
    if n_starts > 1:
        free = problem.free
        lo, hi = problem.lower[free], problem.upper[free]
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ParameterDomainError("multi-start sampling needs finite bounds on every free entry")
        rng = np.random.default_rng(seed)
        starts[1:, free] = latin_hypercube(n_starts - 1, lo, hi, rng)
    return starts


def multi_start_fit(
    problem: FitProblem,
    n_starts: int = 16,
    seed: int = 0,
    opt: Optional[OptimizerConfig] = None,
) -> FitResult:
    """Run the local solver from ``theta_init`` plus Latin-hypercube draws.

    Keeps the smallest residual norm, ties going to the earlier start. Starts
    whose initial point cannot be integrated are recorded and skipped.
    """
    failures = []
    best = None
    for index, start in enumerate(start_points(problem, n_starts, seed)):
        try:
            result = solve_bounded_lsq(problem, opt, theta_start=start)
        except IntegrationError as exc:
            failures.append((index, str(exc)))
            continue
        result.start_index = index
        if best is None or result.residual_norm < best.residual_norm:
            best = result
    if best is None:
        raise UnfittableProblemError(f"all {n_starts} starts failed: {failures}")
    return replace(best, failed_starts=failures)
