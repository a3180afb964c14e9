"""Compartmental models of information spread: SIS, SIR and SEIZ.

Each model is a pure derivative function of the compartment vector. SIS uses
raw mass action (``beta * S * I``) while SEIZ normalizes every contact term
by the fixed total population ``N``. The SIR model is written in its closed
form, ``dI/dt = lambda*S - gamma*I``, so that population is conserved.

Time is measured in observation bins (15 minutes by default), so all rates
are per bin.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Callable, Mapping, Union

import numpy as np

from .errors import ParameterDomainError


class ModelKind(str, Enum):
    SIS = "sis"
    SIR = "sir"
    SEIZ = "seiz"

    @classmethod
    def parse(cls, value: Union[str, "ModelKind"]) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ParameterDomainError(
                f"unknown model kind {value!r}; expected one of sis, sir, seiz"
            ) from None


COMPARTMENTS = {
    ModelKind.SIS: ("S", "I"),
    ModelKind.SIR: ("S", "I", "R"),
    ModelKind.SEIZ: ("S", "E", "I", "Z"),
}

INF = math.inf


@dataclass(frozen=True)
class SisParams:
    beta: float   # S-I contact rate, raw mass action
    alpha: float  # I -> S return rate

    DOMAINS = {"beta": (0.0, INF), "alpha": (0.0, INF)}


@dataclass(frozen=True)
class SirParams:
    lambda_: float  # force of infection, held constant
    gamma: float    # recovery rate

    DOMAINS = {"lambda_": (0.0, INF), "gamma": (0.0, INF)}


@dataclass(frozen=True)
class SeizParams:
    beta: float     # S-I contact rate
    b: float        # S-Z contact rate (a rate, not a probability; may exceed 1)
    rho: float      # E-I contact rate
    p: float        # P(S -> I | contact with I)
    l: float        # P(S -> Z | contact with Z)
    epsilon: float  # E -> I incubation rate

    DOMAINS = {
        "beta": (0.0, INF),
        "b": (0.0, INF),
        "rho": (0.0, INF),
        "p": (0.0, 1.0),
        "l": (0.0, 1.0),
        "epsilon": (0.0, INF),
    }


PARAM_TYPES = {
    ModelKind.SIS: SisParams,
    ModelKind.SIR: SirParams,
    ModelKind.SEIZ: SeizParams,
}

Params = Union[SisParams, SirParams, SeizParams]


def param_names(kind) -> tuple[str, ...]:
    return tuple(f.name for f in fields(PARAM_TYPES[ModelKind.parse(kind)]))


def params_to_array(params: Params) -> np.ndarray:
    return np.array([getattr(params, f.name) for f in fields(params)], dtype=float)


def params_from_array(kind, values) -> Params:
    cls = PARAM_TYPES[ModelKind.parse(kind)]
    return cls(*(float(v) for v in values))


def validate_params(kind, raw: Union[Params, Mapping[str, float]]) -> Params:
    """Check every field of ``raw`` against its legal interval.

    ``raw`` may be a parameter record or a mapping of field names. A mapping is
    converted to the record type of ``kind``. Returns the (possibly converted)
    record; raises :class:`ParameterDomainError` naming the first bad field.
    """
    kind = ModelKind.parse(kind)
    cls = PARAM_TYPES[kind]
    if isinstance(raw, Mapping):
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        missing = names - set(raw)
        if unknown or missing:
            raise ParameterDomainError(
                f"{kind.value} parameters: unknown fields {sorted(unknown)}, "
                f"missing fields {sorted(missing)}"
            )
        record = cls(**{k: float(v) for k, v in raw.items()})
    elif isinstance(raw, cls):
        record = raw
    else:
        raise ParameterDomainError(
            f"expected {cls.__name__} for model {kind.value}, got {type(raw).__name__}"
        )
    for name, (low, high) in cls.DOMAINS.items():
        value = getattr(record, name)
        if not (low <= value <= high) or math.isnan(value):
            hi = "inf)" if high == INF else f"{high:g}]"
            raise ParameterDomainError(
                f"parameter {name}={value!r} outside legal interval [{low:g}, {hi}"
            )
    return record


@dataclass(frozen=True)
class CompartmentState:
    """Population of every compartment of one model at one instant."""

    kind: ModelKind
    values: tuple[float, ...]

    def __post_init__(self):
        kind = ModelKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if len(values) != len(COMPARTMENTS[kind]):
            raise ParameterDomainError(
                f"{kind.value} state needs {len(COMPARTMENTS[kind])} compartments, "
                f"got {len(values)}"
            )
        for name, v in zip(COMPARTMENTS[kind], values):
            if not math.isfinite(v) or v < 0:
                raise ParameterDomainError(f"compartment {name}={v!r} must be finite and >= 0")
        if self.total <= 0:
            raise ParameterDomainError("total population must be > 0")

    @classmethod
    def from_mapping(cls, kind, mapping: Mapping[str, float]) -> "CompartmentState":
        kind = ModelKind.parse(kind)
        return cls(kind, tuple(mapping[name] for name in COMPARTMENTS[kind]))

    @property
    def total(self) -> float:
        return math.fsum(self.values)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(COMPARTMENTS[self.kind], self.values))

    def __getitem__(self, name: str) -> float:
        return self.values[COMPARTMENTS[self.kind].index(name)]


def _check_state(state: CompartmentState, kind: ModelKind) -> np.ndarray:
    if state.kind is not kind:
        raise ParameterDomainError(f"expected a {kind.value} state, got {state.kind.value}")
    return state.as_array()


# Vectorized kernels. ``y`` has the compartments on its last axis and ``theta``
# holds the parameters on its last axis, so a batch of (state, parameter)
# pairs can be advanced together by the integrator.

def sis_derivatives(y, theta):
    s, i = y[..., 0], y[..., 1]
    beta, alpha = theta[..., 0], theta[..., 1]
    flow = beta * s * i - alpha * i
    return np.stack([-flow, flow], axis=-1)


def sir_derivatives(y, theta):
    s, i = y[..., 0], y[..., 1]
    lam, gamma = theta[..., 0], theta[..., 1]
    infection = lam * s
    recovery = gamma * i
    return np.stack([-infection, infection - recovery, recovery], axis=-1)


def seiz_derivatives(y, theta, n):
    s, e, i, z = y[..., 0], y[..., 1], y[..., 2], y[..., 3]
    beta, b, rho, p, l, eps = (theta[..., k] for k in range(6))
    s_meets_i = beta * s * i / n
    s_meets_z = b * s * z / n
    e_meets_i = rho * e * i / n
    incubation = eps * e
    ds = -s_meets_i - s_meets_z
    de = (1 - p) * s_meets_i + (1 - l) * s_meets_z - e_meets_i - incubation
    di = p * s_meets_i + e_meets_i + incubation
    dz = l * s_meets_z
    return np.stack([ds, de, di, dz], axis=-1)


def vector_field(kind, theta, n=None) -> Callable[[float, np.ndarray], np.ndarray]:
    """Build ``f(t, y)`` for the integrator from a raw parameter array.

    ``theta`` may carry a leading batch axis matching that of ``y``. ``n`` is
    only used by SEIZ and must broadcast against the batch axis.
    """
    kind = ModelKind.parse(kind)
    theta = np.asarray(theta, dtype=float)
    if kind is ModelKind.SIS:
        return lambda t, y: sis_derivatives(y, theta)
    if kind is ModelKind.SIR:
        return lambda t, y: sir_derivatives(y, theta)
    n = np.asarray(n, dtype=float)
    return lambda t, y: seiz_derivatives(y, theta, n)


def seiz_rhs(state: CompartmentState, params: SeizParams, n: float) -> np.ndarray:
    """Return ``[dS, dE, dI, dZ]`` for one SEIZ state.

    ``n`` is the fixed total population used in every ``/N`` term; callers pass
    the sum of the initial state.
    """
    params = validate_params(ModelKind.SEIZ, params)
    if not (n > 0) or not math.isfinite(n):
        raise ParameterDomainError(f"total population n={n!r} must be finite and > 0")
    y = _check_state(state, ModelKind.SEIZ)
    return seiz_derivatives(y, params_to_array(params), float(n))


def sis_rhs(state: CompartmentState, params: SisParams) -> np.ndarray:
    params = validate_params(ModelKind.SIS, params)
    y = _check_state(state, ModelKind.SIS)
    return sis_derivatives(y, params_to_array(params))


def sir_rhs(state: CompartmentState, params: SirParams) -> np.ndarray:
    params = validate_params(ModelKind.SIR, params)
    y = _check_state(state, ModelKind.SIR)
    return sir_derivatives(y, params_to_array(params))


def params_as_dict(params: Params) -> dict[str, float]:
    return asdict(params)


# Reference SEIZ rates from a published hashtag fit, per 15-minute bin.
REFERENCE_SEIZ = SeizParams(beta=4.3713, b=8.1967, rho=1.3833e-06, p=0.7905, l=0.8161, epsilon=0.0373)
