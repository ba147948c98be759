"""Ready-made epidemic and branching models.

Every builder returns a `ModelSpec` whose last coordinates are bookkeeping
counters (cumulative sampling events, and for the epidemic models the
untracked compartments folded into conservation); the focal size is the
coordinate the marked events act on.  Rate callables accept scalar or
batched states, so the same model drives single-path simulation, the
particle filter, and the truncated-grid oracle.

The transmission rate of the epidemic models may be a `PiecewiseConstant`
function of time, in which case simulation uses thinning against the
supplied bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .population import EventType, ModelSpec


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function on [0, inf).

    ``times`` are the ascending breakpoints; ``values`` has one more entry
    than ``times`` and gives the value on each piece, starting at t = 0.
    """

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if len(values) != len(times) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(v < 0 for v in values):
            raise ValueError("values must be nonnegative")

    def __call__(self, t: float) -> float:
        return self.values[int(np.searchsorted(self.times, t, side="right"))]

    def max_on(self, t0: float, t1: float) -> float:
        lo = int(np.searchsorted(self.times, t0, side="right"))
        hi = int(np.searchsorted(self.times, t1, side="left"))
        return max(self.values[lo:hi + 1])

    def to_dict(self) -> dict:
        return {"times": list(self.times), "values": list(self.values)}


def _as_rate(value) -> float | PiecewiseConstant:
    if isinstance(value, PiecewiseConstant):
        return value
    if isinstance(value, Mapping):
        return PiecewiseConstant(tuple(value["times"]), tuple(value["values"]))
    out = float(value)
    if out < 0:
        raise ValueError("rates must be nonnegative")
    return out


def _check_count(name: str, value) -> int:
    out = int(value)
    if out != value or out < 0:
        raise ValueError(f"{name} must be a nonnegative integer")
    return out


def _point_mass(x0: np.ndarray):
    x0 = np.asarray(x0, dtype=np.int64)

    def init_sample(rng):
        return x0.copy()

    def init_pmf(x):
        return 1.0 if np.array_equal(np.asarray(x, dtype=np.int64), x0) else 0.0

    return init_sample, init_pmf


@dataclass(frozen=True)
class LBDPParams:
    """Linear birth-death process with sampling at rate per individual."""

    birth_rate: float
    death_rate: float
    sampling_rate: float
    n0: int

    def to_dict(self) -> dict:
        return {"birth_rate": self.birth_rate, "death_rate": self.death_rate,
                "sampling_rate": self.sampling_rate, "n0": self.n0}


def lbdp_spec(params: LBDPParams, mu: float = 1.0) -> ModelSpec:
    """State (n, sampled): population size plus a sampling counter."""
    lam = float(params.birth_rate)
    delta = float(params.death_rate)
    psi = float(params.sampling_rate)
    if min(lam, delta, psi) < 0:
        raise ValueError("rates must be nonnegative")
    n0 = _check_count("n0", params.n0)
    init_sample, init_pmf = _point_mass(np.array([n0, 0]))
    return ModelSpec(
        name="lbdp",
        d=2,
        events=(
            EventType("birth", (1, 0), is_birth=True),
            EventType("death", (-1, 0), is_death=True),
            EventType("sampling", (0, 1), is_sample=True),
        ),
        rates=(
            lambda t, x: lam * x[..., 0],
            lambda t, x: delta * x[..., 0],
            lambda t, x: psi * x[..., 0],
        ),
        init_sample=init_sample,
        init_pmf=init_pmf,
        focal_size=lambda x: x[..., 0],
        mu=mu,
        bookkeeping_dims=(1,),
        params=params.to_dict(),
    )


def lbdp_truncation(params: LBDPParams, n_max: int) -> list[tuple[int, int]]:
    return [(n, 0) for n in range(n_max + 1)]


@dataclass(frozen=True)
class SIRParams:
    """Density-dependent SIR with per-infective sampling.

    ``transmission_rate`` multiplies s * i and may be a `PiecewiseConstant`.
    Sampling observes an infective without removing it.
    """

    transmission_rate: float | PiecewiseConstant
    recovery_rate: float
    sampling_rate: float
    s0: int
    i0: int
    r0: int = 0

    def to_dict(self) -> dict:
        beta = self.transmission_rate
        return {
            "transmission_rate": beta.to_dict() if isinstance(beta, PiecewiseConstant) else beta,
            "recovery_rate": self.recovery_rate,
            "sampling_rate": self.sampling_rate,
            "s0": self.s0, "i0": self.i0, "r0": self.r0,
        }


def _si_product(beta):
    """Infection rate beta(t) * s * i, with thinning bound if time-varying."""
    if isinstance(beta, PiecewiseConstant):
        rate = lambda t, x: beta(t) * x[..., 0] * x[..., 1]
        bound = lambda t0, t1, x: beta.max_on(t0, t1) * float(x[..., 0] * x[..., 1])
        return rate, bound, True, beta.times
    b = float(beta)
    if b < 0:
        raise ValueError("transmission_rate must be nonnegative")
    return (lambda t, x: b * x[..., 0] * x[..., 1]), None, False, ()


def sir_spec(params: SIRParams, mu: float = 1.0) -> ModelSpec:
    """State (s, i, r, sampled); infection is the birth event on i."""
    beta = _as_rate(params.transmission_rate)
    gamma = float(params.recovery_rate)
    psi = float(params.sampling_rate)
    if min(gamma, psi) < 0:
        raise ValueError("rates must be nonnegative")
    s0 = _check_count("s0", params.s0)
    i0 = _check_count("i0", params.i0)
    r0 = _check_count("r0", params.r0)
    infection, bound, varying, breaks = _si_product(beta)
    init_sample, init_pmf = _point_mass(np.array([s0, i0, r0, 0]))
    return ModelSpec(
        name="sir",
        d=4,
        events=(
            EventType("infection", (-1, 1, 0, 0), is_birth=True),
            EventType("recovery", (0, -1, 1, 0), is_death=True),
            EventType("sampling", (0, 0, 0, 1), is_sample=True),
        ),
        rates=(
            infection,
            lambda t, x: gamma * x[..., 1],
            lambda t, x: psi * x[..., 1],
        ),
        init_sample=init_sample,
        init_pmf=init_pmf,
        focal_size=lambda x: x[..., 1],
        mu=mu,
        rate_bounds=(bound, None, None) if bound is not None else None,
        time_dependent=(varying, False, False),
        rate_breakpoints=breaks,
        bookkeeping_dims=(3,),
        params=SIRParams(beta, gamma, psi, s0, i0, r0).to_dict(),
    )


def sir_truncation(params: SIRParams) -> list[tuple[int, int, int, int]]:
    """All states reachable under s + i + r conservation."""
    total = params.s0 + params.i0 + params.r0
    return [(s, i, total - s - i, 0)
            for s in range(total + 1)
            for i in range(total - s + 1)]


@dataclass(frozen=True)
class SIRSParams:
    """SIR with waning immunity returning removed individuals to susceptible."""

    transmission_rate: float | PiecewiseConstant
    recovery_rate: float
    sampling_rate: float
    waning_rate: float
    s0: int
    i0: int
    r0: int = 0

    def to_dict(self) -> dict:
        out = SIRParams(self.transmission_rate, self.recovery_rate,
                        self.sampling_rate, self.s0, self.i0, self.r0).to_dict()
        out["waning_rate"] = self.waning_rate
        return out


def sirs_spec(params: SIRSParams, mu: float = 1.0) -> ModelSpec:
    """State (s, i, r, sampled); waning is unmarked since i is unchanged."""
    beta = _as_rate(params.transmission_rate)
    gamma = float(params.recovery_rate)
    psi = float(params.sampling_rate)
    sigma = float(params.waning_rate)
    if min(gamma, psi, sigma) < 0:
        raise ValueError("rates must be nonnegative")
    s0 = _check_count("s0", params.s0)
    i0 = _check_count("i0", params.i0)
    r0 = _check_count("r0", params.r0)
    infection, bound, varying, breaks = _si_product(beta)
    init_sample, init_pmf = _point_mass(np.array([s0, i0, r0, 0]))
    return ModelSpec(
        name="sirs",
        d=4,
        events=(
            EventType("infection", (-1, 1, 0, 0), is_birth=True),
            EventType("recovery", (0, -1, 1, 0), is_death=True),
            EventType("sampling", (0, 0, 0, 1), is_sample=True),
            EventType("waning", (1, 0, -1, 0)),
        ),
        rates=(
            infection,
            lambda t, x: gamma * x[..., 1],
            lambda t, x: psi * x[..., 1],
            lambda t, x: sigma * x[..., 2],
        ),
        init_sample=init_sample,
        init_pmf=init_pmf,
        focal_size=lambda x: x[..., 1],
        mu=mu,
        rate_bounds=(bound, None, None, None) if bound is not None else None,
        time_dependent=(varying, False, False, False),
        rate_breakpoints=breaks,
        bookkeeping_dims=(3,),
        params=SIRSParams(beta, gamma, psi, sigma, s0, i0, r0).to_dict(),
    )


sirs_truncation = sir_truncation


@dataclass(frozen=True)
class S2IRParams:
    """SIR with two susceptible classes of different transmissibility."""

    transmission_rate_1: float
    transmission_rate_2: float
    recovery_rate: float
    sampling_rate: float
    s1_0: int
    s2_0: int
    i0: int

    def to_dict(self) -> dict:
        return {"transmission_rate_1": self.transmission_rate_1,
                "transmission_rate_2": self.transmission_rate_2,
                "recovery_rate": self.recovery_rate,
                "sampling_rate": self.sampling_rate,
                "s1_0": self.s1_0, "s2_0": self.s2_0, "i0": self.i0}


def s2ir_spec(params: S2IRParams, mu: float = 1.0) -> ModelSpec:
    """State (s1, s2, i, sampled); recovered individuals are not tracked."""
    b1 = float(params.transmission_rate_1)
    b2 = float(params.transmission_rate_2)
    gamma = float(params.recovery_rate)
    psi = float(params.sampling_rate)
    if min(b1, b2, gamma, psi) < 0:
        raise ValueError("rates must be nonnegative")
    s1_0 = _check_count("s1_0", params.s1_0)
    s2_0 = _check_count("s2_0", params.s2_0)
    i0 = _check_count("i0", params.i0)
    init_sample, init_pmf = _point_mass(np.array([s1_0, s2_0, i0, 0]))
    return ModelSpec(
        name="s2ir",
        d=4,
        events=(
            EventType("infection_1", (-1, 0, 1, 0), is_birth=True),
            EventType("infection_2", (0, -1, 1, 0), is_birth=True),
            EventType("recovery", (0, 0, -1, 0), is_death=True),
            EventType("sampling", (0, 0, 0, 1), is_sample=True),
        ),
        rates=(
            lambda t, x: b1 * x[..., 0] * x[..., 2],
            lambda t, x: b2 * x[..., 1] * x[..., 2],
            lambda t, x: gamma * x[..., 2],
            lambda t, x: psi * x[..., 2],
        ),
        init_sample=init_sample,
        init_pmf=init_pmf,
        focal_size=lambda x: x[..., 2],
        mu=mu,
        bookkeeping_dims=(3,),
        params=params.to_dict(),
    )


def s2ir_truncation(params: S2IRParams) -> list[tuple[int, int, int, int]]:
    out = []
    for s1 in range(params.s1_0 + 1):
        for s2 in range(params.s2_0 + 1):
            i_max = params.i0 + (params.s1_0 - s1) + (params.s2_0 - s2)
            out.extend((s1, s2, i, 0) for i in range(i_max + 1))
    return out


MODELS: dict[str, tuple[type, Callable]] = {
    "lbdp": (LBDPParams, lbdp_spec),
    "sir": (SIRParams, sir_spec),
    "sirs": (SIRSParams, sirs_spec),
    "s2ir": (S2IRParams, s2ir_spec),
}


def build_model(name: str, params: Mapping, mu: float = 1.0) -> ModelSpec:
    """Construct a registered model from a plain parameter mapping."""
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    cls, builder = MODELS[name]
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(params) - fields
    if unknown:
        raise ValueError(f"model {name!r}: unknown parameters {sorted(unknown)}")
    kwargs = dict(params)
    if "transmission_rate" in kwargs:
        kwargs["transmission_rate"] = _as_rate(kwargs["transmission_rate"])
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"model {name!r}: {exc}") from None
    return builder(obj, mu=mu)
