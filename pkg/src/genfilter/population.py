"""Markov jump population processes on the integer lattice.

A model couples a finite catalog of event channels (integer displacement plus
birth/death/sample markers) with nonnegative rate functions, an initial
distribution, and a focal-subpopulation size map.  This module simulates exact
trajectories, evaluates trajectory log densities against a Poisson base
measure, and integrates the Kolmogorov forward (master) equation on a finite
truncation of the lattice.

Rate functions are callables ``rate(t, x)`` where ``x`` may carry leading
batch axes (shape ``(..., d)``).  Writing rates as plain numpy expressions,
as the built-in models do, lets the particle filter propagate whole ensembles
without Python-level loops; scalar use sees ``x`` of shape ``(d,)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.sparse import coo_matrix, diags

DEFAULT_MAX_JUMPS = 10_000_000

RateFn = Callable[[float, np.ndarray], object]
BoundFn = Callable[[float, float, np.ndarray], float]


class SimulationError(RuntimeError):
    """Raised when an exact simulation cannot proceed."""


class IntegrationError(RuntimeError):
    """Raised when forward-equation integration fails."""


def ensure_rng(rng) -> np.random.Generator:
    """Coerce ``rng`` (Generator, SeedSequence, int, or None) to a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class EventType:
    """One transition channel: a displacement plus optional markers.

    Birth and death markers are mutually exclusive; a sample marker excludes
    both.  Unmarked channels move the state without touching the focal
    subpopulation's membership bookkeeping.
    """

    name: str
    displacement: tuple[int, ...]
    is_birth: bool = False
    is_death: bool = False
    is_sample: bool = False

    def __post_init__(self):
        if self.is_birth and self.is_death:
            raise ValueError(f"event {self.name!r}: birth and death markers are exclusive")
        if self.is_sample and (self.is_birth or self.is_death):
            raise ValueError(f"event {self.name!r}: sample marker excludes birth/death")

    @property
    def is_marked(self) -> bool:
        return self.is_birth or self.is_death or self.is_sample


class ModelSpec:
    """A continuous-time Markov jump process on Z^d with marked channels.

    Parameters
    ----------
    events : sequence of EventType
        The finite event catalog.  Displacements must be pairwise distinct so
        that a jump's displacement identifies its channel.
    rates : sequence of callables
        One rate per event, ``rate(t, x) -> nonnegative``, broadcasting over
        leading axes of ``x``.
    init_sample, init_pmf
        Sampler ``rng -> state`` and pmf ``state -> probability`` of the
        initial distribution.
    focal_size
        Size of the focal subpopulation, ``x -> int``, broadcasting like a
        rate.  Whenever an event has positive rate the focal size must change
        by exactly (birth marker) - (death marker); `validate_model` probes
        this.
    mu : float
        Rate of the Poisson base measure used by the density functions.
    rate_bounds : sequence of callables or None
        Per-event ``bound(t0, t1, x)`` dominating the rate on [t0, t1] at
        fixed ``x``; required only for channels flagged time-dependent.
    time_dependent : sequence of bool or None
        Which channels' rates vary with t between jumps.  None means none do.
    rate_breakpoints : tuple of float
        Times where rates may jump discontinuously; quadrature splits there.
    bookkeeping_dims : tuple of int
        Trailing coordinates that no rate or focal size reads (pure event
        counters).  The filter may project them out of its internal state.
    """

    def __init__(self, name, d, events, rates, init_sample, init_pmf, focal_size,
                 mu=1.0, rate_bounds=None, time_dependent=None, rate_breakpoints=(),
                 bookkeeping_dims=(), max_jumps=DEFAULT_MAX_JUMPS, params=None):
        events = tuple(events)
        if len(rates) != len(events):
            raise ValueError("need exactly one rate function per event")
        seen = set()
        for ev in events:
            if len(ev.displacement) != d:
                raise ValueError(f"event {ev.name!r}: displacement is not length {d}")
            if ev.displacement in seen:
                raise ValueError(f"duplicate displacement {ev.displacement}")
            seen.add(ev.displacement)
        self.name = name
        self.d = int(d)
        self.events = events
        self.rates = tuple(rates)
        self.init_sample = init_sample
        self.init_pmf = init_pmf
        self.focal_size = focal_size
        self.mu = float(mu)
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        self.rate_bounds = tuple(rate_bounds) if rate_bounds is not None else None
        if time_dependent is None:
            time_dependent = (False,) * len(events)
        self.time_dependent = tuple(bool(f) for f in time_dependent)
        if len(self.time_dependent) != len(events):
            raise ValueError("time_dependent must have one flag per event")
        self.rate_breakpoints = tuple(float(t) for t in rate_breakpoints)
        bookkeeping_dims = tuple(sorted(int(i) for i in bookkeeping_dims))
        if bookkeeping_dims and bookkeeping_dims != tuple(range(d - len(bookkeeping_dims), d)):
            raise ValueError("bookkeeping_dims must be a trailing block of coordinates")
        self.bookkeeping_dims = bookkeeping_dims
        self.active_dims = tuple(i for i in range(d) if i not in bookkeeping_dims)
        self.max_jumps = int(max_jumps)
        self.params = dict(params or {})

        self.n_events = len(events)
        self.displacements = np.array([ev.displacement for ev in events],
                                      dtype=np.int64).reshape(self.n_events, d)
        self.birth_mask = np.array([ev.is_birth for ev in events], dtype=bool)
        self.death_mask = np.array([ev.is_death for ev in events], dtype=bool)
        self.sample_mask = np.array([ev.is_sample for ev in events], dtype=bool)
        self.marked_mask = self.birth_mask | self.death_mask | self.sample_mask
        self.any_time_dependent = any(self.time_dependent)

    def __repr__(self):
        return f"ModelSpec({self.name!r}, d={self.d}, events={len(self.events)})"

    def rate(self, k: int, t: float, x) -> float:
        """Rate of channel ``k`` at time ``t`` in state ``x``."""
        return float(np.asarray(self.rates[k](t, np.asarray(x, dtype=np.int64))))

    def rate_matrix(self, t: float, states) -> np.ndarray:
        """All channel rates at once; shape ``states.shape[:-1] + (n_events,)``."""
        states = np.asarray(states, dtype=np.int64)
        out = np.empty(states.shape[:-1] + (self.n_events,), dtype=float)
        for k, fn in enumerate(self.rates):
            out[..., k] = fn(t, states)
        return out

    def total_rate(self, t: float, x) -> float:
        return float(self.rate_matrix(t, x).sum())

    def rate_bound(self, k: int, t0: float, t1: float, x) -> float:
        """An upper bound for channel ``k`` on [t0, t1] at state ``x``."""
        if self.rate_bounds is not None and self.rate_bounds[k] is not None:
            return float(self.rate_bounds[k](t0, t1, np.asarray(x, dtype=np.int64)))
        if not self.time_dependent[k]:
            return self.rate(k, t0, x)
        raise SimulationError(
            f"model {self.name!r}: channel {self.events[k].name!r} is time-dependent "
            f"but no rate bound was supplied")

    def focal_sizes(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        return np.asarray(self.focal_size(states), dtype=np.int64)

    def focal(self, x) -> int:
        return int(self.focal_sizes(x))


@dataclass
class ModelReport:
    """Outcome of `validate_model`; empty ``violations`` means pass."""

    violations: list[str]
    probed: int

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_model(spec: ModelSpec, probe_states: Iterable, times=(0.0,)) -> ModelReport:
    """Probe rate nonnegativity, finiteness, and marker/focal-size consistency.

    For every probe state and event with positive rate, the focal size across
    the displacement must change by exactly birth - death markers; otherwise
    the auxiliary-number bookkeeping of marked events would be ill-defined.
    """
    violations = []
    probed = 0
    for raw in probe_states:
        x = np.asarray(raw, dtype=np.int64)
        probed += 1
        for t in times:
            total = 0.0
            for k, ev in enumerate(spec.events):
                r = spec.rate(k, t, x)
                if not math.isfinite(r):
                    violations.append(f"state {tuple(x)}, event {ev.name!r}, t={t}: rate {r} not finite")
                    continue
                if r < 0:
                    violations.append(f"state {tuple(x)}, event {ev.name!r}, t={t}: negative rate {r}")
                    continue
                total += r
                if r > 0:
                    delta = spec.focal(x + spec.displacements[k]) - spec.focal(x)
                    expect = int(ev.is_birth) - int(ev.is_death)
                    if delta != expect:
                        violations.append(
                            f"state {tuple(x)}, event {ev.name!r}: focal size changes by "
                            f"{delta}, markers require {expect}")
            if not math.isfinite(total):
                violations.append(f"state {tuple(x)}, t={t}: total rate not finite")
    return ModelReport(violations, probed)


@dataclass(frozen=True)
class Jump:
    """One realized event: time, channel index, auxiliary member number."""

    time: float
    event: int
    aux: int = 0


@dataclass(frozen=True)
class JumpSequence:
    """A trajectory: initial state, ordered jumps, and observation horizon."""

    x0: tuple[int, ...]
    jumps: tuple[Jump, ...]
    t_end: float


@dataclass(frozen=True)
class History:
    """A trajectory with the auxiliary numbers forgotten."""

    horizon: float
    x0: tuple[int, ...]
    events: tuple[tuple[float, int], ...]


def to_history(traj: JumpSequence) -> History:
    return History(traj.t_end, traj.x0, tuple((j.time, j.event) for j in traj.jumps))


def _pick_channel(rng, rates, total) -> int:
    u = rng.random() * total
    k = int(np.searchsorted(np.cumsum(rates), u, side="right"))
    return min(k, len(rates) - 1)


def simulate(spec: ModelSpec, t_end: float, rng, max_jumps: int | None = None) -> JumpSequence:
    """Draw an exact trajectory on [0, t_end].

    Constant-rate stretches use the usual exponential-clock recipe; if any
    channel is flagged time-dependent the next jump is drawn by thinning
    against the caller-supplied rate bounds, and a realized rate exceeding
    its bound is a hard failure naming the interval.  Marked events draw an
    auxiliary number uniformly over the focal subpopulation just before the
    jump.  Identical (spec, seed, t_end) give identical output.
    """
    rng = ensure_rng(rng)
    cap = spec.max_jumps if max_jumps is None else int(max_jumps)
    x = np.asarray(spec.init_sample(rng), dtype=np.int64)
    if x.shape != (spec.d,):
        raise SimulationError(f"init_sample returned shape {x.shape}, expected ({spec.d},)")
    x0 = tuple(int(v) for v in x)
    t = 0.0
    jumps: list[Jump] = []
    while True:
        if spec.any_time_dependent:
            hit = _next_jump_thinned(spec, t, t_end, x, rng)
        else:
            rates = spec.rate_matrix(t, x)
            total = float(rates.sum())
            if total <= 0.0:
                hit = None
            else:
                t_next = t + rng.exponential() / total
                hit = None if t_next > t_end else (t_next, _pick_channel(rng, rates, total))
        if hit is None:
            break
        t, k = hit
        ev = spec.events[k]
        if ev.is_marked:
            size = spec.focal(x)
            if size <= 0:
                raise SimulationError(
                    f"marked event {ev.name!r} fired at t={t} with focal size 0")
            aux = int(rng.integers(size))
        else:
            aux = 0
        x = x + spec.displacements[k]
        jumps.append(Jump(t, k, aux))
        if len(jumps) > cap:
            raise SimulationError(f"jump count exceeded cap {cap} before t={t_end}")
    return JumpSequence(x0, tuple(jumps), float(t_end))


def _next_jump_thinned(spec, t, t_end, x, rng):
    """Next jump by thinning against per-channel bounds valid on [t, t_end]."""
    bound = 0.0
    for k in range(spec.n_events):
        bound += spec.rate_bound(k, t, t_end, x)
    if bound <= 0.0:
        return None
    cur = t
    while True:
        cur = cur + rng.exponential() / bound
        if cur > t_end:
            return None
        rates = spec.rate_matrix(cur, x)
        total = float(rates.sum())
        if total > bound * (1.0 + 1e-12):
            raise SimulationError(
                f"total rate {total} exceeds its bound {bound} on [{t}, {t_end}]")
        if rng.random() * bound <= total:
            return cur, _pick_channel(rng, rates, total)


def state_at(spec: ModelSpec, traj: JumpSequence, t: float) -> np.ndarray:
    """State at time ``t`` (right-continuous)."""
    x = np.asarray(traj.x0, dtype=np.int64).copy()
    for j in traj.jumps:
        if j.time > t:
            break
        x += spec.displacements[j.event]
    return x


def state_before(spec: ModelSpec, traj: JumpSequence, t: float) -> np.ndarray:
    """Left limit of the state at time ``t``."""
    x = np.asarray(traj.x0, dtype=np.int64).copy()
    for j in traj.jumps:
        if j.time >= t:
            break
        x += spec.displacements[j.event]
    return x


def iter_transitions(spec: ModelSpec, obj):
    """Yield ``(time, event, x_pre, x_post)`` along a JumpSequence or History."""
    if isinstance(obj, JumpSequence):
        events = [(j.time, j.event) for j in obj.jumps]
        x0 = obj.x0
    else:
        events = list(obj.events)
        x0 = obj.x0
    x = np.asarray(x0, dtype=np.int64).copy()
    for t, k in events:
        pre = x.copy()
        x = x + spec.displacements[k]
        yield t, k, pre, x.copy()


def _rate_integral(spec: ModelSpec, x, t0: float, t1: float) -> float:
    """Integral of the total rate over [t0, t1] at frozen state ``x``.

    Exact for constant channels; adaptive quadrature (split at declared
    breakpoints) for time-dependent ones.
    """
    if t1 <= t0:
        return 0.0
    x = np.asarray(x, dtype=np.int64)
    const = 0.0
    varying = [k for k in range(spec.n_events) if spec.time_dependent[k]]
    for k in range(spec.n_events):
        if k not in varying:
            const += spec.rate(k, t0, x)
    total = const * (t1 - t0)
    if varying:
        def f(s):
            return sum(spec.rate(k, s, x) for k in varying)
        pts = sorted(p for p in spec.rate_breakpoints if t0 < p < t1)
        cuts = [t0, *pts, t1]
        for a, b in zip(cuts[:-1], cuts[1:]):
            val, _ = quad(f, a, b, epsabs=1e-14, epsrel=1e-9, limit=200)
            total += val
    return total


def history_log_density(spec: ModelSpec, h: History) -> float:
    """Log density of a history against the rate-``mu`` Poisson base measure.

    Returns -inf when the initial state has zero mass or some realized event
    has zero rate at its own jump time.
    """
    x = np.asarray(h.x0, dtype=np.int64)
    p0 = float(spec.init_pmf(x))
    if p0 <= 0.0:
        return -math.inf
    logp = math.log(p0)
    survival = 0.0
    t_prev = 0.0
    for t, k in h.events:
        if not 0.0 < t <= h.horizon or t < t_prev:
            raise ValueError(f"event time {t} is outside (0, {h.horizon}] or unordered")
        survival += _rate_integral(spec, x, t_prev, t)
        r = spec.rate(k, t, x)
        if r <= 0.0:
            return -math.inf
        logp += math.log(r / spec.mu)
        x = x + spec.displacements[k]
        t_prev = t
    survival += _rate_integral(spec, x, t_prev, h.horizon)
    return logp + spec.mu * h.horizon - survival


def jump_log_density(spec: ModelSpec, traj: JumpSequence) -> float:
    """Log density of a full trajectory (history plus auxiliary numbers).

    Each marked event contributes ``-log I(x-)`` for the uniform member
    choice; an auxiliary number outside ``[0, I(x-))`` gives -inf.
    """
    base = history_log_density(spec, to_history(traj))
    if base == -math.inf:
        return -math.inf
    x = np.asarray(traj.x0, dtype=np.int64)
    for j in traj.jumps:
        ev = spec.events[j.event]
        if ev.is_marked:
            size = spec.focal(x)
            if not 0 <= j.aux < size:
                return -math.inf
            base -= math.log(size)
        elif j.aux != 0:
            return -math.inf
        x = x + spec.displacements[j.event]
    return base


class StateLattice:
    """A finite, ordered set of lattice states with per-displacement maps."""

    def __init__(self, states, d: int):
        rows = sorted({tuple(int(v) for v in s) for s in states})
        if not rows:
            raise ValueError("empty truncation")
        for r in rows:
            if len(r) != d:
                raise ValueError(f"state {r} is not length {d}")
        self.d = d
        self.states = np.array(rows, dtype=np.int64).reshape(len(rows), d)
        self.size = len(rows)
        self.index = {r: i for i, r in enumerate(rows)}
        self._transitions: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    def row_of(self, state) -> int | None:
        return self.index.get(tuple(int(v) for v in state))

    def transition(self, displacement) -> tuple[np.ndarray, np.ndarray]:
        """Rows (src, dst) for which src + displacement stays on the lattice."""
        key = tuple(int(v) for v in displacement)
        cached = self._transitions.get(key)
        if cached is not None:
            return cached
        src, dst = [], []
        for i, s in enumerate(self.states):
            j = self.index.get(tuple(s + np.asarray(key, dtype=np.int64))) if key != () else i
            if j is not None:
                src.append(i)
                dst.append(j)
        out = (np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64))
        self._transitions[key] = out
        return out


def forward_generator(spec: ModelSpec, lattice: StateLattice, t: float):
    """Sparse master-equation generator A with (A w)(x) = sum_u inflow - outflow.

    Probability flowing to states outside the lattice is discarded, so the
    truncated solution is a lower bound on the true law.
    """
    R = spec.rate_matrix(t, lattice.states)
    rows, cols, data = [], [], []
    for k in range(spec.n_events):
        src, dst = lattice.transition(spec.displacements[k])
        if len(src):
            rows.append(dst)
            cols.append(src)
            data.append(R[src, k])
    A = coo_matrix((np.concatenate(data) if data else [],
                    (np.concatenate(rows) if rows else [],
                     np.concatenate(cols) if cols else [])),
                   shape=(lattice.size, lattice.size)).tocsr()
    return A + diags(-R.sum(axis=1))


def integrate_linear(rhs, w, t0: float, t1: float, tol: float) -> np.ndarray:
    """Advance w' = rhs(t, w) from t0 to t1 with an adaptive embedded RK pair."""
    if t1 < t0:
        raise ValueError("t1 < t0")
    if t1 == t0:
        return w.copy()
    sol = solve_ivp(rhs, (t0, t1), w, method="RK45", rtol=tol, atol=tol * 1e-6)
    if not sol.success:
        reached = sol.t[-1] if len(sol.t) else t0
        raise IntegrationError(f"forward integration failed near t={reached}: {sol.message}")
    return sol.y[:, -1]


def kfe_integrate(spec: ModelSpec, truncation, w0: Mapping, t0: float, t1: float,
                  tol: float = 1e-8) -> dict:
    """Integrate the master equation on a finite truncation.

    ``w0`` maps states (tuples) to weights; the result is a dict over the
    whole truncation.  The caller is responsible for choosing a truncation
    that loses negligible probability flux.
    """
    lattice = StateLattice(truncation, spec.d)
    w = np.zeros(lattice.size)
    for state, val in w0.items():
        row = lattice.row_of(state)
        if row is None:
            raise ValueError(f"w0 state {tuple(state)} is outside the truncation")
        w[row] = val
    if spec.any_time_dependent:
        def rhs(t, v):
            return forward_generator(spec, lattice, t) @ v
    else:
        A = forward_generator(spec, lattice, t0)

        def rhs(t, v):
            return A @ v
    w = integrate_linear(rhs, w, t0, t1, tol)
    return {tuple(int(v) for v in s): float(w[i]) for i, s in enumerate(lattice.states)}


# ---------------------------------------------------------------------------
# Serialization: line-oriented CSV plus a JSON header sidecar.

def _format_time(t: float) -> str:
    return f"{t:.17g}"


def _header_dict(spec: ModelSpec, kind: str, x0, horizon, seed, provenance) -> dict:
    head = {
        "kind": kind,
        "model": spec.name,
        "params": spec.params,
        "seed": seed,
        "x0": [int(v) for v in x0],
        "t_end": horizon,
        "events": [ev.name for ev in spec.events],
    }
    if provenance:
        head["provenance"] = provenance
    return head


def write_trajectory(base, spec: ModelSpec, traj: JumpSequence, seed=None,
                     provenance: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``base.csv`` (time,event_name,aux) and ``base.json`` (header)."""
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    lines = ["time,event_name,aux"]
    for j in traj.jumps:
        lines.append(f"{_format_time(j.time)},{spec.events[j.event].name},{j.aux}")
    csv_path.write_text("\n".join(lines) + "\n")
    head = _header_dict(spec, "jumps", traj.x0, traj.t_end, seed, provenance)
    json_path.write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def write_history(base, spec: ModelSpec, h: History, seed=None,
                  provenance: Mapping | None = None) -> tuple[Path, Path]:
    """Like `write_trajectory` but with the aux column left empty."""
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    lines = ["time,event_name,aux"]
    for t, k in h.events:
        lines.append(f"{_format_time(t)},{spec.events[k].name},")
    csv_path.write_text("\n".join(lines) + "\n")
    head = _header_dict(spec, "history", h.x0, h.horizon, seed, provenance)
    json_path.write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_trajectory(base) -> tuple[JumpSequence | History, dict]:
    """Read a trajectory or history written by the writers above.

    Returns ``(JumpSequence, header)`` or ``(History, header)`` depending on
    the header's ``kind``.  Event names are resolved through the header's
    catalog listing, so no model object is needed.
    """
    base = Path(base)
    head = json.loads(base.with_suffix(".json").read_text())
    index = {name: k for k, name in enumerate(head["events"])}
    x0 = tuple(int(v) for v in head["x0"])
    horizon = float(head["t_end"])
    rows = []
    text = base.with_suffix(".csv").read_text().splitlines()
    if not text or text[0] != "time,event_name,aux":
        raise ValueError(f"{base.with_suffix('.csv')}: missing trajectory CSV header")
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{base.with_suffix('.csv')}:{lineno}: expected 3 columns")
        t, name, aux = parts
        if name not in index:
            raise ValueError(f"{base.with_suffix('.csv')}:{lineno}: unknown event {name!r}")
        rows.append((float(t), index[name], aux))
    if head["kind"] == "history":
        return History(horizon, x0, tuple((t, k) for t, k, _ in rows)), head
    jumps = tuple(Jump(t, k, int(aux)) for t, k, aux in rows)
    return JumpSequence(x0, jumps, horizon), head
