"""Likelihood of a visible genealogy under partial observation.

Two routes, useful as cross-checks on each other:

* `smc_loglik` runs a particle filter over the genealogy's event times.
  Particles simulate the population process between events; at each event
  the exact channel-sum weight is applied and a channel is sampled for the
  state move.  Interval weighting comes in two modes: ``rejection``
  simulates sampling events and kills particles that produce one, while
  ``analytic-survival`` (the default) disables sampling channels and applies
  the exact survival weight, which lowers variance at equal cost.
* `oracle_loglik` integrates the same unnormalized filtering recursion
  deterministically over a finite state truncation, which makes it an
  accuracy oracle at small scale.

States whose focal size drops below the number of lineages the genealogy
requires carry zero weight throughout.  Coordinates declared as bookkeeping
on the model (pure event counters) are projected out of the internal state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.integrate import quad
from scipy.sparse import coo_matrix, diags
from scipy.special import logsumexp

from .genealogy import BLACK, BLUE, GREEN, Genealogy, LineageFunction
from .population import ModelSpec, StateLattice, ensure_rng, integrate_linear

RESAMPLING_METHODS = ("systematic", "multinomial")
WEIGHTING_MODES = ("analytic-survival", "rejection")


class FilterError(RuntimeError):
    """Raised on configuration or structural errors in the filter."""


@dataclass(frozen=True)
class FilterConfig:
    """Particle-filter settings.

    ``ess_threshold`` is the fraction of the particle count below which the
    ensemble is resampled after an event update.
    """

    n_particles: int
    seed: int | None = None
    ess_threshold: float = 0.5
    resampling: str = "systematic"
    weighting: str = "analytic-survival"

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold is a fraction of n_particles")
        if self.resampling not in RESAMPLING_METHODS:
            raise ValueError(f"resampling must be one of {RESAMPLING_METHODS}")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"weighting must be one of {WEIGHTING_MODES}")


@dataclass
class Ensemble:
    """Weighted particles: integer states (projected) and log weights."""

    states: np.ndarray
    log_weights: np.ndarray

    def __len__(self):
        return len(self.log_weights)


class EventDiagnostics(NamedTuple):
    time: float
    kind: str
    log_mean_weight: float
    ess: float
    resampled: bool


@dataclass
class FilterDiagnostics:
    """Per-event bookkeeping of one filter run.

    ``collapsed`` marks the point where every particle weight vanished.  For
    a genealogy the model cannot produce at all, -inf is the exact answer;
    otherwise a collapse means the particle count was insufficient.
    """

    events: list[EventDiagnostics] = field(default_factory=list)
    resample_count: int = 0
    collapsed: bool = False
    collapse_time: float | None = None

    @property
    def ess_trace(self) -> list[float]:
        return [row.ess for row in self.events]

    def to_csv(self, path, provenance=None) -> Path:
        path = Path(path)
        lines = []
        for key, val in (provenance or {}).items():
            lines.append(f"# {key}: {val}")
        lines.append("time,kind,log_mean_weight,ess,resampled")
        for row in self.events:
            lines.append(f"{row.time:.17g},{row.kind},{row.log_mean_weight:.17g},"
                         f"{row.ess:.17g},{int(row.resampled)}")
        path.write_text("\n".join(lines) + "\n")
        return path


@dataclass
class SMCResult:
    loglik: float
    diagnostics: FilterDiagnostics


@dataclass
class ReplicateResult:
    """Mean and standard error over independent filter replicates."""

    mean: float
    se: float
    estimates: tuple[float, ...]
    collapse_count: int


@dataclass
class WeightGrid:
    """Partial weights over a truncation at a fixed time.

    These are unnormalized filter weights, not a posterior over states; their
    sum is the likelihood accumulated so far.
    """

    states: np.ndarray
    weights: np.ndarray
    time: float


def event_schedule(v: Genealogy) -> tuple[tuple[float, str], ...]:
    """Classified event times of a visible genealogy, in sequence order.

    Root nodes (which hold their own green ball) describe the initial
    condition and are not events.
    """
    out = []
    for n in v.nodes:
        greens = [b for b in n.pocket if b.color == GREEN]
        has_blue = any(b.color == BLUE for b in n.pocket)
        if any(b.name == n.name for b in greens):
            continue
        if any(b.color == BLACK for b in n.pocket):
            raise FilterError(f"node {n.name}: genealogy still has extant individuals; prune first")
        if len(greens) == 2:
            kind = "coalescence"
        elif len(greens) == 1 and has_blue:
            kind = "direct"
        elif not greens and has_blue:
            kind = "leaf"
        else:
            raise FilterError(f"node {n.name}: pocket is not of visible-genealogy form")
        out.append((n.time, kind))
    return tuple(out)


def _choose2_arr(n: np.ndarray) -> np.ndarray:
    return n * (n - 1) / 2.0


class _FilterModel:
    """Model wrapper with bookkeeping coordinates projected out."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.n_active = len(spec.active_dims)
        self.U = spec.displacements[:, :self.n_active]
        self.mu = spec.mu
        self.birth_events = [k for k, ev in enumerate(spec.events) if ev.is_birth]
        self.death_events = [k for k, ev in enumerate(spec.events) if ev.is_death]
        self.sample_events = [k for k, ev in enumerate(spec.events) if ev.is_sample]

    def project(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.int64)[..., :self.n_active]

    def rates_at(self, t: float, states: np.ndarray) -> np.ndarray:
        return self.spec.rate_matrix(t, states)

    def focal(self, states) -> np.ndarray:
        return self.spec.focal_sizes(states)

    def channels_for(self, kind: str) -> list[int]:
        events = self.birth_events if kind == "coalescence" else self.sample_events
        if not events:
            raise FilterError(
                f"genealogy has a {kind} event but the model has no matching channel")
        return events


def init_ensemble(spec: ModelSpec, n: int, rng) -> Ensemble:
    """Draw ``n`` particles from the initial distribution (projected state)."""
    rng = ensure_rng(rng)
    fm = _FilterModel(spec)
    states = np.empty((n, fm.n_active), dtype=np.int64)
    for i in range(n):
        states[i] = fm.project(spec.init_sample(rng))
    return Ensemble(states, np.zeros(n))


def _sample_rate_integral(fm: _FilterModel, x: np.ndarray, a: float, b: float) -> float:
    """Integral of the total sampling rate on [a, b] at frozen state x."""
    spec = fm.spec
    total = 0.0
    for k in fm.sample_events:
        if spec.time_dependent[k]:
            pts = sorted(p for p in spec.rate_breakpoints if a < p < b)
            cuts = [a, *pts, b]
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                val, _ = quad(lambda s: spec.rates[k](s, x), lo, hi,
                              epsabs=1e-14, epsrel=1e-9, limit=200)
                total += val
        else:
            total += float(np.asarray(spec.rates[k](a, x))) * (b - a)
    return total


def _propagate_const(fm, states, logw, t0, t1, ell, rng, survival: bool):
    """Vectorized exact simulation of all particles from t0 to t1.

    All particles draw from the shared stream every round regardless of
    whether they still move, so the output is invariant to which particles
    finish first.
    """
    spec = fm.spec
    n = len(logw)
    k_count = spec.n_events
    t = np.full(n, t0)
    done = ~np.isfinite(logw)
    t[done] = t1
    c2_ell = ell * (ell - 1) / 2.0
    sample_cols = np.asarray(fm.sample_events, dtype=np.intp)
    while not done.all():
        active = ~done
        rates = fm.rates_at(t0, states)
        np.maximum(rates, 0.0, out=rates)
        g_rate = rates[:, sample_cols].sum(axis=1) if len(sample_cols) else np.zeros(n)
        if survival and len(sample_cols):
            rates[:, sample_cols] = 0.0
        total = rates.sum(axis=1)
        draws = rng.exponential(size=n)
        with np.errstate(divide="ignore", invalid="ignore"):
            dt = np.where(total > 0.0, draws / np.where(total > 0.0, total, 1.0), np.inf)
        t_next = t + dt
        fires = active & (t_next < t1)
        if survival:
            dwell = np.minimum(t_next, t1) - t
            logw[active] -= g_rate[active] * dwell[active]
        u = rng.random(size=n)
        cum = np.cumsum(rates, axis=1)
        choice = (u[:, None] * total[:, None] > cum).sum(axis=1)
        np.minimum(choice, k_count - 1, out=choice)
        idx = np.flatnonzero(fires)
        if len(idx):
            states[idx] += fm.U[choice[idx]]
            t[idx] = t_next[idx]
            picked = choice[idx]
            born = idx[spec.birth_mask[picked]]
            if len(born):
                size = fm.focal(states[born]).astype(float)
                pairs = _choose2_arr(size)
                with np.errstate(divide="ignore", invalid="ignore"):
                    factor = np.where(pairs > 0.0, 1.0 - c2_ell / np.where(pairs > 0, pairs, 1.0),
                                      1.0 if c2_ell == 0.0 else 0.0)
                factor = np.where(size >= ell, factor, 0.0)
                with np.errstate(divide="ignore"):
                    logw[born] += np.where(factor > 0.0, np.log(np.maximum(factor, 1e-300)), -np.inf)
            died = idx[spec.death_mask[picked]]
            if len(died):
                bad = died[fm.focal(states[died]) < ell]
                logw[bad] = -np.inf
            if not survival and len(sample_cols):
                hit = idx[spec.sample_mask[picked]]
                logw[hit] = -np.inf
        finished = active & ~fires
        t[finished] = t1
        done |= finished | ~np.isfinite(logw)
    return states, logw


def _propagate_tv(fm, states, logw, t0, t1, ell, rng, survival: bool):
    """Per-particle thinning when some rates vary with time between jumps."""
    spec = fm.spec
    allowed = [k for k in range(spec.n_events)
               if not (survival and spec.events[k].is_sample)]
    c2_ell = ell * (ell - 1) / 2.0
    for i in range(len(logw)):
        if not math.isfinite(logw[i]):
            continue
        t = t0
        x = states[i]
        while True:
            bound = sum(spec.rate_bound(k, t, t1, x) for k in allowed)
            if bound <= 0.0:
                jump = None
            else:
                jump = None
                cur = t
                while True:
                    cur = cur + rng.exponential() / bound
                    if cur > t1:
                        break
                    r = np.array([spec.rates[k](cur, x) for k in allowed], dtype=float)
                    tot = float(r.sum())
                    if tot > bound * (1.0 + 1e-12):
                        raise FilterError(
                            f"total rate {tot} exceeds its bound {bound} on [{t}, {t1}]")
                    if rng.random() * bound <= tot:
                        pick = int(np.searchsorted(np.cumsum(r), rng.random() * tot, side="right"))
                        jump = (cur, allowed[min(pick, len(allowed) - 1)])
                        break
            stop = t1 if jump is None else jump[0]
            if survival:
                logw[i] -= _sample_rate_integral(fm, x, t, stop)
            if jump is None:
                break
            t, k = jump
            ev = spec.events[k]
            x += fm.U[k]
            if ev.is_birth:
                size = float(fm.focal(x))
                pairs = size * (size - 1) / 2.0
                factor = 1.0 - c2_ell / pairs if pairs > 0 else (1.0 if c2_ell == 0 else 0.0)
                if size < ell or factor <= 0.0:
                    logw[i] = -np.inf
                    break
                logw[i] += math.log(factor)
            elif ev.is_death and fm.focal(x) < ell:
                logw[i] = -np.inf
                break
            elif ev.is_sample and not survival:
                logw[i] = -np.inf
                break
    return states, logw


def propagate_interval(spec: ModelSpec, particles: Ensemble, v: Genealogy,
                       t0: float, t1: float, rng,
                       weighting: str = "analytic-survival") -> Ensemble:
    """Advance all particles across an event-free stretch of the genealogy.

    The lineage count is constant on such a stretch; every simulated birth
    reweights by the probability that it was not a coalescence of tracked
    lineages, and a particle whose focal size falls below the lineage count
    is zeroed out.
    """
    if weighting not in WEIGHTING_MODES:
        raise ValueError(f"weighting must be one of {WEIGHTING_MODES}")
    fm = _FilterModel(spec)
    ell = LineageFunction(v)(t0)
    states = particles.states.copy()
    logw = particles.log_weights.copy()
    if t1 < t0:
        raise ValueError("t1 < t0")
    if t1 > t0:
        step = _propagate_tv if spec.any_time_dependent else _propagate_const
        states, logw = step(fm, states, logw, t0, t1, ell,
                            ensure_rng(rng), weighting == "analytic-survival")
    return Ensemble(states, logw)


def _event_terms(fm, states, e, kind, ell_post):
    """Per-particle, per-channel weight contributions for one event update."""
    channels = fm.channels_for(kind)
    n = len(states)
    terms = np.zeros((n, len(channels)))
    for j, k in enumerate(channels):
        alpha = np.maximum(np.asarray(fm.spec.rates[k](e, states), dtype=float), 0.0)
        size = fm.focal(states + fm.U[k]).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind == "coalescence":
                pairs = _choose2_arr(size)
                weight = np.where((size >= max(ell_post, 2)) & (pairs > 0),
                                  1.0 / np.where(pairs > 0, pairs, 1.0), 0.0)
            elif kind == "direct":
                weight = np.where((size >= max(ell_post, 1)),
                                  1.0 / np.where(size > 0, size, 1.0), 0.0)
            else:  # leaf
                weight = np.where(size >= max(ell_post, 1),
                                  1.0 - ell_post / np.where(size > 0, size, 1.0), 0.0)
        terms[:, j] = alpha / fm.mu * weight
    return channels, terms


def _apply_event(fm, states, logw, e, kind, ell_post, rng):
    """Weight and move all particles through one genealogy event, in place."""
    channels, terms = _event_terms(fm, states, e, kind, ell_post)
    total = terms.sum(axis=1)
    with np.errstate(divide="ignore"):
        logw += np.where(total > 0.0, np.log(np.maximum(total, 1e-300)), -np.inf)
    if len(channels) == 1:
        choice = np.zeros(len(states), dtype=np.intp)
    else:
        u = rng.random(len(states))
        cum = np.cumsum(terms, axis=1)
        choice = (u[:, None] * total[:, None] > cum).sum(axis=1)
        np.minimum(choice, len(channels) - 1, out=choice)
    moves = np.asarray([fm.U[k] for k in channels], dtype=np.int64)
    live = np.isfinite(logw)
    states[live] += moves[choice[live]]
    return states, logw


def event_update(spec: ModelSpec, particles: Ensemble, v: Genealogy,
                 e: float, kind: str, rng) -> Ensemble:
    """Apply one genealogy event to every particle.

    The weight gains the full sum over matching channels (births for a
    coalescence, sampling channels otherwise) of rate/mu times the event's
    combinatorial factor; the state move is sampled proportionally to the
    summands.  A particle with no compatible channel mass goes to -inf.
    """
    fm = _FilterModel(spec)
    states, logw = _apply_event(fm, particles.states.copy(),
                                particles.log_weights.copy(), e, kind,
                                LineageFunction(v)(e), ensure_rng(rng))
    return Ensemble(states, logw)


def _ess(logw: np.ndarray) -> float:
    finite = logw[np.isfinite(logw)]
    if not len(finite):
        return 0.0
    w = np.exp(finite - finite.max())
    return float(w.sum() ** 2 / (w ** 2).sum())


def _resample(rng, states, logw, method):
    n = len(logw)
    shifted = logw - logsumexp(logw)
    w = np.exp(shifted)
    w /= w.sum()
    if method == "systematic":
        positions = (rng.random() + np.arange(n)) / n
        idx = np.searchsorted(np.cumsum(w), positions, side="right")
        np.minimum(idx, n - 1, out=idx)
    else:
        idx = rng.choice(n, size=n, p=w)
    return states[idx].copy(), np.zeros(n)


def smc_loglik(spec: ModelSpec, v: Genealogy, config: FilterConfig,
               rng=None) -> SMCResult:
    """Particle-filter estimate of the log likelihood of a visible genealogy.

    Alternates interval propagation and event updates over the genealogy's
    event schedule up to its observation time.  After each event the log of
    the mean unnormalized weight is accumulated, weights are renormalized,
    and the ensemble is resampled when the effective sample size drops
    below ``ess_threshold * n_particles``.  Deterministic given the seed.
    """
    fm = _FilterModel(spec)
    schedule = event_schedule(v)
    crossing = LineageFunction(v)
    rng = ensure_rng(config.seed if rng is None else rng)
    ens = init_ensemble(spec, config.n_particles, rng)
    states, logw = ens.states, ens.log_weights
    logw[fm.focal(states) < crossing(0.0)] = -np.inf
    survival = config.weighting == "analytic-survival"
    step = _propagate_tv if spec.any_time_dependent else _propagate_const
    diag = FilterDiagnostics()
    loglik = 0.0
    t = 0.0
    for e, kind in schedule:
        if e > t:
            states, logw = step(fm, states, logw, t, e, crossing(t), rng, survival)
        states, logw = _apply_event(fm, states, logw, e, kind, crossing(e), rng)
        lmw = float(logsumexp(logw) - math.log(len(logw)))
        if not math.isfinite(lmw):
            diag.events.append(EventDiagnostics(e, kind, -math.inf, 0.0, False))
            diag.collapsed = True
            diag.collapse_time = e
            return SMCResult(-math.inf, diag)
        loglik += lmw
        logw -= lmw
        ess = _ess(logw)
        resampled = ess < config.ess_threshold * len(logw)
        if resampled:
            states, logw = _resample(rng, states, logw, config.resampling)
            diag.resample_count += 1
        diag.events.append(EventDiagnostics(e, kind, lmw, ess, resampled))
        t = e
    if v.time > t:
        states, logw = step(fm, states, logw, t, v.time, crossing(t), rng, survival)
    lmw = float(logsumexp(logw) - math.log(len(logw)))
    if not math.isfinite(lmw):
        diag.collapsed = True
        diag.collapse_time = v.time
        return SMCResult(-math.inf, diag)
    return SMCResult(loglik + lmw, diag)


def replicate_loglik(spec: ModelSpec, v: Genealogy, config: FilterConfig,
                     n_reps: int) -> ReplicateResult:
    """Independent filter replicates with seeds derived from config.seed.

    Replicates are independent streams spawned from the master seed, so
    results do not depend on evaluation order.  Collapsed replicates are
    recorded and excluded from the mean.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(n_reps)
    vals = np.array([smc_loglik(spec, v, config, rng=np.random.default_rng(s)).loglik
                     for s in seeds])
    finite = np.isfinite(vals)
    k = int(finite.sum())
    if k == 0:
        return ReplicateResult(-math.inf, math.nan, tuple(vals), n_reps)
    mean = float(vals[finite].mean())
    se = float(vals[finite].std(ddof=1) / math.sqrt(k)) if k > 1 else math.nan
    return ReplicateResult(mean, se, tuple(vals), n_reps - k)


# ---------------------------------------------------------------------------
# Deterministic truncated-grid oracle.

def _interval_generator(fm, lattice, t, ell, compat):
    """Sparse operator for the between-events weight flow at lineage count ell.

    Sampling channels act as pure killing (outflow without inflow); birth
    inflow is damped by the no-coalescence probability; inflow into states
    inconsistent with the lineage count is dropped.
    """
    spec = fm.spec
    rates = spec.rate_matrix(t, lattice.states)
    np.maximum(rates, 0.0, out=rates)
    size = fm.focal(lattice.states).astype(float)
    c2_ell = ell * (ell - 1) / 2.0
    rows, cols, data = [], [], []
    for k in range(spec.n_events):
        if spec.events[k].is_sample:
            continue
        src, dst = lattice.transition(fm.U[k])
        if not len(src):
            continue
        vals = rates[src, k]
        if spec.events[k].is_birth and c2_ell > 0.0:
            pairs = _choose2_arr(size[dst])
            with np.errstate(divide="ignore", invalid="ignore"):
                factor = np.where(pairs > 0.0, 1.0 - c2_ell / np.where(pairs > 0, pairs, 1.0), 0.0)
            vals = vals * np.maximum(factor, 0.0)
        vals = vals * compat[dst]
        rows.append(dst)
        cols.append(src)
        data.append(vals)
    mat = coo_matrix((np.concatenate(data) if data else [],
                      (np.concatenate(rows) if rows else [],
                       np.concatenate(cols) if cols else [])),
                     shape=(lattice.size, lattice.size)).tocsr()
    return mat + diags(-rates.sum(axis=1))


def _grid_event_update(fm, lattice, w, e, kind, ell_post):
    channels = fm.channels_for(kind)
    size = fm.focal(lattice.states).astype(float)
    new = np.zeros_like(w)
    for k in channels:
        src, dst = lattice.transition(fm.U[k])
        if not len(src):
            continue
        alpha = np.maximum(np.asarray(fm.spec.rates[k](e, lattice.states[src]), dtype=float), 0.0)
        sz = size[dst]
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind == "coalescence":
                pairs = _choose2_arr(sz)
                g = np.where((sz >= max(ell_post, 2)) & (pairs > 0),
                             1.0 / np.where(pairs > 0, pairs, 1.0), 0.0)
            elif kind == "direct":
                g = np.where(sz >= max(ell_post, 1), 1.0 / np.where(sz > 0, sz, 1.0), 0.0)
            else:
                g = np.where(sz >= max(ell_post, 1),
                             1.0 - ell_post / np.where(sz > 0, sz, 1.0), 0.0)
        new[dst] += alpha / fm.mu * np.maximum(g, 0.0) * w[src]
    return new


def oracle_loglik(spec: ModelSpec, v: Genealogy, truncation, tol: float = 1e-8,
                  return_grid: bool = False):
    """Deterministic log likelihood of a visible genealogy on a truncation.

    Integrates the between-events flow with an adaptive explicit RK pair and
    applies the exact event updates, starting from the initial distribution
    restricted to the truncation.  The caller asserts that the truncation
    loses negligible probability flux (`boundary_flux` helps check).
    Probability on states with fewer focal individuals than required
    lineages is zeroed, including at time zero.
    """
    fm = _FilterModel(spec)
    full = [tuple(int(c) for c in s) for s in truncation]
    proj = StateLattice((s[:fm.n_active] for s in full), fm.n_active)
    w = np.zeros(proj.size)
    for s in full:
        row = proj.row_of(s[:fm.n_active])
        w[row] += float(spec.init_pmf(np.asarray(s, dtype=np.int64)))
    size = fm.focal(proj.states)
    crossing = LineageFunction(v)
    schedule = event_schedule(v)
    w[size < crossing(0.0)] = 0.0

    def advance(w, t0, t1, ell):
        if t1 <= t0:
            return w
        compat = (size >= ell).astype(float)
        w = w * compat
        if spec.any_time_dependent:
            def rhs(t, vec):
                return _interval_generator(fm, proj, t, ell, compat) @ vec
        else:
            mat = _interval_generator(fm, proj, t0, ell, compat)

            def rhs(t, vec):
                return mat @ vec
        return integrate_linear(rhs, w, t0, t1, tol)

    t = 0.0
    for e, kind in schedule:
        w = advance(w, t, e, crossing(t))
        w = _grid_event_update(fm, proj, w, e, kind, crossing(e))
        t = e
    w = advance(w, t, v.time, crossing(t))
    total = float(w.sum())
    loglik = math.log(total) if total > 0.0 else -math.inf
    if return_grid:
        return loglik, WeightGrid(proj.states.copy(), w.copy(), v.time)
    return loglik


def boundary_flux(spec: ModelSpec, weights, t: float = 0.0) -> float:
    """Instantaneous probability flux out of the set of weighted states.

    ``weights`` maps states to mass (a dict or a WeightGrid).  A large value
    relative to the integration tolerance means the truncation is too small.
    """
    if isinstance(weights, WeightGrid):
        items = [(tuple(int(v) for v in s), float(wt))
                 for s, wt in zip(weights.states, weights.weights)]
    else:
        items = [(tuple(int(v) for v in s), float(wt)) for s, wt in weights.items()]
    member = {s for s, _ in items}
    width = len(next(iter(member))) if member else spec.d
    flux = 0.0
    for s, wt in items:
        if wt == 0.0:
            continue
        x = np.asarray(s, dtype=np.int64)
        for k in range(spec.n_events):
            target = tuple((x + spec.displacements[k][:width]).tolist())
            if target not in member:
                rate = float(np.asarray(spec.rates[k](t, x)))
                if rate > 0.0:
                    flux += wt * rate
    return flux
