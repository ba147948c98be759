"""Exact genealogy likelihoods along a fully observed trajectory.

Two routes to the conditional probability of a visible genealogy given the
history of population events, which must agree:

* `loglik_lineages` walks the samples in order and multiplies, for every
  (lineage, history event) pair, the probability that the event's uniform
  member choice did or did not involve that lineage (`q_factor`);
* `loglik_events` makes a single pass over the history, contributing one
  factor per event according to how the visible genealogy classifies its
  time (coalescence, direct descent, leaf, or unobserved birth).

Root nodes at time 0 belong to the initial condition, not to the event
record, and contribute no factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .genealogy import (Genealogy, GenealogyError, LineageFunction, build_genealogy,
                        embedded_chain, event_times, prune)
from .population import History, JumpSequence, ModelSpec, iter_transitions


class ExactError(RuntimeError):
    """Raised when a genealogy and history are structurally inconsistent."""


def _choose2(n: int) -> int:
    return n * (n - 1) // 2


@dataclass(frozen=True)
class QContext:
    """Everything `q_factor` needs about one (lineage, history event) pair.

    ``focal`` is the focal size just after the event; ``lineages`` counts the
    earlier samples' lineages crossing the event time.  The window is
    [attachment, sample) of the current lineage; ``at_prior_attachment``
    flags event times where an earlier lineage already attached.
    """

    kind: str                 # "birth", "sample", or "other"
    focal: int
    lineages: int
    in_window: bool
    at_attachment: bool
    at_prior_attachment: bool
    attach_kind: str = "root"  # of the current lineage: root/coalescence/direct


def q_factor(ctx: QContext) -> tuple[float, bool]:
    """Probability that one history event is consistent with one lineage.

    Returns ``(value, compatible)``; ``compatible`` is False when a counting
    denominator vanishes, meaning no assignment of the event's member choice
    can produce the genealogy (the value is then 0).  Branches are resolved
    in a fixed order, earlier sections winning.
    """
    if not ctx.in_window or ctx.kind == "other" or ctx.at_prior_attachment:
        return 1.0, True
    free = ctx.focal - ctx.lineages
    if ctx.kind == "sample":
        if not ctx.at_attachment:
            if free <= 0:
                return 0.0, False
            return 1.0 - 1.0 / free, True
        if ctx.attach_kind != "direct" or free <= 0:
            return 0.0, False
        return 1.0 / free, True
    # birth
    pairs = _choose2(ctx.focal) - _choose2(ctx.lineages)
    if not ctx.at_attachment:
        if pairs <= 0:
            return 0.0, False
        return 1.0 - ctx.lineages / pairs, True
    if ctx.attach_kind != "coalescence" or pairs <= 0:
        return 0.0, False
    return 1.0 / pairs, True


def loglik_lineages(spec: ModelSpec, traj: JumpSequence) -> float:
    """Log conditional probability of the visible genealogy, lineage by lineage.

    Builds and prunes the genealogy of ``traj``, then accumulates `q_factor`
    over every lineage and every history event inside its window.  A
    trajectory with no samples gives 0 (empty product).
    """
    visible = prune(build_genealogy(spec, traj)[0])
    chain = embedded_chain(visible)
    if not chain:
        return 0.0

    times, kinds, focal = [], [], []
    for t, k, _, post in iter_transitions(spec, traj):
        times.append(t)
        ev = spec.events[k]
        kinds.append("birth" if ev.is_birth else "sample" if ev.is_sample else "other")
        focal.append(spec.focal(post))
    times = np.asarray(times)

    total = 0.0
    for j, rec in enumerate(chain):
        a_j, s_j = rec.attach_time, rec.sample_time
        prior_attachments = {r.attach_time for r in chain[:j]}
        lo = int(np.searchsorted(times, a_j, side="left"))
        hi = int(np.searchsorted(times, s_j, side="left"))
        for k in range(lo, hi):
            t_k = float(times[k])
            crossing = sum(1 for r in chain[:j]
                           if r.attach_time <= t_k < r.sample_time)
            ctx = QContext(
                kind=kinds[k],
                focal=focal[k],
                lineages=crossing,
                in_window=True,
                at_attachment=(t_k == a_j),
                at_prior_attachment=(t_k in prior_attachments),
                attach_kind=rec.attach_kind,
            )
            q, _ = q_factor(ctx)
            if q <= 0.0:
                return -math.inf
            total += math.log(q)
    return total


def _classify_visible(visible: Genealogy) -> dict[float, str]:
    """Map each positive node time of a visible genealogy to its event kind."""
    ets = event_times(visible)
    out: dict[float, str] = {}
    for t, kind in ((t, "coalescence") for t in ets.coalescence if t > 0):
        if t in out:
            raise ExactError(f"two genealogy events share time {t}; cannot match history")
        out[t] = kind
    for tset, kind in ((ets.direct, "direct"), (ets.leaf, "leaf")):
        for t in tset:
            if t <= 0:
                raise ExactError(f"sampling node at time {t} cannot precede the process")
            if t in out:
                raise ExactError(f"two genealogy events share time {t}; cannot match history")
            out[t] = kind
    return out


def loglik_events(spec: ModelSpec, h: History, visible: Genealogy) -> float:
    """Log conditional probability of ``visible`` given the history, one pass.

    Every genealogy event time must appear in the history with a matching
    channel kind (births for coalescences, samples for direct descents and
    leaves); a missing or mismatched time is a structural failure.  Counting
    incompatibilities (too few individuals for the required lineages) give
    -inf.
    """
    if any(b.color == "black" for n in visible.nodes for b in n.pocket):
        raise ExactError("expected a visible genealogy (no extant individuals)")
    vkind = _classify_visible(visible)
    crossing = LineageFunction(visible)
    pending = dict(vkind)
    total = 0.0
    for t, k, _, post in iter_transitions(spec, h):
        ev = spec.events[k]
        size = spec.focal(post)
        kind = pending.pop(t, None)
        if kind == "coalescence":
            if not ev.is_birth:
                raise ExactError(f"coalescence at t={t} matches non-birth event {ev.name!r}")
            pairs = _choose2(size)
            if pairs <= 0:
                return -math.inf
            total -= math.log(pairs)
        elif kind == "direct":
            if not ev.is_sample:
                raise ExactError(f"direct descent at t={t} matches non-sample event {ev.name!r}")
            if size <= 0:
                return -math.inf
            total -= math.log(size)
        elif kind == "leaf":
            if not ev.is_sample:
                raise ExactError(f"leaf at t={t} matches non-sample event {ev.name!r}")
            live = crossing(t)
            if size <= 0 or live >= size:
                return -math.inf
            total += math.log1p(-live / size) if live else 0.0
        elif ev.is_birth:
            live = crossing(t)
            held = _choose2(live)
            if held:
                pairs = _choose2(size)
                if pairs <= held:
                    return -math.inf
                total += math.log1p(-held / pairs)
        elif ev.is_sample:
            raise ExactError(f"history sample at t={t} has no matching genealogy node")
    if pending:
        t = min(pending)
        raise ExactError(f"genealogy event at t={t} is absent from the history")
    return total
