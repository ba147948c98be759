"""Genealogies induced by marked population events.

A genealogy is a time-stamped sequence of nodes, each holding a pocket of
exactly two colored balls.  Green balls encode parent-child wiring (the node
holding the green ball named j is the parent of node j; a node holding its
own green ball is a root), black balls stand for extant focal individuals,
blue balls mark sampling events, and red balls close off sampled lineages
whose individual later left the population.

Birth, sample, and death updates follow the swap discipline that keeps the
black balls in bijection with the inventory of extant individuals.  Pruning
every extant individual yields the visible genealogy: the part ancestral to
the samples, whose pockets are green-green (coalescence), green-blue (direct
descent), or red-blue (leaf).

Node and green-ball names are drawn from a counter that never reuses a name,
so pockets stay well-formed under any event order; newborn black balls are
named max-existing-black + 1, which is exactly the inventory's add rule.
"""

from __future__ import annotations

import json
import math
import re
from bisect import insort
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .population import JumpSequence, ModelSpec

GREEN = "green"
BLACK = "black"
BLUE = "blue"
RED = "red"

_COLORS = (GREEN, BLACK, BLUE, RED)


class GenealogyError(RuntimeError):
    """Raised on structurally invalid genealogies or update arguments."""


class NewickError(ValueError):
    """Raised on malformed Newick input, with a character position."""


class Ball(NamedTuple):
    color: str
    name: int


class Node(NamedTuple):
    name: int
    time: float
    pocket: frozenset


@dataclass(frozen=True)
class Genealogy:
    """An immutable node sequence with its observation time."""

    time: float
    nodes: tuple[Node, ...]


@dataclass(frozen=True)
class Inventory:
    """Sorted names of the extant focal individuals."""

    names: tuple[int, ...]

    def __len__(self):
        return len(self.names)

    def add(self) -> "Inventory":
        """New individual named one past the current maximum."""
        if not self.names:
            raise GenealogyError("cannot add to an empty inventory: no name to extend")
        return Inventory(self.names + (self.names[-1] + 1,))

    def drop(self, n: int) -> "Inventory":
        """Remove the n-th smallest name."""
        if not 0 <= n < len(self.names):
            raise GenealogyError(f"inventory drop index {n} out of range")
        return Inventory(self.names[:n] + self.names[n + 1:])


class _State:
    """Mutable genealogy being edited; frozen into a `Genealogy` on demand."""

    __slots__ = ("time", "order", "times", "pockets", "holder", "blacks",
                 "blue_count", "next_name")

    @classmethod
    def new(cls, n0: int) -> "_State":
        st = cls()
        st.time = 0.0
        st.order = list(range(n0))
        st.times = {i: 0.0 for i in range(n0)}
        st.pockets = {i: {Ball(GREEN, i), Ball(BLACK, i)} for i in range(n0)}
        st.holder = {}
        for i in range(n0):
            st.holder[Ball(GREEN, i)] = i
            st.holder[Ball(BLACK, i)] = i
        st.blacks = list(range(n0))
        st.blue_count = 0
        st.next_name = n0
        return st

    @classmethod
    def from_genealogy(cls, g: Genealogy) -> "_State":
        st = cls()
        st.time = g.time
        st.order = [n.name for n in g.nodes]
        st.times = {n.name: n.time for n in g.nodes}
        st.pockets = {n.name: set(n.pocket) for n in g.nodes}
        st.holder = {}
        blacks = []
        blue_names = []
        for n in g.nodes:
            for b in n.pocket:
                if b in st.holder:
                    raise GenealogyError(f"ball {b} held twice")
                st.holder[b] = n.name
                if b.color == BLACK:
                    blacks.append(b.name)
                elif b.color == BLUE:
                    blue_names.append(b.name)
        st.blacks = sorted(blacks)
        st.blue_count = max(blue_names, default=-1) + 1
        st.next_name = max(st.times, default=-1) + 1
        return st

    def freeze(self) -> Genealogy:
        nodes = tuple(Node(name, self.times[name], frozenset(self.pockets[name]))
                      for name in self.order)
        return Genealogy(self.time, nodes)

    # -- update operations ---------------------------------------------

    def _check_time(self, t: float):
        last = self.times[self.order[-1]] if self.order else 0.0
        if t < last or t < self.time:
            raise GenealogyError(f"event time {t} precedes the genealogy front")

    def _selected(self, n: int) -> tuple[Ball, int]:
        if not 0 <= n < len(self.blacks):
            raise GenealogyError(
                f"selection index {n} out of range for {len(self.blacks)} extant individuals")
        ball = Ball(BLACK, self.blacks[n])
        return ball, self.holder[ball]

    def _fresh_node(self, t: float, pocket: set) -> int:
        name = self.next_name
        self.next_name += 1
        self.order.append(name)
        self.times[name] = t
        self.pockets[name] = pocket
        for b in pocket:
            self.holder[b] = name
        return name

    def birth(self, n: int, t: float):
        """Individual n gives birth at t: new node gets the parent's black
        ball plus the newborn's, the parent's node gets the new green."""
        self._check_time(t)
        black, parent = self._selected(n)
        newborn = Ball(BLACK, self.blacks[-1] + 1)
        insort(self.blacks, newborn.name)
        name = self.next_name  # reserved for the node and its green ball
        green = Ball(GREEN, name)
        self.pockets[parent].remove(black)
        self.pockets[parent].add(green)
        self.holder[green] = parent
        self._fresh_node(t, {black, newborn})
        self.time = t

    def sample(self, n: int, t: float):
        """Individual n is sampled at t: like a birth, but the new node keeps
        a blue ball instead of a newborn black."""
        self._check_time(t)
        black, holder = self._selected(n)
        blue = Ball(BLUE, self.blue_count)
        self.blue_count += 1
        name = self.next_name
        green = Ball(GREEN, name)
        self.pockets[holder].remove(black)
        self.pockets[holder].add(green)
        self.holder[green] = holder
        self._fresh_node(t, {black, blue})
        self.time = t

    def death(self, n: int, t: float):
        """Individual n leaves at t.  If its pocket mate is blue the node
        persists with a red ball; otherwise the node is unlinked and its own
        green ball returns home to be destroyed with it."""
        self._check_time(t)
        black, name = self._selected(n)
        del self.blacks[n]
        pocket = self.pockets[name]
        (mate,) = pocket - {black}
        if mate.color == BLUE:
            red = Ball(RED, mate.name)
            pocket.remove(black)
            pocket.add(red)
            del self.holder[black]
            self.holder[red] = name
        else:
            own = Ball(GREEN, name)
            keeper = self.holder[own]
            if keeper != name:
                self.pockets[keeper].remove(own)
                self.pockets[keeper].add(mate)
                self.holder[mate] = keeper
            del self.holder[black]
            del self.holder[own]
            del self.pockets[name]
            del self.times[name]
            self.order.remove(name)
        self.time = t


def new_genealogy(n0: int, time: float = 0.0) -> Genealogy:
    """n0 root nodes at time 0, each holding its own green and black ball."""
    if n0 < 0:
        raise ValueError("n0 must be nonnegative")
    st = _State.new(n0)
    st.time = time
    return st.freeze()


def apply_birth(g: Genealogy, n: int, t: float) -> Genealogy:
    st = _State.from_genealogy(g)
    st.birth(n, t)
    return st.freeze()


def apply_sample(g: Genealogy, n: int, t: float) -> Genealogy:
    st = _State.from_genealogy(g)
    st.sample(n, t)
    return st.freeze()


def apply_death(g: Genealogy, n: int, t: float) -> Genealogy:
    st = _State.from_genealogy(g)
    st.death(n, t)
    return st.freeze()


def build_genealogy(spec: ModelSpec, traj: JumpSequence) -> tuple[Genealogy, Inventory]:
    """Replay a trajectory's marked events into a genealogy.

    Returns the genealogy at the trajectory horizon together with the final
    inventory (which always equals the sorted black-ball names).
    """
    x0 = np.asarray(traj.x0, dtype=np.int64)
    st = _State.new(spec.focal(x0))
    for idx, j in enumerate(traj.jumps):
        ev = spec.events[j.event]
        try:
            if ev.is_birth:
                st.birth(j.aux, j.time)
            elif ev.is_death:
                st.death(j.aux, j.time)
            elif ev.is_sample:
                st.sample(j.aux, j.time)
        except GenealogyError as err:
            raise GenealogyError(f"jump {idx} ({ev.name!r} at t={j.time}): {err}") from None
    st.time = traj.t_end
    return st.freeze(), Inventory(tuple(st.blacks))


def fold_inventory(spec: ModelSpec, traj: JumpSequence) -> Inventory:
    """Fold the inventory recursion over a trajectory, bypassing genealogies."""
    inv = Inventory(tuple(range(spec.focal(np.asarray(traj.x0, dtype=np.int64)))))
    for j in traj.jumps:
        ev = spec.events[j.event]
        if ev.is_birth:
            inv = inv.add()
        elif ev.is_death:
            inv = inv.drop(j.aux)
    return inv


def inventory_of(g: Genealogy) -> Inventory:
    names = sorted(b.name for n in g.nodes for b in n.pocket if b.color == BLACK)
    return Inventory(tuple(names))


def prune(g: Genealogy) -> Genealogy:
    """Drop every extant individual, smallest black name first.

    The result is the visible genealogy: only structure ancestral to sampling
    events survives.  The outcome does not depend on the drop order.
    """
    st = _State.from_genealogy(g)
    while st.blacks:
        st.death(0, st.time)
    return st.freeze()


class EventTimeSets(NamedTuple):
    """Node times classified by pocket contents (sorted multisets).

    ``internal`` nodes hold at least one green ball, ``coalescence`` nodes two,
    ``leaf`` nodes none; ``sample`` nodes hold a blue ball and ``direct`` is
    internal-and-sample.  For a visible genealogy internal = coalescence +
    direct and sample = direct + leaf.
    """

    all_events: tuple[float, ...]
    internal: tuple[float, ...]
    coalescence: tuple[float, ...]
    leaf: tuple[float, ...]
    sample: tuple[float, ...]
    direct: tuple[float, ...]


def event_times(g: Genealogy) -> EventTimeSets:
    all_e, internal, coal, leaf, samp, direct = [], [], [], [], [], []
    for n in g.nodes:
        greens = sum(1 for b in n.pocket if b.color == GREEN)
        has_blue = any(b.color == BLUE for b in n.pocket)
        all_e.append(n.time)
        if greens >= 1:
            internal.append(n.time)
        if greens == 2:
            coal.append(n.time)
        if greens == 0:
            leaf.append(n.time)
        if has_blue:
            samp.append(n.time)
        if greens >= 1 and has_blue:
            direct.append(n.time)
    return EventTimeSets(*(tuple(sorted(v)) for v in (all_e, internal, coal, leaf, samp, direct)))


class LineageFunction:
    """Right-continuous count of visible-genealogy lineages over time.

    Steps up at coalescence times (roots included) and down at leaf times.
    """

    def __init__(self, g: Genealogy):
        ets = event_times(g)
        deltas: dict[float, int] = {}
        for t in ets.coalescence:
            deltas[t] = deltas.get(t, 0) + 1
        for t in ets.leaf:
            deltas[t] = deltas.get(t, 0) - 1
        self.breaks = np.array(sorted(deltas), dtype=float)
        self.values = np.cumsum([deltas[t] for t in sorted(deltas)]).astype(int) \
            if deltas else np.array([], dtype=int)
        if len(self.values) and self.values.min() < 0:
            raise GenealogyError("lineage count went negative: corrupted genealogy")

    def __call__(self, t: float) -> int:
        idx = int(np.searchsorted(self.breaks, t, side="right")) - 1
        return int(self.values[idx]) if idx >= 0 else 0


def lineage_count(g: Genealogy, t: float) -> int:
    return LineageFunction(g)(t)


def _parent_map(g: Genealogy) -> dict[int, int]:
    parent = {}
    names = {n.name for n in g.nodes}
    for n in g.nodes:
        for b in n.pocket:
            if b.color == GREEN:
                if b.name not in names:
                    raise GenealogyError(f"green ball {b.name} names no node")
                parent[b.name] = n.name
    return parent


class LineageRecord(NamedTuple):
    sample_time: float
    attach_time: float
    attach_kind: str  # "root", "coalescence", or "direct"


def embedded_chain(v: Genealogy) -> tuple[LineageRecord, ...]:
    """Per-sample attachment data, in blue-ball (chronological) order.

    Each sampled lineage is walked rootward; its attachment time is where it
    first meets the sub-genealogy spanned by earlier samples, or its own root
    time if it never does.  The attachment kind records the meeting node's
    pocket type.
    """
    if any(b.color == BLACK for n in v.nodes for b in n.pocket):
        raise GenealogyError("attachment times are defined on visible genealogies only")
    nodes = {n.name: n for n in v.nodes}
    parent = _parent_map(v)
    sample_node = {}
    for n in v.nodes:
        for b in n.pocket:
            if b.color == BLUE:
                sample_node[b.name] = n.name
    claimed: set[int] = set()
    out = []
    for q in sorted(sample_node):
        cur = sample_node[q]
        s_q = nodes[cur].time
        path = []
        while True:
            if cur in claimed:
                meet = nodes[cur]
                kind = "direct" if any(b.color == BLUE for b in meet.pocket) else "coalescence"
                a_q = meet.time
                break
            path.append(cur)
            up = parent.get(cur)
            if up is None or up == cur:
                a_q = nodes[cur].time
                kind = "root"
                break
            cur = up
        claimed.update(path)
        out.append(LineageRecord(s_q, a_q, kind))
    return tuple(out)


def attach_times(v: Genealogy) -> tuple[tuple[float, float], ...]:
    """(attachment time, sample time) per lineage, in sample order."""
    return tuple((r.attach_time, r.sample_time) for r in embedded_chain(v))


def validate_genealogy(g: Genealogy) -> list[str]:
    """Check the structural conditions; an empty list means valid.

    Verifies pocket sizes, node times against the genealogy time, ordering of
    the node sequence, ball uniqueness, the parent-ordering rule for green
    balls, and that every node's own green ball exists somewhere.
    """
    problems = []
    pos = {}
    for i, n in enumerate(g.nodes):
        if n.name in pos:
            problems.append(f"node name {n.name} repeats")
        pos[n.name] = i
        if len(n.pocket) != 2:
            problems.append(f"node {n.name}: pocket holds {len(n.pocket)} balls, not 2")
        if n.time > g.time:
            problems.append(f"node {n.name}: time {n.time} exceeds genealogy time {g.time}")
        if i and n.time < g.nodes[i - 1].time:
            problems.append(f"node {n.name}: sequence times decrease at position {i}")
    seen: dict[Ball, int] = {}
    green_holders: dict[int, int] = {}
    for n in g.nodes:
        for b in n.pocket:
            if b.color not in _COLORS:
                problems.append(f"node {n.name}: unknown ball color {b.color!r}")
            if b in seen:
                problems.append(f"ball {b} appears in nodes {seen[b]} and {n.name}")
            seen[b] = n.name
            if b.color == GREEN:
                green_holders[b.name] = n.name
    for name, holder in green_holders.items():
        if name not in pos:
            problems.append(f"green ball {name} names no node")
        elif pos[holder] > pos[name]:
            problems.append(
                f"green ball {name} is held by node {holder}, which comes later in the sequence")
    for n in g.nodes:
        if n.name not in green_holders:
            problems.append(f"node {n.name}: its green ball exists nowhere")
    return problems


# ---------------------------------------------------------------------------
# Newick and JSON forms.

def _children_map(v: Genealogy) -> tuple[dict[int, list[int]], list[int]]:
    children: dict[int, list[int]] = {n.name: [] for n in v.nodes}
    roots = []
    nodes = {n.name: n for n in v.nodes}
    for n in v.nodes:
        own = False
        for b in n.pocket:
            if b.color == GREEN:
                if b.name == n.name:
                    own = True
                else:
                    children[n.name].append(b.name)
        if own:
            roots.append(n.name)
    for kids in children.values():
        kids.sort(key=lambda c: (nodes[c].time, c))
    return children, roots


def _node_label(n: Node) -> str:
    blue = next((b for b in n.pocket if b.color == BLUE), None)
    if blue is None:
        return ""
    if any(b.color == RED for b in n.pocket):
        return f"r{blue.name}"
    return f"b{blue.name}"


def to_newick(v: Genealogy) -> str:
    """Render a visible genealogy as a Newick forest, one tree per root.

    Red leaves are labeled ``r<q>``, blue pass-through nodes ``b<q>`` (q is
    the blue-ball name), coalescences are unlabeled; every branch carries a
    length.  The forest is newline-separated with a semicolon per tree.
    """
    if any(b.color == BLACK for n in v.nodes for b in n.pocket):
        raise GenealogyError("only visible genealogies have a Newick form")
    children, roots = _children_map(v)
    nodes = {n.name: n for n in v.nodes}

    def render(name: int, parent_time: float) -> str:
        n = nodes[name]
        length = f"{n.time - parent_time:.17g}"
        kids = children[name]
        label = _node_label(n)
        if kids:
            inner = ",".join(render(c, n.time) for c in kids)
            return f"({inner}){label}:{length}"
        return f"{label}:{length}"

    trees = []
    for r in sorted(roots, key=lambda name: (nodes[name].time, name)):
        inner = ",".join(render(c, nodes[r].time) for c in children[r])
        trees.append(f"({inner});")
    return "\n".join(trees) + ("\n" if trees else "")


class _NewickParser:
    """Recursive-descent parser for the dialect written by `to_newick`."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg: str):
        raise NewickError(f"position {self.pos}: {msg}")

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_space(self):
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":  # bracket comment
                end = self.text.find("]", self.pos)
                if end < 0:
                    self.error("unterminated comment")
                self.pos = end + 1
            else:
                break

    def parse_forest(self) -> list[dict]:
        trees = []
        self.skip_space()
        while self.pos < len(self.text):
            trees.append(self.parse_subtree())
            self.skip_space()
            if self.peek() != ";":
                self.error("expected ';' after tree")
            self.pos += 1
            self.skip_space()
        return trees

    def parse_subtree(self) -> dict:
        self.skip_space()
        node = {"children": [], "label": "", "length": None}
        if self.peek() == "(":
            self.pos += 1
            node["children"].append(self.parse_subtree())
            self.skip_space()
            while self.peek() == ",":
                self.pos += 1
                node["children"].append(self.parse_subtree())
                self.skip_space()
            if self.peek() != ")":
                self.error("expected ')' or ','")
            self.pos += 1
        node["label"] = self.parse_label()
        self.skip_space()
        if self.peek() == ":":
            self.pos += 1
            self.skip_space()
            node["length"] = self.parse_number()
        return node

    def parse_label(self) -> str:
        m = re.match(r"[A-Za-z0-9_.\-]*", self.text[self.pos:])
        label = m.group(0)
        self.pos += len(label)
        return label

    def parse_number(self) -> float:
        m = re.match(r"[+\-]?(\d+\.?\d*|\.\d+)([eE][+\-]?\d+)?", self.text[self.pos:])
        if not m:
            self.error("expected a branch length")
        self.pos += len(m.group(0))
        return float(m.group(0))


def from_newick(text: str) -> Genealogy:
    """Parse a Newick forest back into a visible genealogy.

    Roots anchor at time 0 and node times accumulate down the branch lengths;
    fresh node names are assigned in time order, so event times, tree shape,
    and sample labels round-trip (names themselves are not preserved).
    """
    trees = _NewickParser(text).parse_forest()
    records = []  # (time, depth, kind, q, children record ids)

    def walk(node: dict, time: float, depth: int) -> int:
        label = node["label"]
        kids = node["children"]
        if label.startswith("r") and label[1:].isdigit():
            kind, q = "leaf", int(label[1:])
            if kids:
                raise NewickError(f"red node r{q} must be a leaf")
        elif label.startswith("b") and label[1:].isdigit():
            kind, q = "direct", int(label[1:])
            if len(kids) != 1:
                raise NewickError(f"blue node b{q} must have exactly one child")
        elif label == "":
            kind, q = "coalescence", None
            if len(kids) != 2:
                raise NewickError("unlabeled internal nodes must have exactly two children")
        else:
            raise NewickError(f"unrecognized label {label!r}")
        rid = len(records)
        records.append([time, depth, kind, q, []])
        for kid in kids:
            if kid["length"] is None:
                raise NewickError("branch lengths are mandatory")
            if kid["length"] < 0:
                raise NewickError(f"negative branch length {kid['length']}")
            records[rid][4].append(walk(kid, time + kid["length"], depth + 1))
        return rid

    root_ids = []
    for tree in trees:
        if tree["label"] != "" or len(tree["children"]) != 1:
            raise NewickError("each tree must be an unlabeled root with one child")
        rid = len(records)
        records.append([0.0, 0, "root", None, []])
        root_ids.append(rid)
        kid = tree["children"][0]
        if kid["length"] is None:
            raise NewickError("branch lengths are mandatory")
        if kid["length"] < 0:
            raise NewickError(f"negative branch length {kid['length']}")
        records[rid][4].append(walk(kid, kid["length"], 1))

    order = sorted(range(len(records)), key=lambda r: (records[r][0], records[r][1]))
    name_of = {rid: i for i, rid in enumerate(order)}
    seen_q = set()
    nodes = []
    for rid in order:
        time, _, kind, q, kids = records[rid]
        name = name_of[rid]
        if kind == "root":
            pocket = {Ball(GREEN, name), Ball(GREEN, name_of[kids[0]])}
        elif kind == "coalescence":
            pocket = {Ball(GREEN, name_of[kids[0]]), Ball(GREEN, name_of[kids[1]])}
        elif kind == "direct":
            pocket = {Ball(GREEN, name_of[kids[0]]), Ball(BLUE, q)}
        else:
            pocket = {Ball(RED, q), Ball(BLUE, q)}
        if q is not None:
            if q in seen_q:
                raise NewickError(f"sample label {q} repeats")
            seen_q.add(q)
        nodes.append(Node(name, time, frozenset(pocket)))
    time = max((n.time for n in nodes), default=0.0)
    return Genealogy(time, tuple(nodes))


def genealogy_to_json(g: Genealogy) -> dict:
    return {
        "time": g.time,
        "nodes": [
            {
                "name": n.name,
                "time": n.time,
                "pocket": [{"color": b.color, "name": b.name}
                           for b in sorted(n.pocket)],
            }
            for n in g.nodes
        ],
    }


def genealogy_from_json(obj: dict) -> Genealogy:
    try:
        nodes = tuple(
            Node(int(n["name"]), float(n["time"]),
                 frozenset(Ball(str(b["color"]), int(b["name"])) for b in n["pocket"]))
            for n in obj["nodes"]
        )
        return Genealogy(float(obj["time"]), nodes)
    except (KeyError, TypeError, ValueError) as err:
        raise GenealogyError(f"malformed genealogy JSON: {err}") from None


def write_genealogy(path, g: Genealogy, provenance=None) -> Path:
    path = Path(path)
    obj = genealogy_to_json(g)
    if provenance:
        obj["provenance"] = dict(provenance)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_genealogy(path) -> Genealogy:
    return genealogy_from_json(json.loads(Path(path).read_text()))
