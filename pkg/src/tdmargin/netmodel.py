"""Domain types for coupled transmission/distribution networks.

Conventions used across the package:

* all impedances are per unit; feeder impedances are on the low-voltage side
  and get referred through the substation transformer ratio squared,
* scheduled injections are positive into the bus (generation positive),
* loads are ZIP objects and positive when consuming,
* the substation transformer is a ratio device ``k_eff = k_nominal /
  tap_secondary`` with optional series leakage impedance on the feeder side.

Everything here is immutable value data; solvers never mutate a network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .zipload import ZipLoad

BUS_KINDS = ("slack", "pv", "pq")
DG_MODES = ("upf", "vvc")


class ModelError(ValueError):
    """Raised when constructed network data violates a structural constraint."""


class TopologyError(ModelError):
    """Raised when a feeder graph is not a tree rooted at its head."""


@dataclass(frozen=True)
class TransmissionBus:
    id: str
    kind: str = "pq"
    v_set: float | None = None
    p_inj: float = 0.0
    q_inj: float = 0.0
    native_load: ZipLoad | None = None
    q_min: float | None = None
    q_max: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in BUS_KINDS:
            raise ModelError(f"bus {self.id!r}: unknown kind {self.kind!r}")
        if self.kind in ("slack", "pv"):
            if self.v_set is None:
                raise ModelError(f"bus {self.id!r}: {self.kind} bus needs a voltage setpoint")
            if self.v_set <= 0:
                raise ModelError(f"bus {self.id!r}: voltage setpoint must be positive")


@dataclass(frozen=True)
class TransmissionBranch:
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0

    def __post_init__(self) -> None:
        if self.r == 0.0 and self.x == 0.0:
            raise ModelError(f"branch {self.from_bus}-{self.to_bus}: zero series impedance")
        if self.tap <= 0:
            raise ModelError(f"branch {self.from_bus}-{self.to_bus}: tap must be positive")

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class SubstationTransformer:
    """Substation transformer; the secondary tap is the CVR control handle."""

    k_nominal: float = 1.0
    tap_secondary: float = 1.0
    series_z: complex = 0j

    def __post_init__(self) -> None:
        if self.k_nominal <= 0:
            raise ModelError("transformer turns ratio must be positive")
        if not 0.9 <= self.tap_secondary <= 1.1:
            raise ModelError(f"secondary tap {self.tap_secondary} outside [0.9, 1.1]")

    @property
    def k_eff(self) -> float:
        """Effective ratio; grows when the secondary tap is lowered."""
        return self.k_nominal / self.tap_secondary


@dataclass(frozen=True)
class FeederSegment:
    from_node: str
    to_node: str
    r: float
    x: float

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class DgUnit:
    """Distributed generator (inverter-based), constant active output.

    In ``vvc`` mode the reactive output follows a droop around ``v_set``,
    saturating at ``q_max`` once the node voltage deviates by ``droop_band``.
    In ``upf`` mode the unit never exchanges reactive power.
    """

    p_rated: float
    s_rated: float
    mode: str = "upf"
    v_set: float = 1.05
    q_max: float | None = None
    droop_band: float = 0.04

    def __post_init__(self) -> None:
        if self.mode not in DG_MODES:
            raise ModelError(f"unknown DG mode {self.mode!r}")
        if not 0.0 <= self.p_rated <= self.s_rated:
            raise ModelError(f"DG active rating {self.p_rated} outside [0, {self.s_rated}]")
        q_cap = math.sqrt(max(self.s_rated**2 - self.p_rated**2, 0.0))
        if self.q_max is None:
            object.__setattr__(self, "q_max", min(0.44 * self.s_rated, q_cap))
        elif self.q_max > q_cap + 1e-9:
            raise ModelError(f"DG reactive limit {self.q_max} exceeds headroom {q_cap:.6g}")
        if self.droop_band <= 0:
            raise ModelError("droop band must be positive")


@dataclass(frozen=True)
class FeederModel:
    """Radial feeder fed through a substation transformer at a boundary bus.

    ``replication`` counts identical copies attached at the same bus; the
    co-simulation solves one copy and multiplies the head power.
    """

    head_transformer: SubstationTransformer
    segments: tuple[FeederSegment, ...]
    loads: dict[str, ZipLoad]
    boundary_bus: str
    dg_units: dict[str, DgUnit] = field(default_factory=dict)
    replication: int = 1

    def __post_init__(self) -> None:
        if self.replication < 1:
            raise ModelError(f"replication must be >= 1, got {self.replication}")
        object.__setattr__(self, "segments", tuple(self.segments))


@dataclass(frozen=True)
class TransmissionNetwork:
    buses: tuple[TransmissionBus, ...]
    branches: tuple[TransmissionBranch, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    def bus_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses)

    def bus(self, bus_id: str) -> TransmissionBus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)


@dataclass(frozen=True)
class CoupledSystem:
    """A transmission network plus radial feeders hung off its pq buses."""

    transmission: TransmissionNetwork
    feeders: tuple[FeederModel, ...] = ()
    s_base: float = 100.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "feeders", tuple(self.feeders))
        if self.s_base <= 0:
            raise ModelError("system base must be positive")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def feeder_nodes(feeder: FeederModel) -> set[str]:
    nodes: set[str] = set()
    for seg in feeder.segments:
        nodes.add(seg.from_node)
        nodes.add(seg.to_node)
    nodes.update(feeder.loads)
    nodes.update(feeder.dg_units)
    return nodes or {"head"}


def head_node(feeder: FeederModel) -> str:
    """Root of the feeder tree: the one node that is never a segment's child."""
    if feeder.segments:
        children = {seg.to_node for seg in feeder.segments}
        heads = {seg.from_node for seg in feeder.segments} - children
        if len(heads) != 1:
            raise TopologyError(f"feeder has {len(heads)} head candidates, expected exactly 1")
        return next(iter(heads))
    # segment-free feeder: a single node carrying the loads directly
    named = set(feeder.loads) | set(feeder.dg_units)
    if len(named) > 1:
        raise TopologyError(f"segment-free feeder references several nodes: {sorted(named)}")
    return next(iter(named)) if named else "head"


def feeder_parents(feeder: FeederModel) -> dict[str, FeederSegment]:
    """Map of node id to the unique segment feeding it from its parent."""
    parents: dict[str, FeederSegment] = {}
    for seg in feeder.segments:
        if seg.to_node in parents:
            raise TopologyError(f"feeder node {seg.to_node!r} has more than one parent")
        parents[seg.to_node] = seg
    return parents


def feeder_topology_order(feeder: FeederModel) -> list[str]:
    """Nodes in breadth-first order from the head; parents precede children.

    Siblings are visited in lexicographic id order so the result is
    deterministic. Raises :class:`TopologyError` on cycles or disconnected
    segments.
    """
    head = head_node(feeder)
    parents = feeder_parents(feeder)
    children: dict[str, list[str]] = {}
    for node, seg in parents.items():
        children.setdefault(seg.from_node, []).append(node)
    order = [head]
    frontier = [head]
    while frontier:
        nxt: list[str] = []
        for node in frontier:
            for child in sorted(children.get(node, [])):
                nxt.append(child)
        order.extend(nxt)
        frontier = nxt
    all_nodes = set(parents) | {head}
    if len(order) != len(all_nodes) or set(order) != all_nodes:
        raise TopologyError("feeder segments do not form a tree rooted at the head")
    return order


def validate_network(sys: CoupledSystem) -> ValidationReport:
    """Structural validation; returns a report, never raises.

    Checks slack uniqueness, branch endpoints, feeder radiality and the
    boundary-bus contract (exists and is a pq bus).
    """
    violations: list[str] = []
    net = sys.transmission
    ids = [b.id for b in net.buses]
    seen = set()
    for bus_id in ids:
        if bus_id in seen:
            violations.append(f"duplicate bus id {bus_id!r}")
        seen.add(bus_id)
    slacks = [b.id for b in net.buses if b.kind == "slack"]
    if not slacks:
        violations.append("no slack bus")
    elif len(slacks) > 1:
        violations.append(f"multiple slack buses: {slacks}")
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                violations.append(f"branch {br.from_bus}-{br.to_bus}: unknown bus {end!r}")
    kind_of = {b.id: b.kind for b in net.buses}
    for i, feeder in enumerate(sys.feeders):
        tag = f"feeder[{i}]"
        if feeder.boundary_bus not in kind_of:
            violations.append(f"{tag}: dangling boundary bus {feeder.boundary_bus!r}")
        elif kind_of[feeder.boundary_bus] != "pq":
            violations.append(f"{tag}: boundary bus {feeder.boundary_bus!r} must be a pq bus")
        try:
            order = feeder_topology_order(feeder)
        except TopologyError:
            violations.append(f"{tag}: non-radial feeder")
            continue
        known = set(order)
        for node in feeder.loads:
            if node not in known:
                violations.append(f"{tag}: load at unknown node {node!r}")
        for node in feeder.dg_units:
            if node not in known:
                violations.append(f"{tag}: DG at unknown node {node!r}")
    return ValidationReport(tuple(violations))
