"""Discrete-event simulation of a small SDN: topology, per-flow path rules,
link monitoring, latency injection and packet delivery.

Time is kept as integer nanoseconds internally and reported as float
milliseconds, so event ordering never suffers float drift.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

NS_PER_MS = 1_000_000

# window used for the monitored "transfer rate" attribute
RATE_WINDOW_MS = 100.0


def ms_to_ns(ms: float) -> int:
    return round(ms * NS_PER_MS)


def ns_to_ms(ns: int) -> float:
    return ns / NS_PER_MS


class NetsimError(Exception):
    """Base error for topology and simulator misuse."""


class TopologyError(NetsimError):
    pass


class RoutingError(NetsimError):
    pass


class CapacityError(NetsimError):
    pass


class NodeKind(str, Enum):
    HOST = "host"
    SWITCH = "switch"


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    nic_count: int | None = None  # hosts only


@dataclass(frozen=True)
class Link:
    """Bidirectional physical link with symmetric static attributes."""

    id: str
    endpoints: tuple[str, str]
    capacity_mbps: float
    base_latency_ms: float

    def other_end(self, node: str) -> str:
        a, b = self.endpoints
        if node == a:
            return b
        if node == b:
            return a
        raise RoutingError(f"node {node!r} is not an endpoint of link {self.id!r}")

    def touches(self, node: str) -> bool:
        return node in self.endpoints


@dataclass(frozen=True)
class FlowId:
    src: str
    dst: str
    tag: str = ""


@dataclass(frozen=True)
class FlowRule:
    switch: str
    flow: FlowId
    path_index: int
    out_link: str


@dataclass(frozen=True)
class LatencyInjection:
    """Adds `extra_ms` to a link's delay for traversals inside [start, end)."""

    link: str
    extra_ms: float
    start_ms: float
    end_ms: float


@dataclass(frozen=True)
class Packet:
    flow: FlowId
    seq: int
    size_bytes: int
    sent_at_ms: float
    deadline_ms: float
    path_index: int = 0


@dataclass(frozen=True)
class Hop:
    link: str
    enter_ms: float
    delay_ms: float


@dataclass(frozen=True)
class DeliveryRecord:
    packet: Packet
    delivered: bool
    arrive_at_ms: float | None
    latency_ms: float | None
    violated_deadline: bool
    hops: tuple[Hop, ...]
    drop_reason: str | None = None


@dataclass(frozen=True)
class LinkStats:
    link: str
    endpoints: tuple[str, str]
    capacity_mbps: float
    latency_now_ms: float
    rate_mbps: float
    load_mbps: float


@dataclass(frozen=True)
class LinkView:
    """Immutable per-link snapshot entry; `latency_ms` includes any injection
    active at snapshot time."""

    id: str
    endpoints: tuple[str, str]
    capacity_mbps: float
    latency_ms: float
    load_mbps: float

    @property
    def residual_mbps(self) -> float:
        return self.capacity_mbps - self.load_mbps


@dataclass(frozen=True)
class TopologyView:
    nodes: tuple[Node, ...]
    links: tuple[LinkView, ...]
    taken_at_ms: float

    def node_ids(self) -> set[str]:
        return {n.id for n in self.nodes}

    def adjacency(self) -> dict[str, list[LinkView]]:
        adj: dict[str, list[LinkView]] = {n.id: [] for n in self.nodes}
        for lk in self.links:
            a, b = lk.endpoints
            adj[a].append(lk)
            adj[b].append(lk)
        return adj


class Topology:
    """Validated static graph of hosts, switches and links."""

    def __init__(self, nodes: Iterable[Node], links: Iterable[Link]):
        self.nodes: dict[str, Node] = {}
        self.links: dict[str, Link] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise TopologyError(f"duplicate id {node.id!r}")
            if node.kind is NodeKind.HOST:
                if node.nic_count is None or node.nic_count < 1:
                    raise TopologyError(f"host {node.id!r} needs nic_count >= 1")
            elif node.nic_count is not None:
                raise TopologyError(f"switch {node.id!r} must not carry nic_count")
            self.nodes[node.id] = node
        if not self.nodes:
            raise TopologyError("empty topology")
        for link in links:
            if link.id in self.links or link.id in self.nodes:
                raise TopologyError(f"duplicate id {link.id!r}")
            a, b = link.endpoints
            if a == b:
                raise TopologyError(f"link {link.id!r} endpoints must be distinct")
            for end in (a, b):
                if end not in self.nodes:
                    raise TopologyError(f"unknown endpoint {end!r}")
            if link.capacity_mbps <= 0:
                raise TopologyError(f"non-positive capacity on link {link.id!r}")
            if link.base_latency_ms < 0:
                raise TopologyError(f"negative latency on link {link.id!r}")
            self.links[link.id] = link

    def incident_links(self, node_id: str) -> list[Link]:
        return [lk for lk in self.links.values() if lk.touches(node_id)]


_NODE_FIELDS = {"id", "kind", "nic_count"}
_LINK_FIELDS = {"endpoints", "capacity_mbps", "latency_ms"}


def link_id_for(a: str, b: str) -> str:
    return f"{a}-{b}"


def build_topology(spec: dict) -> Topology:
    """Build a topology from the documented description document.

    The document has two entry lists: ``nodes`` (fields: id, kind and, for
    hosts, nic_count) and ``links`` (fields: endpoints, capacity_mbps,
    latency_ms). Unknown fields are rejected. Link ids are derived from the
    endpoint pair, e.g. ``{"endpoints": ["R4", "B"]}`` becomes link ``R4-B``.
    """
    unknown_top = set(spec) - {"nodes", "links"}
    if unknown_top:
        raise TopologyError(f"unknown fields: {sorted(unknown_top)}")
    nodes = []
    for entry in spec.get("nodes", []):
        unknown = set(entry) - _NODE_FIELDS
        if unknown:
            raise TopologyError(f"unknown node fields: {sorted(unknown)}")
        try:
            kind = NodeKind(entry["kind"])
        except (KeyError, ValueError):
            raise TopologyError(f"node {entry.get('id')!r}: bad kind {entry.get('kind')!r}")
        nodes.append(Node(id=str(entry["id"]), kind=kind, nic_count=entry.get("nic_count")))
    links = []
    for entry in spec.get("links", []):
        unknown = set(entry) - _LINK_FIELDS
        if unknown:
            raise TopologyError(f"unknown link fields: {sorted(unknown)}")
        try:
            a, b = entry["endpoints"]
        except (KeyError, ValueError):
            raise TopologyError(f"link entry needs a two-node endpoints pair: {entry!r}")
        links.append(
            Link(
                id=link_id_for(a, b),
                endpoints=(a, b),
                capacity_mbps=float(entry["capacity_mbps"]),
                base_latency_ms=float(entry["latency_ms"]),
            )
        )
    return Topology(nodes, links)


def load_topology_file(path: str) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        return build_topology(json.load(fh))


class Simulator:
    """Single-timeline simulator over one topology.

    All state changes run through the serialized event loop or through
    direct calls made between events; the simulator is not thread-safe and
    does not need to be.
    """

    def __init__(self, topology: Topology):
        self.topology = topology
        self._now_ns = 0
        self._events: list[tuple[int, int, Callable[[], None]]] = []
        self._event_seq = 0
        # (switch, flow, path_index) -> FlowRule
        self._rules: dict[tuple[str, FlowId, int], FlowRule] = {}
        # first hop out of the source host, per deployed (flow, path_index)
        self._host_egress: dict[tuple[FlowId, int], str] = {}
        self._injections: list[LatencyInjection] = []
        self._reservations: dict[int, tuple[str, float]] = {}
        self._reservation_seq = 0
        # per-link (t_ns, bytes) samples backing the monitored transfer rate
        self._transfers: dict[str, list[tuple[int, int]]] = {}
        self.delivery_log: list[DeliveryRecord] = []

    # -- clock and events ------------------------------------------------

    @property
    def now_ms(self) -> float:
        return ns_to_ms(self._now_ns)

    def schedule_at(self, at_ms: float, action: Callable[[], None]) -> None:
        at_ns = max(ms_to_ns(at_ms), self._now_ns)
        heapq.heappush(self._events, (at_ns, self._event_seq, action))
        self._event_seq += 1

    def schedule_in(self, delta_ms: float, action: Callable[[], None]) -> None:
        self.schedule_at(self.now_ms + delta_ms, action)

    def run_until(self, until_ms: float) -> None:
        """Process events with fire time <= until_ms, then advance the clock."""
        until_ns = ms_to_ns(until_ms)
        while self._events and self._events[0][0] <= until_ns:
            fire_ns, _, action = heapq.heappop(self._events)
            self._now_ns = max(self._now_ns, fire_ns)
            action()
        self._now_ns = max(self._now_ns, until_ns)

    # -- topology access -------------------------------------------------

    def link(self, link_id: str) -> Link:
        try:
            return self.topology.links[link_id]
        except KeyError:
            raise TopologyError(f"unknown link {link_id!r}")

    def node(self, node_id: str) -> Node:
        try:
            return self.topology.nodes[node_id]
        except KeyError:
            raise TopologyError(f"unknown node {node_id!r}")

    def remove_link(self, link_id: str) -> None:
        """Tear a link out of the topology, dropping rules and state on it."""
        self.link(link_id)
        del self.topology.links[link_id]
        self._rules = {k: r for k, r in self._rules.items() if r.out_link != link_id}
        self._host_egress = {k: l for k, l in self._host_egress.items() if l != link_id}
        self._injections = [i for i in self._injections if i.link != link_id]
        self._reservations = {
            h: (lk, mbps) for h, (lk, mbps) in self._reservations.items() if lk != link_id
        }
        self._transfers.pop(link_id, None)

    # -- flow rules -------------------------------------------------------

    def deploy_path(self, flow: FlowId, path: list[str], path_index: int = 0) -> list[FlowRule]:
        """Install one rule per switch along `path`, replacing any rules
        previously deployed for the same (flow, path_index)."""
        if not path:
            raise RoutingError("empty path")
        links = [self.link(lid) for lid in path]
        cursor = flow.src
        self.node(cursor)
        nodes_on_path = [cursor]
        for lk in links:
            if not lk.touches(cursor):
                raise RoutingError(
                    f"non-contiguous path: link {lk.id!r} does not touch {cursor!r}"
                )
            cursor = lk.other_end(cursor)
            nodes_on_path.append(cursor)
        if cursor != flow.dst:
            raise RoutingError(f"path ends at {cursor!r}, not flow destination {flow.dst!r}")
        for hop_node in nodes_on_path[1:-1]:
            if self.node(hop_node).kind is not NodeKind.SWITCH:
                raise RoutingError(f"path traverses host {hop_node!r}")
        rules = []
        for i, hop_node in enumerate(nodes_on_path[1:-1], start=1):
            rules.append(FlowRule(hop_node, flow, path_index, links[i].id))
        # atomic replacement of the old deployment
        self.retract_path(flow, path_index)
        for rule in rules:
            self._rules[(rule.switch, flow, path_index)] = rule
        self._host_egress[(flow, path_index)] = links[0].id
        return rules

    def retract_path(self, flow: FlowId, path_index: int = 0) -> int:
        keys = [k for k in self._rules if k[1] == flow and k[2] == path_index]
        for k in keys:
            del self._rules[k]
        self._host_egress.pop((flow, path_index), None)
        return len(keys)

    def install_rule(self, rule: FlowRule) -> None:
        """Install a single rule, replacing any rule with the same key."""
        link = self.link(rule.out_link)
        switch = self.node(rule.switch)
        if switch.kind is not NodeKind.SWITCH:
            raise RoutingError(f"{rule.switch!r} is not a switch")
        if not link.touches(rule.switch):
            raise RoutingError(
                f"out_link {rule.out_link!r} is not incident to switch {rule.switch!r}"
            )
        self._rules[(rule.switch, rule.flow, rule.path_index)] = rule

    def rules_at(self, switch: str) -> list[FlowRule]:
        self.node(switch)
        rules = [r for (sw, _, _), r in self._rules.items() if sw == switch]
        rules.sort(key=lambda r: (r.flow.src, r.flow.dst, r.flow.tag, r.path_index))
        return rules

    def all_rules(self) -> list[FlowRule]:
        return list(self._rules.values())

    # -- latency injection -------------------------------------------------

    def inject_latency(self, inj: LatencyInjection) -> None:
        self.link(inj.link)
        if inj.extra_ms <= 0:
            raise NetsimError("non-positive injection")
        if inj.start_ms >= inj.end_ms:
            raise NetsimError("inverted window")
        self._injections.append(inj)

    def _extra_latency_ns(self, link_id: str, at_ns: int) -> int:
        extra = 0
        for inj in self._injections:
            if inj.link == link_id and ms_to_ns(inj.start_ms) <= at_ns < ms_to_ns(inj.end_ms):
                extra += ms_to_ns(inj.extra_ms)
        return extra

    def link_delay_ms(self, link_id: str, at_ms: float) -> float:
        """Delay the link contributes to a packet entering it at `at_ms`."""
        link = self.link(link_id)
        return ns_to_ms(ms_to_ns(link.base_latency_ms) + self._extra_latency_ns(link_id, ms_to_ns(at_ms)))

    # -- capacity reservations ---------------------------------------------

    def reserve_capacity(self, link_id: str, mbps: float) -> int:
        link = self.link(link_id)
        if mbps <= 0:
            raise CapacityError("reservation must be positive")
        if self.link_load_mbps(link_id) + mbps > link.capacity_mbps + 1e-12:
            raise CapacityError(f"capacity exceeded on link {link_id!r}")
        self._reservation_seq += 1
        handle = self._reservation_seq
        self._reservations[handle] = (link_id, mbps)
        return handle

    def release_capacity(self, handle: int) -> None:
        self._reservations.pop(handle, None)

    def link_load_mbps(self, link_id: str) -> float:
        return sum(mbps for lk, mbps in self._reservations.values() if lk == link_id)

    # -- packet delivery -----------------------------------------------------

    def send_packet(self, packet: Packet) -> DeliveryRecord:
        """Walk the packet along its deployed path, sampling each link's
        delay at the traversal instant. No retransmission ever happens;
        packets that hit a switch without a matching rule are dropped."""
        flow = packet.flow
        self.node(flow.src)
        self.node(flow.dst)
        t_ns = ms_to_ns(packet.sent_at_ms)
        cursor = flow.src
        hops: list[Hop] = []
        record: DeliveryRecord
        max_hops = len(self.topology.links) + 1
        while cursor != flow.dst:
            if cursor == flow.src:
                out = self._host_egress.get((flow, packet.path_index))
            else:
                rule = self._rules.get((cursor, flow, packet.path_index))
                out = rule.out_link if rule else None
            if out is None:
                record = DeliveryRecord(
                    packet, False, None, None, False, tuple(hops),
                    drop_reason=f"no rule at {cursor}",
                )
                self.delivery_log.append(record)
                return record
            if len(hops) >= max_hops:
                record = DeliveryRecord(
                    packet, False, None, None, False, tuple(hops), drop_reason="routing loop",
                )
                self.delivery_log.append(record)
                return record
            link = self.link(out)
            delay_ns = ms_to_ns(link.base_latency_ms) + self._extra_latency_ns(out, t_ns)
            hops.append(Hop(out, ns_to_ms(t_ns), ns_to_ms(delay_ns)))
            self._transfers.setdefault(out, []).append((t_ns, packet.size_bytes))
            t_ns += delay_ns
            cursor = link.other_end(cursor)
        latency_ns = t_ns - ms_to_ns(packet.sent_at_ms)
        latency_ms = ns_to_ms(latency_ns)
        record = DeliveryRecord(
            packet,
            True,
            ns_to_ms(t_ns),
            latency_ms,
            latency_ns > ms_to_ns(packet.deadline_ms),
            tuple(hops),
        )
        self.delivery_log.append(record)
        return record

    # -- monitoring ------------------------------------------------------------

    def link_rate_mbps(self, link_id: str) -> float:
        samples = self._transfers.get(link_id, ())
        window_ns = ms_to_ns(RATE_WINDOW_MS)
        cutoff = self._now_ns - window_ns
        total_bytes = sum(b for t, b in samples if t > cutoff)
        return total_bytes * 8 / (RATE_WINDOW_MS / 1000.0) / 1e6

    def link_stats(self, link_id: str) -> LinkStats:
        link = self.link(link_id)
        return LinkStats(
            link=link.id,
            endpoints=link.endpoints,
            capacity_mbps=link.capacity_mbps,
            latency_now_ms=self.link_delay_ms(link_id, self.now_ms),
            rate_mbps=self.link_rate_mbps(link_id),
            load_mbps=self.link_load_mbps(link_id),
        )

    def topology_snapshot(self) -> TopologyView:
        """Consistent immutable snapshot at the current simulated instant."""
        now = self.now_ms
        return TopologyView(
            nodes=tuple(self.topology.nodes.values()),
            links=tuple(
                LinkView(
                    id=lk.id,
                    endpoints=lk.endpoints,
                    capacity_mbps=lk.capacity_mbps,
                    latency_ms=self.link_delay_ms(lk.id, now),
                    load_mbps=self.link_load_mbps(lk.id),
                )
                for lk in self.topology.links.values()
            ),
            taken_at_ms=now,
        )
