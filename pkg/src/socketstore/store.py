"""The Store service: agent type library, module repository with lifecycle,
access control, NSD execution (agent instance management), testbed
evaluation, search and ranking, cost accounting, and the append-only action
log.

All repository, license and log mutations run through a single writer (this
object); reads may happen at any point between mutations.
"""

from __future__ import annotations

import json
import os
import secrets
import statistics
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .agents import AgentError, AgentKind, AgentRuntime, AgentSpec, AgentTypeLibrary
from .fixtures import (
    BUILTIN_METRICS,
    EVALUATION_TOPOLOGY,
    default_library,
)
from .kmflash import (
    KMAgent,
    KMAllocationError,
    collect_stats,
    default_shortest_path,
    mirror_send,
)
from .moduledef import (
    IllegalTransition,
    MetricDef,
    MetricDirection,
    ModuleManifest,
    ModuleState,
    check_transition,
    manifest_from_doc,
    manifest_to_doc,
    validate_manifest,
)
from .netsim import FlowId, LatencyInjection, Packet, Simulator, build_topology

BASELINE_MODULE_ID = "baseline"
PRODUCTION_ENV = "production"


class StoreError(Exception):
    pass


class AuthorizationDenied(StoreError):
    pass


class InstantiationError(StoreError):
    def __init__(self, reason: str, max_feasible_k: int | None = None):
        super().__init__(reason)
        self.reason = reason
        self.max_feasible_k = max_feasible_k


# -- cost accounting -----------------------------------------------------------

# default rate card: reserved link bandwidth and installed switch rules
RATE_CARD = {
    "link_capacity": 0.001,  # per Mbps-second reserved
    "switch_rule": 0.0001,  # per rule-second installed
}

USAGE_UNITS = {
    "link_capacity": "Mbps-s",
    "switch_rule": "rule-s",
}


@dataclass
class UsageEntry:
    kind: str
    resource_id: str
    rate_per_s: float  # Mbps for link capacity, rule count for switch rules
    opened_at_ms: float
    closed_at_ms: float | None = None

    def quantity(self, now_ms: float) -> float:
        end = self.closed_at_ms if self.closed_at_ms is not None else now_ms
        return self.rate_per_s * max(end - self.opened_at_ms, 0.0) / 1000.0


class UsageLedger:
    """Provider-side usage registrations for one module instance."""

    def __init__(self) -> None:
        self.entries: list[UsageEntry] = []

    def open(self, kind: str, resource_id: str, rate_per_s: float, at_ms: float) -> UsageEntry:
        if kind not in RATE_CARD:
            raise StoreError(f"unknown resource kind {kind!r}")
        entry = UsageEntry(kind, resource_id, rate_per_s, at_ms)
        self.entries.append(entry)
        return entry

    def close_all(self, at_ms: float) -> None:
        for entry in self.entries:
            if entry.closed_at_ms is None:
                entry.closed_at_ms = at_ms


@dataclass(frozen=True)
class CostRow:
    resource_id: str
    kind: str
    quantity: float
    unit: str
    unit_price: float

    @property
    def subtotal(self) -> float:
        return self.quantity * self.unit_price


@dataclass(frozen=True)
class CostReport:
    instance_id: str
    rows: tuple[CostRow, ...]
    raw_total: float
    weighted_total: float


def _identity_weight(rows: Iterable[CostRow]) -> float:
    return sum(r.subtotal for r in rows)


WEIGHT_FUNCTIONS: dict[str, Callable[[Iterable[CostRow]], float]] = {
    "identity": _identity_weight,
}


# -- records ------------------------------------------------------------------


@dataclass(frozen=True)
class License:
    app_id: str
    module_id: str
    issued_at_ms: float
    token: str


@dataclass(frozen=True)
class MetricSample:
    module_id: str
    metric_id: str
    value: float | None
    ts_ms: float
    source: str  # "testbed" or "production"


@dataclass(frozen=True)
class ActionLogEntry:
    ts_ms: float
    actor: str
    action: str
    outcome: str
    detail: dict


@dataclass
class ModuleInstance:
    instance_id: str
    module_id: str
    inputs: dict
    agent_ids: tuple[str, ...]
    adapter_ids: tuple[str, ...]
    started_at_ms: float
    ledger: UsageLedger
    allocation: dict
    torn_down_at_ms: float | None = None


@dataclass(frozen=True)
class SearchResult:
    module_id: str
    name: str
    version: int
    price: float
    metric_id: str
    aggregate: float | None


@dataclass(frozen=True)
class TestbedScenario:
    """A registered testbed setup: topology, traffic shape and injections."""

    name: str
    topology_doc: dict
    packet_count: int
    gap_ms: float
    deadline_ms: float
    injections: tuple[LatencyInjection, ...]
    inputs: dict  # NSD input bindings, e.g. endpoints, K, rate, max_latency
    size_bytes: int = 512


def latency_spike_scenario() -> TestbedScenario:
    """The shipped evaluation scenario: 100 packets at 1 ms spacing with a
    +10 ms spike on link R4-B over [40, 60) ms and a 5 ms deadline."""
    return TestbedScenario(
        name="latency-spike",
        topology_doc=EVALUATION_TOPOLOGY,
        packet_count=100,
        gap_ms=1.0,
        deadline_ms=5.0,
        injections=(LatencyInjection("R4-B", 10.0, 40.0, 60.0),),
        inputs={
            "endpointA": {"address": "A", "port": 5000, "nic": 0},
            "endpointB": {"address": "B", "port": 5000, "nic": 0},
            "K": 2,
            "rate": 10.0,
            "max_latency": 5.0,
        },
    )


# metric collectors the testbeds know how to measure
def _mean_latency(records) -> float | None:
    per_seq: dict[int, float] = {}
    for rec in records:
        if rec.delivered:
            seq = rec.packet.seq
            if seq not in per_seq or rec.latency_ms < per_seq[seq]:
                per_seq[seq] = rec.latency_ms
    return statistics.fmean(per_seq.values()) if per_seq else None


METRIC_COLLECTORS = {
    "in_deadline_ratio": lambda records, stats: stats.in_deadline_ratio,
    "loss_ratio": lambda records, stats: (stats.losses / stats.sent) if stats.sent else 0.0,
    "mean_latency_ms": lambda records, stats: _mean_latency(records),
}


@dataclass
class _ModuleRecord:
    manifest: ModuleManifest


class SocketStore:
    """One store deployment. Attach a simulator to enable instantiation;
    repository, licensing, search and logging work without one."""

    def __init__(
        self,
        sim: Simulator | None = None,
        library: AgentTypeLibrary | None = None,
        data_path: str | None = None,
        token_factory: Callable[[], str] | None = None,
        weight_function: str = "identity",
    ):
        self.library = library or default_library()
        self.sim = sim
        self.runtime: AgentRuntime | None = None
        if sim is not None:
            self.attach_network(sim)
        self.data_path = data_path
        self._token_factory = token_factory or (lambda: secrets.token_hex(16))
        if weight_function not in WEIGHT_FUNCTIONS:
            raise StoreError(f"unknown weight function {weight_function!r}")
        self.weight_function = weight_function

        self.specialists: set[str] = set()
        self.metrics: dict[str, MetricDef] = {m.metric_id: m for m in BUILTIN_METRICS}
        self.modules: dict[str, _ModuleRecord] = {}
        self.licenses: dict[tuple[str, str], License] = {}
        self._tokens: dict[str, License] = {}
        self._revoked_tokens: set[str] = set()
        self.samples: list[MetricSample] = []
        self.log: list[ActionLogEntry] = []
        self.instances: dict[str, ModuleInstance] = {}
        self.aliases: dict[str, dict] = {}
        self.testbeds: dict[str, TestbedScenario] = {}
        self.register_testbed(latency_spike_scenario())
        self._instance_seq = 0
        self._logical_ms = 0.0

        if data_path and os.path.exists(data_path):
            self._load(data_path)

    # -- time and logging ------------------------------------------------------

    def now_ms(self) -> float:
        if self.sim is not None:
            return self.sim.now_ms
        return self._logical_ms

    def _tick(self) -> float:
        # without a simulator the log still needs non-decreasing timestamps
        if self.sim is None:
            self._logical_ms += 1.0
        return self.now_ms()

    def log_action(self, actor: str, action: str, outcome: str, **detail) -> None:
        self.log.append(ActionLogEntry(self._tick(), actor, action, outcome, detail))
        self._persist()

    def read_log(
        self,
        actor: str | None = None,
        action: str | None = None,
        since_ms: float | None = None,
        until_ms: float | None = None,
    ) -> list[ActionLogEntry]:
        out = []
        for e in self.log:
            if actor is not None and e.actor != actor:
                continue
            if action is not None and e.action != action:
                continue
            if since_ms is not None and e.ts_ms < since_ms:
                continue
            if until_ms is not None and e.ts_ms > until_ms:
                continue
            out.append(e)
        return out

    def _runtime_log(self, actor, action, outcome, **detail):
        self.log.append(ActionLogEntry(self._tick(), actor, action, outcome, detail))

    # -- network attachment -------------------------------------------------------

    def attach_network(self, sim: Simulator) -> None:
        self.sim = sim
        self.runtime = AgentRuntime(sim, self.library, action_log=self._runtime_log)
        self.runtime.create_environment(PRODUCTION_ENV, "production network")

    # -- registries ---------------------------------------------------------------

    def register_specialist(self, specialist_id: str) -> None:
        if not specialist_id:
            raise StoreError("empty specialist id")
        self.specialists.add(specialist_id)
        self.log_action(specialist_id, "register_specialist", "ok")

    def register_metric(self, metric: MetricDef) -> None:
        self.metrics[metric.metric_id] = metric
        self._persist()

    def register_testbed(self, scenario: TestbedScenario) -> None:
        self.testbeds[scenario.name] = scenario

    # -- module lifecycle -----------------------------------------------------------

    def module(self, module_id: str) -> ModuleManifest:
        try:
            return self.modules[module_id].manifest
        except KeyError:
            raise StoreError(f"unknown module {module_id!r}")

    def submit_module(self, manifest: ModuleManifest) -> str:
        violations = validate_manifest(manifest, self.metrics, self.library)
        if violations:
            self.log_action(manifest.author, "submit_module", "error",
                            module_id=manifest.module_id, violations=violations)
            raise StoreError("; ".join(violations))
        if manifest.author not in self.specialists:
            raise StoreError(
                f"anonymous author: {manifest.author!r} is not a registered Specialist"
            )
        if manifest.module_id in self.modules:
            raise StoreError(f"duplicate module {manifest.module_id!r}")
        for rec in self.modules.values():
            if rec.manifest.name == manifest.name and rec.manifest.version == manifest.version:
                raise StoreError(
                    f"duplicate version: {manifest.name} v{manifest.version} already submitted"
                )
        self.modules[manifest.module_id] = _ModuleRecord(
            manifest.with_state(ModuleState.SUBMITTED)
        )
        self.log_action(manifest.author, "submit_module", "ok", module_id=manifest.module_id)
        return manifest.module_id

    def _transition(self, module_id: str, new_state: ModuleState) -> ModuleState:
        rec = self.modules.get(module_id)
        if rec is None:
            raise StoreError(f"unknown module {module_id!r}")
        check_transition(rec.manifest.state, new_state)
        rec.manifest = rec.manifest.with_state(new_state)
        return new_state

    def start_review(self, module_id: str, reviewer: str) -> ModuleState:
        manifest = self.module(module_id)
        if reviewer == manifest.author:
            raise StoreError("self-review")
        state = self._transition(module_id, ModuleState.IN_REVIEW)
        self.log_action(reviewer, "start_review", "ok", module_id=module_id)
        return state

    def review_decision(self, module_id: str, decision: str, reviewer: str) -> ModuleState:
        manifest = self.module(module_id)
        if decision not in ("accept", "revise"):
            raise StoreError(f"unknown decision {decision!r}")
        if reviewer == manifest.author:
            raise StoreError("self-review")
        target = ModuleState.PUBLISHED if decision == "accept" else ModuleState.REVISION_REQUESTED
        state = self._transition(module_id, target)
        self.log_action(reviewer, "review_decision", "ok",
                        module_id=module_id, decision=decision, new_state=state.value)
        return state

    def resubmit_revision(self, module_id: str, revised: ModuleManifest) -> ModuleState:
        current = self.module(module_id)
        if current.state is not ModuleState.REVISION_REQUESTED:
            raise IllegalTransition(
                f"illegal transition {current.state.value} -> in_review"
            )
        if revised.version != current.version + 1:
            raise StoreError(
                f"revision must increment version to {current.version + 1}"
            )
        if revised.module_id != module_id or revised.author != current.author:
            raise StoreError("revision must keep module_id and author")
        violations = validate_manifest(revised, self.metrics, self.library)
        if violations:
            raise StoreError("; ".join(violations))
        self.modules[module_id].manifest = revised.with_state(ModuleState.IN_REVIEW)
        self.log_action(current.author, "resubmit_revision", "ok",
                        module_id=module_id, version=revised.version)
        return ModuleState.IN_REVIEW

    def retire_module(self, module_id: str) -> ModuleState:
        state = self._transition(module_id, ModuleState.RETIRED)
        self.log_action("store", "retire_module", "ok", module_id=module_id)
        return state

    # -- search and ranking ------------------------------------------------------------

    def metric_aggregate(self, module_id: str, metric_id: str, window: int = 10) -> float | None:
        """Arithmetic mean of the most recent testbed samples (default window
        of 10); None when no measured sample exists."""
        values = [
            s.value
            for s in self.samples
            if s.module_id == module_id and s.metric_id == metric_id
            and s.source == "testbed" and s.value is not None
        ]
        if not values:
            return None
        return statistics.fmean(values[-window:])

    def search_modules(self, query: str = "") -> list[SearchResult]:
        needle = query.lower()
        results = []
        for rec in self.modules.values():
            m = rec.manifest
            if m.state is not ModuleState.PUBLISHED:
                continue
            if needle and needle not in (m.name + " " + m.description).lower():
                continue
            metric_id = m.metric_ids[0]
            aggregate = self.metric_aggregate(m.module_id, metric_id)
            results.append(SearchResult(m.module_id, m.name, m.version, m.price,
                                        metric_id, aggregate))

        def key(r: SearchResult):
            if r.aggregate is None:
                return (1, 0.0, r.name)
            metric = self.metrics.get(r.metric_id)
            oriented = r.aggregate
            if metric is not None and metric.direction is MetricDirection.LOWER_BETTER:
                oriented = -oriented
            return (0, -oriented, r.name)

        return sorted(results, key=key)

    # -- licensing and access control ------------------------------------------------------

    def purchase(self, app_id: str, module_id: str) -> License:
        manifest = self.module(module_id)
        if manifest.state is not ModuleState.PUBLISHED:
            self.log_action(app_id, "purchase", "error", module_id=module_id,
                            reason="not published")
            raise StoreError(f"not published: {module_id!r} is {manifest.state.value}")
        existing = self.licenses.get((app_id, module_id))
        if existing is not None and existing.token not in self._revoked_tokens:
            return existing
        token = self._token_factory()
        while token in self._tokens or token in self._revoked_tokens:
            token = self._token_factory()
        license = License(app_id, module_id, self.now_ms(), token)
        self.licenses[(app_id, module_id)] = license
        self._tokens[token] = license
        self.log_action(app_id, "purchase", "ok", module_id=module_id)
        return license

    def revoke_license(self, app_id: str, module_id: str) -> None:
        license = self.licenses.pop((app_id, module_id), None)
        if license is None:
            raise StoreError("no such license")
        self._tokens.pop(license.token, None)
        self._revoked_tokens.add(license.token)
        self.log_action(app_id, "revoke_license", "ok", module_id=module_id)

    def authorize(self, token: str, module_id: str) -> bool:
        """Allow iff an unrevoked license binds this token to this module.
        Every decision is action-logged."""
        license = self._tokens.get(token)
        allow = (
            license is not None
            and token not in self._revoked_tokens
            and license.module_id == module_id
        )
        self.log_action(
            license.app_id if license else "unknown",
            "authorize",
            "allow" if allow else "deny",
            token=token,
            module_id=module_id,
        )
        return allow

    # -- alias registry (device connectivity) ------------------------------------------

    def bind_alias(self, alias: str, connectivity: list[dict], owner: str) -> None:
        if not alias:
            raise StoreError("empty alias")
        if not connectivity:
            existing = self.aliases.get(alias)
            if existing is not None and existing["owner"] == owner:
                del self.aliases[alias]
                self.log_action(owner, "unbind_alias", "ok", alias=alias)
            return
        existing = self.aliases.get(alias)
        if existing is not None and existing["owner"] != owner:
            self.log_action(owner, "bind_alias", "error", alias=alias, reason="alias conflict")
            raise StoreError(f"alias conflict: {alias!r} is bound by another live device")
        self.aliases[alias] = {
            "owner": owner,
            "connectivity": connectivity,
            "bound_at_ms": self.now_ms(),
        }
        self.log_action(owner, "bind_alias", "ok", alias=alias,
                        endpoints=len(connectivity))

    def resolve_alias(self, alias: str) -> list[dict] | None:
        entry = self.aliases.get(alias)
        return entry["connectivity"] if entry else None

    # -- NSD execution ------------------------------------------------------------------

    def instantiate(self, token: str, module_id: str, inputs: dict) -> ModuleInstance:
        """Authorize, then execute the module's NSD in the production
        environment. Partial spawns are rolled back on failure."""
        if self.runtime is None:
            raise StoreError("no network attached")
        if not self.authorize(token, module_id):
            raise AuthorizationDenied("authorization denied")
        manifest = self.module(module_id)
        self._instance_seq += 1
        instance_id = f"inst-{self._instance_seq:04d}"
        ledger = UsageLedger()
        try:
            agent_ids, adapter_ids, allocation = self._execute_nsd(
                manifest, inputs, self.runtime, PRODUCTION_ENV, ledger, instance_id
            )
        except (StoreError, KMAllocationError, AgentError) as exc:
            failure_k = getattr(getattr(exc, "failure", None), "max_feasible_k", None)
            self.log_action("store", "instantiate", "error",
                            module_id=module_id, reason=str(exc))
            raise InstantiationError(str(exc), failure_k) from exc
        instance = ModuleInstance(
            instance_id=instance_id,
            module_id=module_id,
            inputs=dict(inputs),
            agent_ids=agent_ids,
            adapter_ids=adapter_ids,
            started_at_ms=self.now_ms(),
            ledger=ledger,
            allocation=allocation,
        )
        self.instances[instance_id] = instance
        self.log_action("store", "instantiate", "ok",
                        module_id=module_id, instance_id=instance_id)
        return instance

    def _execute_nsd(self, manifest, inputs, runtime, env_id, ledger, flow_tag):
        nsd = manifest.nsd
        missing = [i.name for i in nsd.inputs if i.name not in inputs]
        if missing:
            raise StoreError(f"missing input {missing[0]!r}")
        order = _topological_order(nsd)
        before = set(runtime.agents)
        spawned: list[str] = []
        allocation: dict = {}
        try:
            for directive in order:
                params = {
                    name: _resolve_param(value, inputs)
                    for name, value in directive.params
                }
                agent_id = runtime.spawn_agent(
                    env_id, AgentSpec(directive.type_name, params)
                )
                spawned.append(agent_id)
                agent = runtime.agent(agent_id)
                if isinstance(agent, KMAgent):
                    allocation = agent.setup(runtime, env_id, flow_tag, ledger)
        except Exception:
            self._rollback(runtime, before)
            raise
        all_ids = [aid for aid in runtime.agents if aid not in before]
        adapter_ids = tuple(
            aid for aid in all_ids
            if runtime.agent(aid).typedef.kind is AgentKind.ADAPTER
        )
        return tuple(all_ids), adapter_ids, allocation

    def _rollback(self, runtime, before: set[str]) -> None:
        new_ids = [aid for aid in runtime.agents if aid not in before]
        adapters = [a for a in new_ids if runtime.agent(a).typedef.kind is AgentKind.ADAPTER]
        others = [a for a in new_ids if a not in adapters]
        for aid in adapters + others:
            runtime.destroy_agent(aid)

    def teardown_instance(self, instance_id: str) -> None:
        """Destroy the instance's agents, adapters strictly before the
        resource agents they compose; idempotent."""
        instance = self.instances.get(instance_id)
        if instance is None:
            raise StoreError(f"unknown instance {instance_id!r}")
        if instance.torn_down_at_ms is not None:
            return
        if self.runtime is not None:
            for aid in instance.adapter_ids:
                self.runtime.destroy_agent(aid)
            for aid in instance.agent_ids:
                if aid not in instance.adapter_ids:
                    self.runtime.destroy_agent(aid)
        instance.ledger.close_all(self.now_ms())
        instance.torn_down_at_ms = self.now_ms()
        self.log_action("store", "teardown", "ok", instance_id=instance_id)

    # -- cost ---------------------------------------------------------------------------

    def cost(self, instance_id: str) -> CostReport:
        instance = self.instances.get(instance_id)
        if instance is None:
            raise StoreError(f"unknown instance {instance_id!r}")
        now = self.now_ms()
        rows = tuple(
            CostRow(
                resource_id=e.resource_id,
                kind=e.kind,
                quantity=e.quantity(now),
                unit=USAGE_UNITS[e.kind],
                unit_price=RATE_CARD[e.kind],
            )
            for e in instance.ledger.entries
        )
        raw_total = sum(r.subtotal for r in rows)
        weighted = WEIGHT_FUNCTIONS[self.weight_function](rows)
        return CostReport(instance_id, rows, raw_total, weighted)

    # -- testbed evaluation -------------------------------------------------------------

    def run_testbed_evaluation(self, module_id: str, scenario_name: str) -> list[MetricSample]:
        scenario = self.testbeds.get(scenario_name)
        if scenario is None:
            raise StoreError(f"unknown testbed scenario {scenario_name!r}")
        if module_id == BASELINE_MODULE_ID:
            metric_ids: tuple[str, ...] = ("in_deadline_ratio",)
            manifest = None
        else:
            manifest = self.module(module_id)
            if manifest.state not in (ModuleState.IN_REVIEW, ModuleState.PUBLISHED):
                raise StoreError(
                    f"module must be in review or published, is {manifest.state.value}"
                )
            metric_ids = manifest.metric_ids

        sim = Simulator(build_topology(scenario.topology_doc))
        for inj in scenario.injections:
            sim.inject_latency(inj)
        records = []
        failure: str | None = None
        if manifest is None:
            flow = FlowId(
                str(scenario.inputs["endpointA"]["address"]),
                str(scenario.inputs["endpointB"]["address"]),
                "baseline",
            )
            path = default_shortest_path(sim.topology_snapshot(), flow.src, flow.dst)
            sim.deploy_path(flow, path)
            for seq in range(scenario.packet_count):
                sim.run_until(seq * scenario.gap_ms)
                records.append(
                    sim.send_packet(
                        Packet(flow, seq, scenario.size_bytes, sim.now_ms,
                               scenario.deadline_ms)
                    )
                )
        else:
            runtime = AgentRuntime(sim, self.library, action_log=self._runtime_log)
            env = f"testbed-{scenario.name}"
            runtime.create_environment(env, f"testbed {scenario.name}")
            ledger = UsageLedger()
            try:
                agent_ids, adapter_ids, _ = self._execute_nsd(
                    manifest, scenario.inputs, runtime, env, ledger, "testbed"
                )
            except (StoreError, KMAllocationError, AgentError) as exc:
                failure = str(exc)
                agent_ids, adapter_ids = (), ()
            if failure is None:
                km_agents = [
                    runtime.agent(aid)
                    for aid in agent_ids
                    if isinstance(runtime.agent(aid), KMAgent)
                ]
                for seq in range(scenario.packet_count):
                    sim.run_until(seq * scenario.gap_ms)
                    for km in km_agents:
                        records.extend(
                            mirror_send(sim, km.handles, seq, scenario.size_bytes,
                                        scenario.deadline_ms)
                        )
                for aid in adapter_ids:
                    runtime.destroy_agent(aid)
                for aid in agent_ids:
                    if aid not in adapter_ids:
                        runtime.destroy_agent(aid)

        stats = collect_stats(records, scenario.deadline_ms)
        samples = []
        ts = self.now_ms()
        for metric_id in metric_ids:
            collector = METRIC_COLLECTORS.get(metric_id)
            if failure is not None or collector is None:
                value = None
            else:
                value = collector(records, stats)
            samples.append(MetricSample(module_id, metric_id, value, ts, "testbed"))
        self.samples.extend(samples)
        self.log_action("store", "testbed_evaluation",
                        "ok" if failure is None else "error",
                        module_id=module_id, scenario=scenario_name,
                        **({"reason": failure} if failure else {}))
        return samples

    # -- persistence -------------------------------------------------------------------

    def _persist(self) -> None:
        if not self.data_path:
            return
        state = {
            "specialists": sorted(self.specialists),
            "metrics": [
                {"metric_id": m.metric_id, "name": m.name, "unit": m.unit,
                 "direction": m.direction.value}
                for m in self.metrics.values()
            ],
            "modules": [manifest_to_doc(rec.manifest) for rec in self.modules.values()],
            "licenses": [
                {"app_id": l.app_id, "module_id": l.module_id,
                 "issued_at_ms": l.issued_at_ms, "token": l.token}
                for l in self.licenses.values()
            ],
            "revoked_tokens": sorted(self._revoked_tokens),
            "samples": [
                {"module_id": s.module_id, "metric_id": s.metric_id, "value": s.value,
                 "ts_ms": s.ts_ms, "source": s.source}
                for s in self.samples
            ],
            "log": [
                {"ts_ms": e.ts_ms, "actor": e.actor, "action": e.action,
                 "outcome": e.outcome, "detail": e.detail}
                for e in self.log
            ],
            "logical_ms": self._logical_ms,
        }
        os.makedirs(os.path.dirname(self.data_path) or ".", exist_ok=True)
        with open(self.data_path, "w", encoding="utf-8") as fh:
            json.dump(state, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _load(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        self.specialists = set(state.get("specialists", []))
        for m in state.get("metrics", []):
            self.metrics[m["metric_id"]] = MetricDef(
                m["metric_id"], m["name"], m["unit"], MetricDirection(m["direction"])
            )
        for doc in state.get("modules", []):
            manifest = manifest_from_doc(doc, self.library)
            self.modules[manifest.module_id] = _ModuleRecord(manifest)
        for l in state.get("licenses", []):
            license = License(l["app_id"], l["module_id"], l["issued_at_ms"], l["token"])
            self.licenses[(license.app_id, license.module_id)] = license
            self._tokens[license.token] = license
        self._revoked_tokens = set(state.get("revoked_tokens", []))
        self.samples = [
            MetricSample(s["module_id"], s["metric_id"], s["value"], s["ts_ms"], s["source"])
            for s in state.get("samples", [])
        ]
        self.log = [
            ActionLogEntry(e["ts_ms"], e["actor"], e["action"], e["outcome"], e["detail"])
            for e in state.get("log", [])
        ]
        self._logical_ms = state.get("logical_ms", float(len(self.log)))


def _resolve_param(value: str, inputs: Mapping):
    if isinstance(value, str) and value.startswith("$"):
        name = value[1:]
        if name not in inputs:
            raise StoreError(f"missing input {name!r}")
        return inputs[name]
    return value


def _topological_order(nsd):
    directives = {d.directive_id: d for d in nsd.directives}
    indegree = {did: 0 for did in directives}
    out: dict[str, list[str]] = {did: [] for did in directives}
    for frm, to in nsd.wires:
        out[frm].append(to)
        indegree[to] += 1
    ready = sorted(did for did, deg in indegree.items() if deg == 0)
    order = []
    while ready:
        did = ready.pop(0)
        order.append(directives[did])
        for nxt in out[did]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
                ready.sort()
    if len(order) != len(directives):
        raise StoreError("wiring cycle")
    return order
