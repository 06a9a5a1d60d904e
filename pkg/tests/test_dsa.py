import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socketstore.dsa import ConnectOptions, DedupReceiver, DsaClient, DsaError
from socketstore.fixtures import evaluation_topology, flash_delivery_manifest
from socketstore.netsim import Simulator
from socketstore.store import SocketStore
from socketstore.wire import FaultyTransport, LocalTransport, StoreProtocol

AUTHOR = "pathworks-labs"
MODULE = "flash-delivery"


def make_world():
    """One shared network carrying both the store and the two devices."""
    sim = Simulator(evaluation_topology())
    store = SocketStore(sim=sim)
    store.register_specialist(AUTHOR)
    mid = store.submit_module(flash_delivery_manifest(store.library))
    store.start_review(mid, "review-board")
    store.review_decision(mid, "accept", "review-board")
    protocol = StoreProtocol(store)
    return sim, store, protocol


def client_pair(sim, protocol):
    dsa_b = DsaClient("B", sim, LocalTransport(protocol), app_id="demo")
    dsa_a = DsaClient("A", sim, LocalTransport(protocol), app_id="demo")
    return dsa_a, dsa_b


def purchased(store, app="demo"):
    return store.purchase(app, MODULE).token


class TestBind:
    def test_bind_publishes_two_endpoints(self):
        sim, store, protocol = make_world()
        _, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        resolved = store.resolve_alias("Device_B")
        assert len(resolved) == 2
        assert {e["nic"] for e in resolved} == {0, 1}
        assert all(e["address"] == "B" for e in resolved)

    def test_empty_alias_rejected(self):
        sim, store, protocol = make_world()
        _, dsa_b = client_pair(sim, protocol)
        with pytest.raises(DsaError, match="empty alias"):
            dsa_b.bind("")

    def test_rebind_same_device_idempotent(self):
        sim, store, protocol = make_world()
        _, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        dsa_b.bind("Device_B")
        assert len(store.resolve_alias("Device_B")) == 2

    def test_alias_conflict_between_devices(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        with pytest.raises(DsaError, match="alias conflict"):
            dsa_a.bind("Device_B")

    def test_periodic_refresh_after_store_outage(self):
        sim, store, protocol = make_world()
        real = LocalTransport(protocol)
        flaky = FaultyTransport(real, fault="down")
        dsa_b = DsaClient("B", sim, flaky, app_id="demo")
        handle = dsa_b.bind("Device_B")
        assert not handle.registered
        assert store.resolve_alias("Device_B") is None
        flaky.fault = "none"  # store comes back; next refresh succeeds
        sim.run_until(sim.now_ms + 1000.0)
        assert handle.registered
        assert store.resolve_alias("Device_B") is not None

    def test_close_releases_alias(self):
        sim, store, protocol = make_world()
        _, dsa_b = client_pair(sim, protocol)
        handle = dsa_b.bind("Device_B")
        handle.close()
        assert store.resolve_alias("Device_B") is None

    def test_resolution_freshness_after_rebind(self):
        sim, store, protocol = make_world()
        _, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        first = store.resolve_alias("Device_B")
        rebound = DsaClient("B", sim, LocalTransport(protocol), app_id="demo",
                            base_port=9000)
        rebound.bind("Device_B")
        fresh = store.resolve_alias("Device_B")
        assert fresh != first
        assert all(e["port"] >= 9000 for e in fresh)


class TestConnect:
    def test_module_mode_k2(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, purchased(store))
        assert conn.mode == "module"
        assert conn.paths == 2
        assert conn.instance_id in store.instances

    def test_k3_falls_back_with_allocation_reason(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, purchased(store), ConnectOptions(k=3))
        assert conn.mode == "fallback"
        assert conn.paths == 1
        assert conn.failure_reason == "allocation failed: only 2 disjoint paths"

    def test_bad_token_falls_back_as_denied(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, "not-a-token")
        assert conn.mode == "fallback"
        assert conn.failure_reason == "authorization denied"
        # the fallback still reaches the peer like a plain socket would
        recs = conn.send(b"x")
        assert len(recs) == 1 and recs[0].delivered

    def test_invalid_options_raise(self):
        with pytest.raises(DsaError):
            ConnectOptions(k=0)
        with pytest.raises(DsaError):
            ConnectOptions(rate_mbps=0)
        with pytest.raises(DsaError):
            ConnectOptions(on_failure="explode")

    def test_negotiate_mode_invokes_callback_and_opens_nothing(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        events = []
        dsa_a.on_failure(events.append)
        conn = dsa_a.connect(
            "Device_B", MODULE, purchased(store),
            ConnectOptions(k=3, on_failure="negotiate"),
        )
        assert conn is None
        assert len(events) == 1
        assert events[0].max_feasible_k == 2
        assert "only 2 disjoint paths" in events[0].reason


class TestSendRecv:
    def make_module_conn(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, purchased(store))
        assert conn.mode == "module"
        return sim, store, conn

    def test_one_send_two_records_one_delivery(self):
        _, _, conn = self.make_module_conn()
        records = conn.send(b"hello")
        assert len(records) == 2
        assert conn.recv() == [(0, b"hello")]
        assert conn.recv() == []

    def test_fallback_sends_single_copy(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, "junk")
        records = conn.send(b"payload")
        assert len(records) == 1
        assert conn.recv() == [(0, b"payload")]

    def test_blackholed_path_still_delivers_everything(self):
        sim, _, conn = self.make_module_conn()
        sim.retract_path(conn.flow, 0)  # kill the first mirror copy's route
        for i in range(100):
            sim.run_until(i * 1.0)
            conn.send(f"pkt-{i}")
        got = conn.recv()
        assert [seq for seq, _ in got] == list(range(100))

    def test_send_after_close_raises(self):
        _, _, conn = self.make_module_conn()
        conn.close()
        with pytest.raises(DsaError, match="connection closed"):
            conn.send(b"late")


class TestClose:
    def test_close_tears_down_and_freezes_cost(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, purchased(store))
        iid = conn.instance_id
        sim.run_until(2000.0)
        conn.close()
        frozen = store.cost(iid).raw_total
        assert frozen > 0
        sim.run_until(10_000.0)
        assert store.cost(iid).raw_total == frozen
        assert store.instances[iid].torn_down_at_ms is not None

    def test_double_close_noop(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        conn = dsa_a.connect("Device_B", MODULE, purchased(store))
        conn.close()
        conn.close()

    def test_close_fallback_no_store_interaction(self):
        sim, store, protocol = make_world()
        dsa_a, dsa_b = client_pair(sim, protocol)
        dsa_b.bind("Device_B")
        transport = dsa_a.transport
        conn = dsa_a.connect("Device_B", MODULE, "junk")
        sent_before = len(transport.sent)
        conn.close()
        assert len(transport.sent) == sent_before


FAULTS = ["down", "timeout", "cut_after_1", "cut_after_2", "deny", "instantiate_fail"]


def run_fault(fault: str):
    sim, store, protocol = make_world()
    dsa_b = DsaClient("B", sim, LocalTransport(protocol), app_id="demo")
    dsa_b.bind("Device_B")
    token = purchased(store)
    opts = ConnectOptions()
    if fault == "deny":
        token = "junk-token"
        transport = LocalTransport(protocol)
    elif fault == "instantiate_fail":
        opts = ConnectOptions(k=3)
        transport = LocalTransport(protocol)
    elif fault.startswith("cut_after_"):
        transport = FaultyTransport(
            LocalTransport(protocol), "cut_after", cut_after=int(fault[-1])
        )
    else:
        transport = FaultyTransport(LocalTransport(protocol), fault)
    dsa_a = DsaClient("A", sim, transport, app_id="demo")
    start = sim.now_ms
    conn = dsa_a.connect("Device_B", MODULE, token, opts, fallback_address="B")
    elapsed = sim.now_ms - start
    return store, conn, elapsed


class TestFallbackTotality:
    @pytest.mark.parametrize("fault", FAULTS)
    def test_always_falls_back_within_timeout(self, fault):
        store, conn, elapsed = run_fault(fault)
        assert conn is not None
        assert conn.mode == "fallback"
        assert conn.failure_reason
        assert elapsed <= 200.0
        records = conn.send(b"probe")
        assert len(records) == 1
        assert records[0].delivered

    def test_deny_is_logged_when_store_reachable(self):
        store, conn, _ = run_fault("deny")
        denies = [e for e in store.log if e.action == "authorize" and e.outcome == "deny"]
        assert denies

    def test_instantiate_failure_logged_when_store_reachable(self):
        store, conn, _ = run_fault("instantiate_fail")
        errors = [e for e in store.log if e.action == "instantiate" and e.outcome == "error"]
        assert errors


class TestDedupReceiver:
    def test_duplicate_rejected(self):
        rx = DedupReceiver()
        assert rx.offer(0, 1.0, "a")
        assert not rx.offer(0, 2.0, "a")
        assert rx.drain() == [(0, "a")]

    def test_late_beyond_window_rejected(self):
        rx = DedupReceiver(window=16)
        assert rx.offer(100, 1.0, "new")
        assert not rx.offer(84, 2.0, "too-old")
        assert rx.offer(85, 2.0, "just-inside")

    @settings(max_examples=40, deadline=None)
    @given(
        k=st.sampled_from([2, 3]),
        data=st.data(),
    )
    def test_property_exactly_once_per_surviving_seq(self, k, data):
        n = 200
        rx = DedupReceiver()
        expected = []
        for seq in range(n):
            # each copy independently survives or is lost; at least one
            # survivor is forced for seqs the oracle expects delivered
            mask = data.draw(
                st.lists(st.booleans(), min_size=k, max_size=k), label=f"mask{seq}"
            )
            if any(mask):
                expected.append(seq)
            for copy, survived in enumerate(mask):
                if survived:
                    rx.offer(seq, seq * 1.0 + copy * 0.1, f"p{seq}")
        got = [seq for seq, _ in rx.drain()]
        assert got == expected
