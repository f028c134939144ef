import json
import random

import pytest

from gridfabric.broker import (
    AlreadyProvisioned,
    Broker,
    NotConnected,
    Offline,
    PermissionDenied,
    Role,
)
from gridfabric.model import Message, MsgType, UnknownArea, aid, jid
from gridfabric.transport import Clock, MemoryConn


COMPONENT = jid(1_000_000)


def make_broker(n_areas=2):
    broker = Broker(Clock.stepped())
    for i in range(1, n_areas + 1):
        broker.declare_area(aid(i))
    broker.provision(COMPONENT, Role.COMPONENT)
    return broker


def attach(broker, principal):
    """Attach a subscriber-side conn; returns the client end (pull mode)."""
    client_end, server_end = MemoryConn.pair()
    broker.attach(principal, server_end)
    return client_end


def drain(conn):
    out = []
    while True:
        msg = conn.try_recv()
        if msg is None:
            return out
        out.append(msg)


def price(cid, target, value=0.2):
    return Message(MsgType.PRICE, COMPONENT, target, cid, {"price_per_kwh": value})


class TestProvisioning:
    def test_subscriber_can_subscribe_after_provision(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        conn = attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        report = broker.publish_area(COMPONENT, aid(1), price("p-1", aid(1)))
        assert report.delivered_to == (jid(1),)
        assert len(drain(conn)) == 1

    def test_subscriber_may_not_publish(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        attach(broker, jid(1))
        with pytest.raises(PermissionDenied):
            broker.publish_area(jid(1), aid(1), price("p-2", aid(1)))

    def test_component_publishes_to_any_area(self):
        broker = make_broker()
        for n, area in ((1, 1), (2, 2)):
            broker.provision(jid(n), Role.SUBSCRIBER, [aid(area)])
            attach(broker, jid(n))
            broker.subscribe(jid(n), aid(area))
        assert broker.publish_area(COMPONENT, aid(1), price("p-3", aid(1))).delivered_to == (jid(1),)
        assert broker.publish_area(COMPONENT, aid(2), price("p-4", aid(2))).delivered_to == (jid(2),)

    def test_publisher_restricted_to_allowed_areas(self):
        broker = make_broker()
        broker.provision(jid(5), Role.PUBLISHER, [aid(1)])
        attach(broker, jid(5))
        assert broker.publish_area(jid(5), aid(1), price("p-5", aid(1))).delivered_to == ()
        with pytest.raises(PermissionDenied):
            broker.publish_area(jid(5), aid(2), price("p-6", aid(2)))

    def test_double_provision_and_unknown_area(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        with pytest.raises(AlreadyProvisioned):
            broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(2)], reprovision=True)
        with pytest.raises(UnknownArea):
            broker.provision(jid(2), Role.SUBSCRIBER, [aid(9)])

    def test_provision_file(self, tmp_path):
        path = tmp_path / "provision.json"
        path.write_text(json.dumps({
            "areas": ["AID1", "AID2"],
            "records": [
                {"principal": "JID1", "role": "Subscriber", "areas": ["AID1"]},
                {"principal": "JID1000000", "role": "Component", "areas": []},
            ],
        }))
        broker = Broker(Clock.stepped())
        assert broker.load_provision_file(path) == 2
        assert broker.record_for(jid(1)).role is Role.SUBSCRIBER
        assert broker.record_for(COMPONENT).role is Role.COMPONENT
        assert aid(2) in broker.areas


class TestSubscription:
    def test_unprovisioned_subscribe_denied(self):
        broker = make_broker()
        with pytest.raises(PermissionDenied):
            broker.subscribe(jid(1), aid(1))

    def test_subscribe_requires_session(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        with pytest.raises(NotConnected):
            broker.subscribe(jid(1), aid(1))

    def test_subscribe_idempotent(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        conn = attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        broker.subscribe(jid(1), aid(1))
        broker.publish_area(COMPONENT, aid(1), price("p-7", aid(1)))
        assert len(drain(conn)) == 1

    def test_subscribe_outside_allowed_area_denied(self):
        broker = make_broker()
        broker.provision(jid(3), Role.SUBSCRIBER, [aid(1)])
        attach(broker, jid(3))
        with pytest.raises(PermissionDenied):
            broker.subscribe(jid(3), aid(2))

    def test_empty_area_publish_is_fine(self):
        broker = make_broker()
        report = broker.publish_area(COMPONENT, aid(1), price("p-8", aid(1)))
        assert report.delivered_to == () and report.failed == ()


class TestDirect:
    def test_direct_reaches_only_target(self):
        broker = make_broker()
        conns = {}
        for n in (1, 2, 3):
            broker.provision(jid(n), Role.SUBSCRIBER, [aid(1)])
            conns[n] = attach(broker, jid(n))
            broker.subscribe(jid(n), aid(1))
        msg = Message(MsgType.CONTROL, COMPONENT, jid(2), "c-1",
                      {"nid": "NID1", "setting": {"name": "power", "value": "off"}})
        report = broker.send_direct(COMPONENT, jid(2), msg)
        assert report.delivered_to == (jid(2),)
        assert len(drain(conns[2])) == 1
        assert drain(conns[1]) == [] and drain(conns[3]) == []

    def test_direct_to_disconnected_is_offline(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        msg = price("c-2", jid(1))
        report = broker.send_direct(COMPONENT, jid(1), msg)
        assert report.failed == ((jid(1), "Offline"),)

    def test_direct_requires_component_role(self):
        broker = make_broker()
        broker.provision(jid(1), Role.PUBLISHER, [aid(1)])
        broker.provision(jid(2), Role.SUBSCRIBER, [aid(1)])
        attach(broker, jid(2))
        with pytest.raises(PermissionDenied):
            broker.send_direct(jid(1), jid(2), price("c-3", jid(2)))


class TestDeliverySemantics:
    def test_undetected_death_fails_offline_then_reaps(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        broker.mark_dead(jid(1))
        report = broker.publish_area(COMPONENT, aid(1), price("p-9", aid(1)))
        assert report.failed == ((jid(1), "Offline"),)
        report2 = broker.publish_area(COMPONENT, aid(1), price("p-10", aid(1)))
        assert report2.delivered_to == () and report2.failed == ()

    def test_reconnect_replaces_session_and_drops_subscriptions(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        conn2 = attach(broker, jid(1))  # replaces; subscriptions dropped
        report = broker.publish_area(COMPONENT, aid(1), price("p-11", aid(1)))
        assert report.delivered_to == ()
        broker.subscribe(jid(1), aid(1))
        broker.publish_area(COMPONENT, aid(1), price("p-12", aid(1)))
        assert len(drain(conn2)) == 1

    def test_per_session_order_is_ingress_order(self):
        broker = make_broker()
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1), aid(2)])
        conn = attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        broker.subscribe(jid(1), aid(2))
        for i in range(50):
            broker.publish_area(COMPONENT, aid(1 + i % 2), price(f"o-{i}", aid(1 + i % 2), i))
        got = [m.correlation_id for m in drain(conn)]
        assert got == [f"o-{i}" for i in range(50)]

    def test_delivery_log_written(self, tmp_path):
        log = tmp_path / "deliveries.jsonl"
        broker = Broker(Clock.stepped(), log_path=log)
        broker.declare_area(aid(1))
        broker.provision(COMPONENT, Role.COMPONENT)
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        broker.publish_area(COMPONENT, aid(1), price("log-1", aid(1)))
        broker.close()
        events = [json.loads(line) for line in log.read_text().splitlines()]
        assert any(e.get("event") == "publish" and e.get("cid") == "log-1" for e in events)


class TestBackpressureAndConcurrency:
    def test_slow_consumer_disconnected_at_queue_cap(self):
        import gridfabric.transport as transport

        clock = transport.Clock.real()
        broker = Broker(clock, queue_cap=5,
                        broadcast_delay=transport.DelayModel.fixed(2000.0))
        broker.declare_area(aid(1))
        broker.provision(COMPONENT, Role.COMPONENT)
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        conn = attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        # deliveries sit behind a 2 s delay, so the 6th publish overflows
        for i in range(5):
            report = broker.publish_area(COMPONENT, aid(1), price(f"bp-{i}", aid(1)))
            assert report.delivered_to == (jid(1),)
        report = broker.publish_area(COMPONENT, aid(1), price("bp-5", aid(1)))
        assert report.failed == ((jid(1), "SlowConsumer"),)
        assert not broker.is_connected(jid(1))
        broker.close()

    def test_thousand_concurrent_publishers_zero_loss(self):
        """Spec invariant: under 1000 concurrent publishing clients no frame
        is lost or corrupted (every correlation id accounted for)."""
        import threading

        from gridfabric.transport import Clock

        broker = Broker(Clock.real())
        broker.declare_area(aid(1))
        broker.provision(COMPONENT, Role.COMPONENT)
        broker.provision(jid(1), Role.SUBSCRIBER, [aid(1)])
        inbox = attach(broker, jid(1))
        broker.subscribe(jid(1), aid(1))
        n_publishers, per_publisher = 1000, 3
        for i in range(n_publishers):
            broker.provision(jid(100 + i), Role.PUBLISHER, [aid(1)])

        reports = []
        reports_lock = threading.Lock()

        def publish(i):
            for k in range(per_publisher):
                r = broker.publish_area(jid(100 + i), aid(1),
                                        price(f"p{i}-{k}", aid(1), i))
                with reports_lock:
                    reports.append(r)

        threads = [threading.Thread(target=publish, args=(i,)) for i in range(n_publishers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        expected = {f"p{i}-{k}" for i in range(n_publishers) for k in range(per_publisher)}
        assert {r.correlation_id for r in reports} == expected
        assert all(r.delivered_to == (jid(1),) for r in reports)
        deadline = 10.0
        import time as _time

        t0 = _time.monotonic()
        got = []
        while len(got) < len(expected) and _time.monotonic() - t0 < deadline:
            msg = inbox.try_recv()
            if msg is None:
                _time.sleep(0.01)
                continue
            got.append(msg.correlation_id)
        assert sorted(got) == sorted(expected)
        broker.close()


class ReplayOracle:
    """Brute-force subscription replay: the expected per-JID inbox."""

    def __init__(self):
        self.connected = set()
        self.subs = {}
        self.expected = {}

    def connect(self, j):
        self.connected.add(j)
        self.expected.setdefault(j, [])

    def disconnect(self, j):
        self.connected.discard(j)
        self.subs = {a: s - {j} for a, s in self.subs.items()}

    def subscribe(self, j, a):
        if j in self.connected:
            self.subs.setdefault(a, set()).add(j)

    def unsubscribe(self, j, a):
        self.subs.setdefault(a, set()).discard(j)

    def publish(self, a, payload):
        for j in self.subs.get(a, ()):  # only live subscribers hold subscriptions
            self.expected[j].append(payload)


def run_random_script(seed: int, n_areas=3, n_jids=6, n_ops=120):
    rng = random.Random(seed)
    broker = make_broker(n_areas)
    oracle = ReplayOracle()
    conns = {}
    received = {}
    areas_of = {}

    def collect(j):
        if j in conns:
            received.setdefault(j, []).extend(m.correlation_id for m in drain(conns[j]))

    for n in range(1, n_jids + 1):
        allowed = rng.sample(range(1, n_areas + 1), k=rng.randint(1, n_areas))
        areas_of[n] = allowed
        broker.provision(jid(n), Role.SUBSCRIBER, [aid(a) for a in allowed])
    pub_count = 0
    for _ in range(n_ops):
        op = rng.random()
        n = rng.randint(1, n_jids)
        if op < 0.15:
            if not broker.is_connected(jid(n)):
                collect(jid(n))  # keep the previous window's deliveries
                conns[jid(n)] = attach(broker, jid(n))
                oracle.connect(jid(n))
        elif op < 0.25:
            if broker.is_connected(jid(n)):
                broker.disconnect(jid(n))
                oracle.disconnect(jid(n))
        elif op < 0.5:
            a = rng.choice(areas_of[n])
            if broker.is_connected(jid(n)):
                broker.subscribe(jid(n), aid(a))
                oracle.subscribe(jid(n), aid(a))
        elif op < 0.6:
            a = rng.randint(1, n_areas)
            broker.unsubscribe(jid(n), aid(a))
            oracle.unsubscribe(jid(n), aid(a))
        else:
            a = rng.randint(1, n_areas)
            pub_count += 1
            broker.publish_area(COMPONENT, aid(a), price(f"pub-{pub_count}", aid(a), pub_count))
            oracle.publish(aid(a), f"pub-{pub_count}")
    for j in list(conns):
        collect(j)
    broker.close()
    return received, oracle.expected


class TestDeliveryOracle:
    def test_replay_oracle_small(self):
        for seed in range(40):
            actual, expected = run_random_script(seed)
            for j, msgs in actual.items():
                assert msgs == expected.get(j, []), f"seed {seed}, {j}"
