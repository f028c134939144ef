import json

import pytest

from gridfabric.cloud import PushNotice, Unauthorized
from gridfabric.model import MsgType, UnknownArea, aid, did, fid, gid, jid, nid, uid
from gridfabric.registry import UnknownDevice, UnknownGateway
from gridfabric.stack import Stack, demo_topology


@pytest.fixture
def stack(tmp_path):
    s = Stack(demo_topology(), mode="stepped", instant_links=True,
              broker_log=tmp_path / "broker.jsonl", audit_log=tmp_path / "audit.jsonl")
    s.broker_log_path = tmp_path / "broker.jsonl"
    yield s
    s.close()


def broker_events(stack):
    return [json.loads(line) for line in
            stack.broker_log_path.read_text().splitlines()]


class TestAutomationAuthorization:
    def test_own_device_allowed(self, stack):
        outcome = stack.cloud.automation_command(
            uid(5), nid(6), {"name": "setpoint_c", "value": 24})
        assert outcome.ok
        assert stack.gateway(gid(2)).device(nid(6)).setpoint_c == 24.0

    def test_foreign_device_unauthorized_and_no_direct_sent(self, stack):
        # a Family-1 user aims at Family-2's AC
        outcome = stack.cloud.automation_command(
            uid(1), nid(6), {"name": "setpoint_c", "value": 18})
        assert not outcome.ok and outcome.error == "Unauthorized"
        directs = [e for e in broker_events(stack) if e.get("event") == "direct"
                   and e.get("t") != "RegisterAck"]
        control_directs = [e for e in directs if e.get("jid") == "JID2"]
        assert control_directs == []
        assert stack.gateway(gid(2)).device(nid(6)).setpoint_c == 24.0

    def test_gateway_offline_surfaces(self, stack):
        stack.broker.disconnect(jid(2))
        outcome = stack.cloud.automation_command(
            uid(5), nid(6), {"name": "setpoint_c", "value": 25})
        assert not outcome.ok and outcome.error == "GatewayOffline"

    def test_unknown_user_and_node(self, stack):
        bad_user = stack.cloud.automation_command(
            uid(99), nid(6), {"name": "setpoint_c", "value": 20})
        assert bad_user.error == "UnknownUser"
        bad_node = stack.cloud.automation_command(
            uid(5), nid(99), {"name": "setpoint_c", "value": 20})
        assert bad_node.error == "UnknownDevice"

    def test_dead_device_link_surfaces_device_timeout(self):
        from gridfabric.gateway import LinkModel
        from gridfabric.devices import Plug

        topology = {"areas": 1, "families": [
            {"area": 1, "users": 1, "devices": [
                {"kind": "Plug", "link": {"protocol": "ZWaveLike", "mean_ms": 1.0,
                                          "loss": 0.999999999}}]}]}
        s = Stack(topology, mode="stepped")
        try:
            outcome = s.cloud.automation_command(
                uid(1), nid(1), {"name": "power", "value": "on"})
            assert not outcome.ok and outcome.error == "DeviceTimeout"
            assert outcome.results == [["NID1", False, "LinkTimeout"]]
        finally:
            s.close()


class TestPricing:
    def test_broadcast_plus_push_to_exactly_area_dids(self, stack):
        clients = {d: stack.connect_client(d) for d in
                   [did(i) for i in range(1, 12)]}
        report, push_report = stack.cloud.publish_price(aid(2), 0.31, 0)
        assert report.delivered_to == (jid(2),)
        pushed = set(push_report.delivered + push_report.queued)
        assert pushed == {did(5), did(6), did(7), did(8), did(9)}
        for d, client in clients.items():
            client.drain_pushes()
            prices = [p for p in client.pushes if p.message.msg_type is MsgType.PRICE]
            if d in pushed:
                assert len(prices) == 1
            else:
                assert prices == []

    def test_area_without_users_broadcast_only(self, tmp_path):
        topology = {"areas": 2, "families": [
            {"area": 1, "users": 1, "devices": [{"kind": "Plug"}]},
            {"area": 2, "users": 0, "devices": [{"kind": "Plug"}]},
        ]}
        s = Stack(topology, mode="stepped", instant_links=True)
        try:
            report, push_report = s.cloud.publish_price(aid(2), 0.2, 0)
            assert report.delivered_to == (jid(2),)
            assert push_report is None
        finally:
            s.close()

    def test_unknown_area(self, stack):
        with pytest.raises(UnknownArea):
            stack.cloud.publish_price(aid(9), 0.2, 0)
        with pytest.raises(UnknownArea):
            stack.cloud.dispatch_drm(aid(9), {"action": "off", "device_kind": "Light"})


class TestPushGateway:
    def test_connected_dids_get_immediate_delivery(self, stack):
        clients = [stack.connect_client(did(i)) for i in (1, 2, 3)]
        report = stack.cloud.push_to_devices(
            PushNotice((did(1), did(2), did(3)), "Info", {"note": "hi"}))
        assert set(report.delivered) == {did(1), did(2), did(3)}
        assert report.queued == ()
        for client in clients:
            client.drain_pushes()
            assert len(client.pushes) == 1

    def test_offline_did_queued_then_delivered_in_order_on_reconnect(self, stack):
        for i in range(4):
            stack.cloud.push_to_devices(
                PushNotice((did(10),), "Info", {"n": i}))
        assert stack.cloud.push.queued_count(did(10)) == 4
        client = stack.connect_client(did(10))
        client.drain_pushes()
        assert [p.message.payload["n"] for p in client.pushes] == [0, 1, 2, 3]

    def test_mixed_multicast_partitions(self, stack):
        stack.connect_client(did(1))
        report = stack.cloud.push_to_devices(
            PushNotice((did(1), did(2)), "Info", {}))
        assert report.delivered == (did(1),) and report.queued == (did(2),)

    def test_unregistered_did_rejected(self, stack):
        with pytest.raises(UnknownDevice):
            stack.cloud.push_to_devices(PushNotice((did(99),), "Info", {}))
        with pytest.raises(Exception):
            PushNotice((), "Info", {})


class TestTelemetryIngestion:
    def test_ingest_integrates_power(self, stack):
        gateway = stack.gateway(gid(1))
        assert gateway.upload_batch([["NID2", "PowerW", 1000.0, 0]])
        assert gateway.upload_batch([["NID2", "PowerW", 0.0, 3_600_000]])
        assert stack.cloud.ledger.energy_at(nid(2), 3_600_000) == pytest.approx(1000.0)

    def test_foreign_node_rejected(self, stack):
        gateway = stack.gateway(gid(1))
        # NID6 belongs to gateway 2
        assert gateway.upload_batch([["NID6", "PowerW", 100.0, 0]]) is False
        assert stack.cloud.ledger.energy_at(nid(6), 10**9) == 0.0

    def test_unknown_gateway(self, stack):
        with pytest.raises(UnknownGateway):
            stack.cloud.ingest_telemetry(gid(42), [])

    def test_regressing_timestamps_rejected(self, stack):
        gateway = stack.gateway(gid(1))
        assert gateway.upload_batch([["NID2", "PowerW", 100.0, 5000]])
        assert gateway.upload_batch([["NID2", "PowerW", 100.0, 4000]]) is False

    def test_threshold_alert_exactly_once_per_crossing(self, stack):
        clients = [stack.connect_client(did(i)) for i in (1, 2, 3, 4)]
        outsider = stack.connect_client(did(5))
        stack.cloud.set_threshold(uid(1), 500.0)
        gateway = stack.gateway(gid(1))
        gateway.upload_batch([["NID2", "PowerW", 998.0, 0]])
        gateway.upload_batch([["NID2", "PowerW", 998.0, 1_800_000]])   # 499 Wh
        gateway.upload_batch([["NID2", "PowerW", 998.0, 1_807_300]])   # ~501 Wh
        gateway.upload_batch([["NID2", "PowerW", 998.0, 3_600_000]])   # far beyond
        for client in clients:
            client.drain_pushes()
            alerts = [p for p in client.pushes
                      if p.message.msg_type is MsgType.THRESHOLD_ALERT]
            assert len(alerts) == 1, "one alert per crossing, to every family DID"
            assert alerts[0].message.payload["uid"] == "UID1"
        outsider.drain_pushes()
        assert [p for p in outsider.pushes
                if p.message.msg_type is MsgType.THRESHOLD_ALERT] == []


class TestSecurity:
    def test_alarm_when_away_with_motion(self, stack):
        clients = [stack.connect_client(did(10)), stack.connect_client(did(11))]
        stack.cloud.set_away(fid(3), True)
        gateway = stack.gateway(gid(3))
        assert gateway.upload_batch([["NID8", "Motion", 1.0, 1000]])
        for client in clients:
            client.drain_pushes()
            alarms = [p for p in client.pushes
                      if p.message.msg_type is MsgType.SECURITY_ALARM]
            assert len(alarms) == 1
        camera = stack.gateway(gid(3)).device(nid(9))
        assert camera.recording is True

    def test_no_alarm_when_home(self, stack):
        client = stack.connect_client(did(10))
        gateway = stack.gateway(gid(3))
        gateway.upload_batch([["NID8", "Motion", 1.0, 1000]])
        client.drain_pushes()
        assert [p for p in client.pushes
                if p.message.msg_type is MsgType.SECURITY_ALARM] == []
        assert stack.gateway(gid(3)).device(nid(9)).recording is False

    def test_two_users_two_pushes_one_camera_command(self, stack, tmp_path):
        stack.cloud.set_away(fid(3), True)
        fired = stack.cloud.security_alarm(gid(3), {"nid": "NID8"})
        assert fired
        directs = [e for e in broker_events(stack)
                   if e.get("event") == "direct" and e.get("jid") == "JID3"]
        assert len(directs) == 1
        assert stack.cloud.push.queued_count(did(10)) == 1
        assert stack.cloud.push.queued_count(did(11)) == 1


class TestEnergyQuery:
    def test_family_additivity(self, stack):
        gateway = stack.gateway(gid(1))
        gateway.upload_batch([["NID2", "PowerW", 100.0, 0], ["NID3", "PowerW", 50.0, 0]])
        gateway.upload_batch([["NID2", "PowerW", 100.0, 3_600_000],
                              ["NID3", "PowerW", 50.0, 3_600_000]])
        series = stack.cloud.query_energy(uid(1), 0, 10**9)
        per_nid = series["per_nid"]
        assert per_nid["NID2"][-1][1] == pytest.approx(100.0)
        assert per_nid["NID3"][-1][1] == pytest.approx(50.0)
        total = series["total"]
        assert total[-1][1] == pytest.approx(150.0)
        for i, (ts, value) in enumerate(total):
            assert value == pytest.approx(sum(pts[i][1] for pts in per_nid.values()))

    def test_empty_range_and_before_data(self, stack):
        series = stack.cloud.query_energy(uid(1), 100, 50)
        assert series["total"] == [] and series["per_nid"] == {}
        series = stack.cloud.query_energy(uid(1), 0, 10)
        assert series["total"] == []

    def test_unknown_user(self, stack):
        from gridfabric.registry import UnknownUser

        with pytest.raises(UnknownUser):
            stack.cloud.query_energy(uid(42), 0, 1)

    def test_random_ingestion_matches_replay_oracle(self, stack):
        import random as _random

        rng = _random.Random(31)
        gateway = stack.gateway(gid(1))
        reference = {}  # nid token -> (last_ts, last_w, wh)
        ts = 0
        for _ in range(150):
            ts += rng.randint(1_000, 600_000)
            token = rng.choice(["NID2", "NID3"])
            w = round(rng.uniform(0, 2000), 3)
            assert gateway.upload_batch([[token, "PowerW", w, ts]])
            prev = reference.get(token)
            if prev is None:
                reference[token] = (ts, w, 0.0)
            else:
                last_ts, last_w, wh = prev
                reference[token] = (ts, w, wh + last_w * (ts - last_ts) / 3_600_000)

        def reference_at(token, t):
            last_ts, last_w, wh = reference[token]
            return wh + last_w * max(0, t - last_ts) / 3_600_000  # held rate

        series = stack.cloud.query_energy(uid(1), 0, ts)["per_nid"]
        for token in reference:
            final_ts, final_wh = series[token][-1]
            assert final_wh == pytest.approx(reference_at(token, final_ts))


class TestServiceWireOps:
    def test_register_over_the_wire(self, stack):
        client = stack.connect_client(did(1))
        reply = client._request(MsgType.REGISTER, {
            "op": "register", "kind": "NID", "gateway": "GID1",
            "device_kind": "Plug", "value": 500,
        })
        assert reply.payload["ok"] and reply.payload["address"] == "NID500"
        dup = client._request(MsgType.REGISTER, {
            "op": "register", "kind": "NID", "gateway": "GID1",
            "device_kind": "Plug", "value": 500,
        })
        assert not dup.payload["ok"] and dup.payload["error"] == "DuplicateBinding"
        missing = client._request(MsgType.REGISTER, {
            "op": "register", "kind": "NID", "gateway": "GID42", "device_kind": "Plug",
        })
        assert not missing.payload["ok"] and missing.payload["error"] == "UnknownParent"

    def test_audit_log_records_service_calls(self, stack, tmp_path):
        stack.cloud.publish_price(aid(1), 0.5, 0)
        stack.cloud.set_away(fid(3), True)
        stack.cloud.close()
        audit_lines = [json.loads(line) for line in
                       (tmp_path / "audit.jsonl").read_text().splitlines()]
        ops = {entry["op"] for entry in audit_lines}
        assert {"publish_price", "set_away"} <= ops
