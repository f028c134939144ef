"""Cloud tier: identity registry glue, telemetry ingestion, the five services,
and the offline-capable push gateway for consumer devices.

The cloud talks to the broker as a Component (its own reserved JID) and to
gateways/consumer clients over a separate request/response service channel -
the same two-path split the architecture prescribes (async pub-sub control
path, periodic upload path).
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .broker import DeliveryReport, Role
from .energy import EnergyLedger, Metric, TelemetrySample, ThresholdTracker
from .model import (
    Address,
    CorrelationIds,
    FabricError,
    Message,
    MsgType,
    UnknownArea,
    parse_address,
)
from .registry import Registry, UnknownDevice, UnknownGateway
from .transport import Clock, DelayModel, FrameConn, Scheduler

COMPONENT_JID = Address("JID", 1_000_000)

DEFAULT_COMMAND_TIMEOUT_MS = 2000


class CloudError(FabricError):
    pass


class Unauthorized(CloudError):
    pass


class GatewayOffline(CloudError):
    pass


class DeviceTimeout(CloudError):
    pass


class ForeignNode(CloudError):
    pass


class BadDirective(CloudError):
    pass


@dataclass(frozen=True)
class PushNotice:
    dids: tuple[Address, ...]
    kind: str  # Price | ThresholdAlert | SecurityAlarm | Info
    body: dict

    def __post_init__(self) -> None:
        if not self.dids:
            raise CloudError("a push notice needs at least one DID")


@dataclass
class PushReport:
    delivered: tuple[Address, ...]
    queued: tuple[Address, ...]


@dataclass
class CommandOutcome:
    correlation_id: str
    ok: bool
    error: str | None = None
    results: list | None = None
    hops: tuple = ()


_PUSH_MSG_TYPES = {
    "Price": MsgType.PRICE,
    "ThresholdAlert": MsgType.THRESHOLD_ALERT,
    "SecurityAlarm": MsgType.SECURITY_ALARM,
    "Info": MsgType.REGISTER,  # vocabulary has no Info type; ride Register op=info
}


class BrokerLink:
    """The cloud's component session on the broker."""

    def __init__(self, principal: Address, clock: Clock) -> None:
        self.principal = principal
        self._clock = clock
        self._conn: FrameConn | None = None
        self._cids = CorrelationIds(principal)
        self._pending: dict[str, tuple[threading.Event, list]] = {}
        self._lock = threading.Lock()

    @property
    def connected(self) -> bool:
        return self._conn is not None and not self._conn.closed

    def connect(self, conn: FrameConn) -> None:
        self._conn = conn
        conn.set_receiver(self._on_frame)
        self._register_op({"op": "attach", "principal": self.principal.token})

    def _on_frame(self, msg: Message) -> None:
        if msg.msg_type is not MsgType.REGISTER_ACK:
            return
        with self._lock:
            entry = self._pending.pop(msg.correlation_id, None)
        if entry is not None:
            event, slot = entry
            slot.append(msg)
            event.set()

    def _await(self, cid: str, event: threading.Event, slot: list, timeout: float) -> Message | None:
        ok = event.is_set() if self._clock.virtual else event.wait(timeout)
        if not ok:
            with self._lock:
                self._pending.pop(cid, None)
            return None
        return slot[0] if slot else None

    def _register_op(self, body: dict, timeout: float = 5.0) -> Message | None:
        conn = self._conn
        if conn is None:
            raise GatewayOffline("no broker connection")
        cid = self._cids.next()
        event, slot = threading.Event(), []
        with self._lock:
            self._pending[cid] = (event, slot)
        conn.send(Message(MsgType.REGISTER, self.principal, self.principal, cid, body))
        return self._await(cid, event, slot, timeout)

    def _send_routed(self, msg: Message, timeout: float = 10.0) -> DeliveryReport:
        conn = self._conn
        if conn is None:
            raise GatewayOffline("no broker connection")
        event, slot = threading.Event(), []
        with self._lock:
            self._pending[msg.correlation_id] = (event, slot)
        conn.send(msg)
        ack = self._await(msg.correlation_id, event, slot, timeout)
        if ack is None:
            raise GatewayOffline("broker did not report delivery")
        return DeliveryReport.from_body(msg.correlation_id, ack.payload)

    def publish(self, area: Address, msg: Message) -> DeliveryReport:
        return self._send_routed(replace(msg, target=area))

    def direct(self, jid: Address, msg: Message) -> DeliveryReport:
        return self._send_routed(replace(msg, target=jid))

    def provision(self, principal: Address, role: Role, areas) -> None:
        self._register_op({
            "op": "provision",
            "principal": principal.token,
            "role": role.value,
            "areas": [a.token for a in areas],
            "reprovision": True,
        })

    def declare_area(self, area: Address) -> None:
        self._register_op({"op": "declare_area", "aid": area.token})

    def next_cid(self) -> str:
        return self._cids.next()


class PushGateway:
    """Delivers notices to connected consumer devices, queues for offline ones.

    Offline queues are unbounded; fine at desk scale, but a real deployment
    would cap them and age out stale notices.
    """

    def __init__(self, component: Address) -> None:
        self._component = component
        self._lock = threading.Lock()
        self._sessions: dict[Address, FrameConn] = {}
        self._queues: dict[Address, list[Message]] = {}
        self._delivered_log: list[tuple[Address, str]] = []

    def attach(self, did: Address, conn: FrameConn) -> int:
        """Bind a client session and drain any queued notices, in order."""
        with self._lock:
            self._sessions[did] = conn
            backlog = self._queues.pop(did, [])
        for msg in backlog:
            self._try_send(did, conn, msg)
        return len(backlog)

    def detach(self, did: Address) -> None:
        with self._lock:
            self._sessions.pop(did, None)

    def is_connected(self, did: Address) -> bool:
        with self._lock:
            conn = self._sessions.get(did)
            return conn is not None and not conn.closed

    def deliver(self, did: Address, msg: Message) -> bool:
        """Returns True when delivered live, False when queued for later."""
        with self._lock:
            conn = self._sessions.get(did)
            if conn is None or conn.closed:
                self._queues.setdefault(did, []).append(msg)
                return False
        return self._try_send(did, conn, msg)

    def _try_send(self, did: Address, conn: FrameConn, msg: Message) -> bool:
        try:
            conn.send(msg)
            with self._lock:
                self._delivered_log.append((did, msg.correlation_id))
            return True
        except Exception:
            with self._lock:
                self._sessions.pop(did, None)
                self._queues.setdefault(did, []).append(msg)
            return False

    def queued_count(self, did: Address) -> int:
        with self._lock:
            return len(self._queues.get(did, []))


class Cloud:
    """The cloud core plus its service-channel frontend."""

    def __init__(
        self,
        clock: Clock,
        *,
        component: Address = COMPONENT_JID,
        ingress_delay: DelayModel = DelayModel.zero(),
        delay_seed: int = 0,
        scheduler: Scheduler | None = None,
        audit_log: str | Path | None = None,
        command_timeout_ms: float = DEFAULT_COMMAND_TIMEOUT_MS,
    ) -> None:
        self.clock = clock
        self.component = component
        self.registry = Registry(on_gateway=self._on_gateway_registered)
        self.ledger = EnergyLedger()
        self.thresholds = ThresholdTracker()
        self.push = PushGateway(component)
        self.broker_link = BrokerLink(component, clock)
        self._ingress_delay = ingress_delay
        self._rng = random.Random(delay_seed)
        self._scheduler = scheduler or Scheduler(clock)
        self._owns_scheduler = scheduler is None
        self._command_timeout_ms = command_timeout_ms
        self._away: set[Address] = set()
        self._away_lock = threading.Lock()
        self._sensor_state: dict[Address, tuple[str, float, int]] = {}
        self._pending_cmds: dict[str, dict] = {}
        self._pending_lock = threading.Lock()
        self._client_sessions: dict[FrameConn, Address] = {}  # conn -> did
        self._gateway_sessions: dict[FrameConn, Address] = {}  # conn -> gid
        self._sessions_lock = threading.Lock()
        self._acks_seen: list[Message] = []
        self._audit_lock = threading.Lock()
        self._audit_file = open(audit_log, "a", encoding="utf-8") if audit_log else None
        self._provision_backlog: list[tuple[str, tuple]] = []

    # -- broker wiring -----------------------------------------------------
    def connect_broker(self, conn: FrameConn) -> None:
        self.broker_link.connect(conn)
        backlog, self._provision_backlog = self._provision_backlog, []
        for kind, args in backlog:
            if kind == "area":
                self.broker_link.declare_area(*args)
            else:
                self.broker_link.provision(*args)

    def _on_gateway_registered(self, gid: Address, jid: Address, area: Address) -> None:
        if self.broker_link.connected:
            self.broker_link.declare_area(area)
            self.broker_link.provision(jid, Role.SUBSCRIBER, [area])
        else:
            self._provision_backlog.append(("area", (area,)))
            self._provision_backlog.append(("prov", (jid, Role.SUBSCRIBER, [area])))

    # -- registry service ----------------------------------------------------
    def register(self, kind: str, **attrs) -> Address:
        addr = self.registry.register(kind, **attrs)
        self._audit("register", {"kind": kind, "result": addr.token})
        return addr

    # -- away mode / thresholds ------------------------------------------------
    def set_away(self, family: Address, away: bool) -> None:
        self.registry.area_of_family(family)  # validates
        with self._away_lock:
            if away:
                self._away.add(family)
            else:
                self._away.discard(family)
        self._audit("set_away", {"fid": family.token, "away": away})

    def is_away(self, family: Address) -> bool:
        with self._away_lock:
            return family in self._away

    def set_threshold(self, user: Address, wh: float) -> None:
        self.registry.family_of_user(user)  # validates
        self.thresholds.set_threshold(user, wh)
        self._audit("set_threshold", {"uid": user.token, "wh": wh})

    # -- telemetry ingestion ------------------------------------------------------
    def ingest_telemetry(self, gid: Address, batches: list[dict]) -> int:
        """Ingest uploaded batches; returns the number of samples accepted."""
        if not self.registry.has_gateway(gid):
            raise UnknownGateway(f"gateway {gid} is not registered")
        family = self.registry.family_of_gateway(gid)
        uids = self.registry.users_of_family(family)
        samples: list[TelemetrySample] = []
        for batch in batches:
            for raw in batch.get("samples", []):
                sample = TelemetrySample.from_wire(raw)
                if self.registry.gateway_of_node(sample.nid) != gid:
                    raise ForeignNode(f"{sample.nid} does not belong to {gid}")
                samples.append(sample)
        accepted = 0
        for sample in samples:
            if sample.metric is Metric.POWER_W:
                last = self.ledger.last_point(sample.nid)
                interval_start = last[0] if last is not None else sample.sampled_at
                added = self.ledger.add_power_sample(sample.nid, sample.sampled_at, sample.value)
                crossings = self.thresholds.add_family_energy(family, interval_start, added, uids)
                for cuid, energy_wh, threshold_wh, day in crossings:
                    self._emit_threshold_alert(family, cuid, energy_wh, threshold_wh, day)
            else:
                self._sensor_state[sample.nid] = (sample.metric.value, sample.value, sample.sampled_at)
                if sample.metric is Metric.MOTION and sample.value >= 1.0 and self.is_away(family):
                    self.security_alarm(gid, {
                        "nid": sample.nid.token,
                        "metric": sample.metric.value,
                        "value": sample.value,
                        "ts_ms": sample.sampled_at,
                    })
            accepted += 1
        self._audit("ingest_telemetry", {"gid": gid.token, "samples": accepted})
        return accepted

    def _emit_threshold_alert(self, family: Address, user: Address, energy_wh: float,
                              threshold_wh: float, day: int) -> None:
        dids = self.registry.dids_of_family(family)
        if not dids:
            return
        notice = PushNotice(dids, "ThresholdAlert", {
            "uid": user.token,
            "fid": family.token,
            "energy_wh": round(energy_wh, 6),
            "threshold_wh": threshold_wh,
            "day": day,
        })
        self.push_to_devices(notice)

    def sensor_value(self, nid: Address) -> tuple[str, float, int] | None:
        return self._sensor_state.get(nid)

    # -- grid services ---------------------------------------------------------------
    def dispatch_drm(self, area: Address, directive: dict, *, cid: str | None = None) -> DeliveryReport:
        if not self.registry.has_area(area):
            raise UnknownArea(f"{area} is not a registered area")
        if directive.get("action") not in ("setpoint_delta", "off", "restore"):
            raise BadDirective(f"unsupported directive {directive!r}")
        msg = Message(
            MsgType.DRM_DIRECTIVE, self.component, area,
            cid or self.broker_link.next_cid(), dict(directive),
        ).with_hop("cloud_pub", self.clock.now_ms())
        report = self.broker_link.publish(area, msg)
        self._audit("dispatch_drm", {"aid": area.token, "directive": directive,
                                     "delivered": [a.token for a in report.delivered_to]})
        return report

    def publish_price(self, area: Address, price_per_kwh: float, effective_at_ms: int,
                      *, cid: str | None = None) -> tuple[DeliveryReport, PushReport | None]:
        if not self.registry.has_area(area):
            raise UnknownArea(f"{area} is not a registered area")
        body = {"price_per_kwh": price_per_kwh, "effective_at_ms": effective_at_ms}
        msg = Message(
            MsgType.PRICE, self.component, area, cid or self.broker_link.next_cid(), body,
        ).with_hop("cloud_pub", self.clock.now_ms())
        report = self.broker_link.publish(area, msg)
        dids = self.registry.dids_of_area(area)
        push_report = None
        if dids:  # pricing tolerates an empty consumer set: broadcast only
            push_report = self.push_to_devices(PushNotice(dids, "Price", body))
        self._audit("publish_price", {"aid": area.token, "price": price_per_kwh,
                                      "pushed": [d.token for d in (push_report.delivered + push_report.queued)] if push_report else []})
        return report, push_report

    def price_direct(self, gid: Address, price_per_kwh: float, effective_at_ms: int,
                     *, cid: str | None = None) -> DeliveryReport:
        """One-to-one price update to a single home's gateway/smart meter."""
        jid = self.registry.jid_of(gid)
        msg = Message(
            MsgType.PRICE, self.component, jid, cid or self.broker_link.next_cid(),
            {"price_per_kwh": price_per_kwh, "effective_at_ms": effective_at_ms},
        ).with_hop("cloud_fwd", self.clock.now_ms())
        report = self.broker_link.direct(jid, msg)
        self._audit("price_direct", {"gid": gid.token, "jid": jid.token,
                                     "ok": report.ok})
        return report

    # -- home automation ---------------------------------------------------------------
    def automation_command(self, user: Address, node: Address, setting: dict,
                           *, cid: str | None = None,
                           reply: Callable[[CommandOutcome], None] | None = None,
                           source: Message | None = None) -> CommandOutcome:
        """Authorize, forward over broker one-to-one, and track the ack.

        Synchronous callers get the outcome (waiting up to the command
        timeout); wire callers pass ``reply`` and get called back exactly once.
        """
        cid = cid or self.broker_link.next_cid()
        outcome_slot: list[CommandOutcome] = []
        event = threading.Event()

        def finish(outcome: CommandOutcome) -> None:
            outcome_slot.append(outcome)
            event.set()
            if reply is not None:
                reply(outcome)

        try:
            family = self.registry.family_of_user(user)
            if not self.registry.has_node(node):
                raise UnknownDevice(f"node {node} is not registered")
            if self.registry.family_of_node(node) != family:
                raise Unauthorized(f"{user} may not control {node}")
            gid = self.registry.gateway_of_node(node)
            jid = self.registry.jid_of(gid)
        except FabricError as exc:
            outcome = CommandOutcome(cid, False, error=type(exc).__name__)
            self._audit("automation_command", {"uid": user.token, "nid": node.token,
                                               "outcome": outcome.error})
            finish(outcome)
            return outcome

        now = self.clock.now_ms()
        base = source if source is not None else Message(
            MsgType.CONTROL, user, jid, cid,
            {"nid": node.token, "setting": setting},
        )
        control = replace(base, target=jid).with_hop("cloud_fwd", now)
        deadline = now + self._command_timeout_ms
        with self._pending_lock:
            self._pending_cmds[cid] = {"finish": finish, "uid": user.token}
        report = self.broker_link.direct(jid, control)
        if any(reason == "Offline" for _, reason in report.failed):
            self._resolve_command(cid, CommandOutcome(cid, False, error="GatewayOffline"))
        elif self.clock.virtual:
            # stepped stacks complete inline; anything unresolved now is dead
            self._resolve_command(cid, CommandOutcome(cid, False, error="DeviceTimeout"))
        else:
            self._scheduler.schedule(
                deadline,
                lambda: self._resolve_command(cid, CommandOutcome(cid, False, error="DeviceTimeout")),
            )
            event.wait(timeout=self._command_timeout_ms / 1000.0 + 0.5)
        outcome = outcome_slot[0] if outcome_slot else CommandOutcome(cid, False, error="DeviceTimeout")
        self._audit("automation_command", {
            "uid": user.token, "nid": node.token,
            "outcome": "ok" if outcome.ok else outcome.error,
        })
        return outcome

    def _resolve_command(self, cid: str, outcome: CommandOutcome) -> None:
        with self._pending_lock:
            entry = self._pending_cmds.pop(cid, None)
        if entry is not None:
            entry["finish"](outcome)

    def _on_control_ack(self, msg: Message) -> None:
        stamped = msg.with_hop("cloud_ack", self.clock.now_ms())
        self._acks_seen.append(stamped)
        results = msg.payload.get("results", [])
        ok = bool(results) and all(r[1] for r in results)
        error = None
        if not ok:
            failures = [r[2] for r in results if not r[1]]
            error = failures[0] if failures else "DeviceTimeout"
            if error == "LinkTimeout":
                error = "DeviceTimeout"  # the user-facing name for a dead device
        self._resolve_command(
            msg.correlation_id,
            CommandOutcome(msg.correlation_id, ok, error=error, results=results,
                           hops=stamped.hop_timestamps),
        )

    def control_acks(self) -> list[Message]:
        return list(self._acks_seen)

    # -- home security -----------------------------------------------------------------
    def security_alarm(self, gid: Address, evidence: dict) -> bool:
        """Alarm every family device and start the gateway camera; returns
        True when the alarm fired (family away), False otherwise."""
        family = self.registry.family_of_gateway(gid)
        if not self.is_away(family):
            return False
        dids = self.registry.dids_of_family(family)
        if dids:
            self.push_to_devices(PushNotice(dids, "SecurityAlarm", {
                "fid": family.token, "gid": gid.token, "evidence": evidence,
            }))
        cameras = [n for n in self.registry.nodes_of_gateway(gid)
                   if self.registry.kind_of_node(n) == "Camera"]
        if cameras:
            camera = cameras[0]
            jid = self.registry.jid_of(gid)
            control = Message(
                MsgType.CONTROL, self.component, jid, self.broker_link.next_cid(),
                {"nid": camera.token, "setting": {"name": "recording", "value": True}},
            ).with_hop("cloud_fwd", self.clock.now_ms())
            try:
                self.broker_link.direct(jid, control)
            except FabricError:
                pass  # delivery failures are logged, never raised to the caller
        self._audit("security_alarm", {"gid": gid.token, "fid": family.token,
                                       "dids": [d.token for d in dids]})
        return True

    # -- energy monitoring ----------------------------------------------------------------
    def query_energy(self, user: Address, start_ms: int, end_ms: int) -> dict:
        """Per-node and total cumulative series over the user's family nodes."""
        family = self.registry.family_of_user(user)
        nodes = self.registry.nodes_of_family(family)
        if end_ms < start_ms:
            return {"per_nid": {}, "total": []}
        stamps = self.ledger.timestamps(nodes, start_ms, end_ms)
        per_nid = {
            node.token: [[ts, self.ledger.energy_at(node, ts)] for ts in stamps]
            for node in nodes
        }
        total = [[ts, sum(self.ledger.energy_at(node, ts) for node in nodes)] for ts in stamps]
        self._audit("query_energy", {"uid": user.token, "points": len(stamps)})
        return {"per_nid": per_nid, "total": total}

    # -- push gateway -------------------------------------------------------------------
    def push_to_devices(self, notice: PushNotice) -> PushReport:
        for device in notice.dids:
            if not self.registry.has_device_id(device):
                raise UnknownDevice(f"{device} is not registered")
        msg_type = _PUSH_MSG_TYPES[notice.kind]
        body = dict(notice.body)
        if notice.kind == "Info":
            body = {"op": "info", **body}
        cid = self.broker_link.next_cid()
        delivered, queued = [], []
        for device in sorted(notice.dids):
            msg = Message(msg_type, self.component, device, cid, body).with_hop(
                "cloud_push", self.clock.now_ms()
            )
            if self.push.deliver(device, msg):
                delivered.append(device)
            else:
                queued.append(device)
        self._audit("push", {"kind": notice.kind, "delivered": [d.token for d in delivered],
                             "queued": [d.token for d in queued]})
        return PushReport(tuple(delivered), tuple(queued))

    # -- service-channel frontend ----------------------------------------------------------
    def accept_service(self, conn: FrameConn) -> None:
        conn.set_receiver(lambda msg: self._on_service_handshake(conn, msg))

    def _on_service_handshake(self, conn: FrameConn, msg: Message) -> None:
        body = msg.payload
        op = body.get("op")
        try:
            if msg.msg_type is MsgType.REGISTER and op == "attach_gateway":
                gid = parse_address(body["gid"])
                if not self.registry.has_gateway(gid):
                    raise UnknownGateway(f"{gid} is not registered")
                with self._sessions_lock:
                    self._gateway_sessions[conn] = gid
                conn.set_receiver(lambda m: self._on_gateway_frame(conn, gid, m))
                self._ack(conn, msg, ok=True, gid=gid.token)
            elif msg.msg_type is MsgType.REGISTER and op == "attach_client":
                device = parse_address(body["did"])
                user = self.registry.user_of_device_id(device)
                with self._sessions_lock:
                    self._client_sessions[conn] = device
                conn.set_receiver(lambda m: self._on_client_frame(conn, device, m))
                conn.on_close = lambda: self._client_closed(conn, device)
                self.push.attach(device, conn)
                self._ack(conn, msg, ok=True, did=device.token, uid=user.token)
            else:
                self._ack(conn, msg, ok=False, error="BadRequest",
                          detail="attach_gateway or attach_client first")
        except FabricError as exc:
            self._ack(conn, msg, ok=False, error=type(exc).__name__, detail=str(exc))

    def _client_closed(self, conn: FrameConn, device: Address) -> None:
        self.push.detach(device)
        with self._sessions_lock:
            self._client_sessions.pop(conn, None)

    def _on_gateway_frame(self, conn: FrameConn, gid: Address, msg: Message) -> None:
        if msg.msg_type is MsgType.TELEMETRY:
            try:
                accepted = self.ingest_telemetry(gid, msg.payload.get("batches", []))
                self._ack(conn, msg, ok=True, accepted=accepted)
            except FabricError as exc:
                self._ack(conn, msg, ok=False, error=type(exc).__name__, detail=str(exc))
        elif msg.msg_type is MsgType.CONTROL_ACK:
            self._on_control_ack(msg)

    def _on_client_frame(self, conn: FrameConn, device: Address, msg: Message) -> None:
        # the client->cloud leg carries the calibrated ingress delay; the
        # stamp is the modeled arrival instant, so scheduler wake-up jitter
        # charges the processing span, not the transit segment
        delay = self._ingress_delay.sample(self._rng)
        arrival = self.clock.now_ms() + int(delay)
        if delay > 0 and not self.clock.virtual:
            time.sleep(delay / 1000.0)
        stamped = msg.with_hop("cloud_recv", arrival)
        try:
            if msg.msg_type is MsgType.CONTROL:
                user = self.registry.user_of_device_id(device)
                node = parse_address(msg.payload["nid"])

                def reply(outcome: CommandOutcome) -> None:
                    self._send_command_reply(conn, device, stamped, outcome)

                self.automation_command(user, node, msg.payload["setting"],
                                        cid=msg.correlation_id, reply=reply, source=stamped)
            elif msg.msg_type is MsgType.REGISTER:
                self._on_client_register(conn, device, stamped)
            else:
                self._ack(conn, stamped, ok=False, error="BadRequest",
                          detail=f"unsupported {msg.msg_type.value}")
        except FabricError as exc:
            self._ack(conn, stamped, ok=False, error=type(exc).__name__, detail=str(exc))

    def _send_command_reply(self, conn: FrameConn, device: Address, request: Message,
                            outcome: CommandOutcome) -> None:
        hops = outcome.hops if outcome.hops else request.hop_timestamps
        reply = Message(
            MsgType.CONTROL_ACK if outcome.ok or outcome.results else MsgType.REGISTER_ACK,
            self.component, device, outcome.correlation_id,
            {"ok": outcome.ok, "error": outcome.error, "results": outcome.results or []},
            hops,
        )
        try:
            conn.send(reply.with_hop("cloud_reply", self.clock.now_ms()))
        except Exception:
            pass

    def _on_client_register(self, conn: FrameConn, device: Address, msg: Message) -> None:
        body = msg.payload
        op = body.get("op")
        if op == "query_energy":
            user = parse_address(body["uid"])
            series = self.query_energy(user, int(body.get("from_ms", 0)),
                                       int(body.get("to_ms", 2**62)))
            self._ack(conn, msg, ok=True, **series)
        elif op == "set_away":
            self.set_away(parse_address(body["fid"]), bool(body["away"]))
            self._ack(conn, msg, ok=True)
        elif op == "set_threshold":
            self.set_threshold(parse_address(body["uid"]), float(body["threshold_wh"]))
            self._ack(conn, msg, ok=True)
        elif op == "publish_price":
            report, push_report = self.publish_price(
                parse_address(body["aid"]), float(body["price_per_kwh"]),
                int(body.get("effective_at_ms", self.clock.now_ms())),
                cid=msg.correlation_id,
            )
            self._ack(conn, msg, ok=True, delivered=[a.token for a in report.delivered_to],
                      pushed=[d.token for d in (push_report.delivered + push_report.queued)] if push_report else [])
        elif op == "dispatch_drm":
            report = self.dispatch_drm(parse_address(body["aid"]), body["directive"],
                                       cid=msg.correlation_id)
            self._ack(conn, msg, ok=True, delivered=[a.token for a in report.delivered_to])
        elif op == "price_direct":
            report = self.price_direct(
                parse_address(body["gid"]), float(body["price_per_kwh"]),
                int(body.get("effective_at_ms", self.clock.now_ms())),
                cid=msg.correlation_id,
            )
            self._ack(conn, msg, ok=report.ok,
                      delivered=[a.token for a in report.delivered_to],
                      failed=[[a.token, r] for a, r in report.failed])
        elif op == "register":
            attrs = {}
            for key in ("area", "family", "gateway", "user"):
                if key in body:
                    attrs[key] = parse_address(body[key])
            if "device_kind" in body:
                attrs["device_kind"] = body["device_kind"]
            if "value" in body:
                attrs["value"] = int(body["value"])
            addr = self.register(body["kind"], **attrs)
            extra = {}
            if body["kind"] == "GID":
                extra["jid"] = self.registry.jid_of(addr).token
            self._ack(conn, msg, ok=True, address=addr.token, **extra)
        else:
            self._ack(conn, msg, ok=False, error="BadRequest", detail=f"unknown op {op!r}")

    def _ack(self, conn: FrameConn, msg: Message, *, ok: bool, **extra) -> None:
        body = {"op": msg.payload.get("op", "ack"), "ok": ok, **extra}
        reply = Message(MsgType.REGISTER_ACK, self.component, msg.sender,
                        msg.correlation_id, body, msg.hop_timestamps)
        try:
            conn.send(reply.with_hop("cloud_reply", self.clock.now_ms()))
        except Exception:
            pass

    # -- plumbing ---------------------------------------------------------------
    def export_ledger_csv(self, path: str | Path) -> int:
        return self.ledger.export_csv(path)

    def _audit(self, op: str, details: dict) -> None:
        if self._audit_file is None:
            return
        record = {"t_ms": self.clock.now_ms(), "op": op, **details}
        with self._audit_lock:
            self._audit_file.write(json.dumps(record, sort_keys=True) + "\n")
            self._audit_file.flush()

    def close(self) -> None:
        if self._owns_scheduler:
            self._scheduler.close()
        if self._audit_file is not None:
            with self._audit_lock:
                self._audit_file.close()
            self._audit_file = None
