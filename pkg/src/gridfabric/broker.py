"""Connection-oriented pub-sub router: provisioning, area broadcast, direct delivery.

The broker keeps no message history: a subscriber that is offline at publish
time shows up in the delivery report as failed (Offline) and offline-capable
notification is the push gateway's job, not the broker's.  Subscriptions die
with their session; re-subscribing after reconnect is the subscriber's
responsibility.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .model import (
    Address,
    CorrelationIds,
    FabricError,
    Message,
    MsgType,
    UnknownArea,
    parse_address,
)
from .transport import Clock, DelayModel, FrameConn, Scheduler, TcpListener

DEFAULT_QUEUE_CAP = 1024


class BrokerError(FabricError):
    pass


class AlreadyProvisioned(BrokerError):
    pass


class PermissionDenied(BrokerError):
    pass


class NotConnected(BrokerError):
    pass


class Offline(BrokerError):
    pass


class Role(str, Enum):
    PUBLISHER = "Publisher"
    SUBSCRIBER = "Subscriber"
    COMPONENT = "Component"


@dataclass(frozen=True)
class ProvisionRecord:
    principal: Address
    role: Role
    allowed_areas: frozenset[Address] = frozenset()


@dataclass
class DeliveryReport:
    correlation_id: str
    delivered_to: tuple[Address, ...]
    failed: tuple[tuple[Address, str], ...]
    ingress_ms: int
    egress_ms: int

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_body(self) -> dict:
        return {
            "op": "delivery_report",
            "ok": self.ok,
            "delivered": [a.token for a in self.delivered_to],
            "failed": [[a.token, reason] for a, reason in self.failed],
            "ingress_ms": self.ingress_ms,
            "egress_ms": self.egress_ms,
        }

    @classmethod
    def from_body(cls, cid: str, body: dict) -> "DeliveryReport":
        return cls(
            correlation_id=cid,
            delivered_to=tuple(parse_address(t) for t in body.get("delivered", [])),
            failed=tuple((parse_address(t), r) for t, r in body.get("failed", [])),
            ingress_ms=int(body.get("ingress_ms", 0)),
            egress_ms=int(body.get("egress_ms", 0)),
        )


class _Session:
    __slots__ = ("principal", "conn", "pending", "last_due", "alive", "reason")

    def __init__(self, principal: Address, conn: FrameConn) -> None:
        self.principal = principal
        self.conn = conn
        self.pending = 0
        self.last_due = 0.0
        self.alive = True
        self.reason = ""


class Broker:
    """The routing core plus the frame-level frontend.

    Direct method calls (provision/subscribe/publish_area/send_direct) are the
    operation contract; ``accept`` wires a connection whose frames drive the
    same operations after a Register/attach handshake.
    """

    def __init__(
        self,
        clock: Clock,
        *,
        scheduler: Scheduler | None = None,
        broadcast_delay: DelayModel = DelayModel.zero(),
        direct_delay: DelayModel = DelayModel.zero(),
        delay_seed: int = 0,
        queue_cap: int = DEFAULT_QUEUE_CAP,
        log_path: str | Path | None = None,
    ) -> None:
        self._clock = clock
        self._scheduler = scheduler or Scheduler(clock)
        self._owns_scheduler = scheduler is None
        self._broadcast_delay = broadcast_delay
        self._direct_delay = direct_delay
        self._rng = random.Random(delay_seed)
        self._queue_cap = queue_cap
        self._lock = threading.RLock()
        self._areas: set[Address] = set()
        self._records: dict[Address, ProvisionRecord] = {}
        self._subs: dict[Address, set[Address]] = {}
        self._sessions: dict[Address, _Session] = {}
        self._cids = CorrelationIds("broker")
        self._log_lock = threading.Lock()
        self._log_file = open(log_path, "a", encoding="utf-8") if log_path else None
        self._listener: TcpListener | None = None

    # -- provisioning ---------------------------------------------------
    def declare_area(self, area: Address) -> None:
        with self._lock:
            self._areas.add(area)
            self._subs.setdefault(area, set())

    @property
    def areas(self) -> frozenset[Address]:
        with self._lock:
            return frozenset(self._areas)

    def provision(
        self,
        principal: Address,
        role: Role,
        areas: Iterable[Address] = (),
        *,
        reprovision: bool = False,
    ) -> ProvisionRecord:
        areas = frozenset(areas)
        with self._lock:
            if principal in self._records and not reprovision:
                raise AlreadyProvisioned(f"{principal} is already provisioned")
            unknown = areas - self._areas
            if unknown:
                raise UnknownArea(f"unknown areas: {sorted(a.token for a in unknown)}")
            record = ProvisionRecord(principal, role, areas)
            self._records[principal] = record
            return record

    def load_provision_file(self, path: str | Path) -> int:
        """Load a JSON provisioning file: a list of records, or an object
        with explicit "areas" plus "records"."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            areas = [parse_address(t) for t in raw.get("areas", [])]
            records = raw.get("records", [])
        else:
            areas, records = [], raw
        decoded = []
        for item in records:
            principal = parse_address(item["principal"])
            role = Role(item["role"])
            allowed = [parse_address(t) for t in item.get("areas", [])]
            decoded.append((principal, role, allowed))
        with self._lock:
            for a in areas:
                self.declare_area(a)
            for _, _, allowed in decoded:
                for a in allowed:
                    self.declare_area(a)
            for principal, role, allowed in decoded:
                self.provision(principal, role, allowed, reprovision=True)
        return len(decoded)

    def record_for(self, principal: Address) -> ProvisionRecord | None:
        with self._lock:
            return self._records.get(principal)

    # -- sessions ---------------------------------------------------------
    def attach(self, principal: Address, conn: FrameConn) -> None:
        """Bind a connection to a provisioned principal; replaces any old session."""
        with self._lock:
            if principal not in self._records:
                raise PermissionDenied(f"{principal} is not provisioned")
            old = self._sessions.get(principal)
            if old is not None:
                self._drop_session(principal, "Replaced")
            self._sessions[principal] = _Session(principal, conn)
        conn.set_receiver(lambda msg: self._on_frame(principal, msg))
        conn.on_close = lambda: self.disconnect(principal)
        self._log({"event": "attach", "principal": principal.token})

    def disconnect(self, principal: Address, *, reason: str = "Closed") -> None:
        with self._lock:
            if principal in self._sessions:
                self._drop_session(principal, reason)

    def mark_dead(self, principal: Address) -> None:
        """Simulate an undetected peer death: the session stays in the table
        until a delivery attempt fails against it."""
        with self._lock:
            sess = self._sessions.get(principal)
            if sess is not None:
                sess.alive = False

    def is_connected(self, principal: Address) -> bool:
        with self._lock:
            sess = self._sessions.get(principal)
            return sess is not None and sess.alive and not sess.conn.closed

    def _drop_session(self, principal: Address, reason: str) -> None:
        # caller holds the lock
        sess = self._sessions.pop(principal, None)
        for members in self._subs.values():
            members.discard(principal)
        if sess is not None:
            sess.alive = False
            sess.reason = reason
            conn = sess.conn
            self._scheduler.schedule(self._clock.now_ms(), conn.close)
        self._log({"event": "detach", "principal": principal.token, "reason": reason})

    # -- subscription ------------------------------------------------------
    def subscribe(self, jid: Address, area: Address) -> None:
        with self._lock:
            record = self._records.get(jid)
            if record is None or record.role is not Role.SUBSCRIBER or area not in record.allowed_areas:
                raise PermissionDenied(f"{jid} may not subscribe to {area}")
            if area not in self._areas:
                raise UnknownArea(area.token)
            sess = self._sessions.get(jid)
            if sess is None or not sess.alive:
                raise NotConnected(f"{jid} has no live session")
            self._subs[area].add(jid)

    def unsubscribe(self, jid: Address, area: Address) -> None:
        with self._lock:
            if area in self._subs:
                self._subs[area].discard(jid)

    def subscribers(self, area: Address) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(self._subs.get(area, ())))

    # -- delivery ----------------------------------------------------------
    def _check_publish(self, caller: Address, area: Address) -> None:
        record = self._records.get(caller)
        if record is None:
            raise PermissionDenied(f"{caller} is not provisioned")
        if area not in self._areas:
            raise UnknownArea(area.token)
        if record.role is Role.COMPONENT:
            return
        if record.role is Role.PUBLISHER and area in record.allowed_areas:
            return
        raise PermissionDenied(f"{caller} ({record.role.value}) may not publish to {area}")

    def publish_area(self, caller: Address, area: Address, msg: Message) -> DeliveryReport:
        with self._lock:
            self._check_publish(caller, area)
            ingress = self._clock.now_ms()
            stamped = msg.with_hop("broker_in", ingress)
            recipients = sorted(self._subs.get(area, ()))
            delivered, failed, egress = self._fan_out(
                stamped, recipients, self._broadcast_delay, ingress
            )
        report = DeliveryReport(msg.correlation_id, tuple(delivered), tuple(failed), ingress, egress)
        self._log(
            {
                "event": "publish",
                "cid": msg.correlation_id,
                "caller": caller.token,
                "area": area.token,
                **report.to_body(),
            }
        )
        return report

    def send_direct(self, caller: Address, target: Address, msg: Message) -> DeliveryReport:
        with self._lock:
            record = self._records.get(caller)
            if record is None or record.role is not Role.COMPONENT:
                raise PermissionDenied(f"{caller} may not send direct messages")
            ingress = self._clock.now_ms()
            stamped = msg.with_hop("broker_in", ingress)
            sess = self._sessions.get(target)
            if sess is None or not sess.alive or sess.conn.closed:
                if sess is not None:
                    self._drop_session(target, "Offline")
                report = DeliveryReport(msg.correlation_id, (), ((target, "Offline"),), ingress, ingress)
            else:
                delivered, failed, egress = self._fan_out(
                    stamped, [target], self._direct_delay, ingress
                )
                report = DeliveryReport(
                    msg.correlation_id, tuple(delivered), tuple(failed), ingress, egress
                )
        self._log(
            {
                "event": "direct",
                "cid": msg.correlation_id,
                "caller": caller.token,
                "jid": target.token,
                **report.to_body(),
            }
        )
        return report

    def _fan_out(
        self,
        stamped: Message,
        recipients: list[Address],
        delay: DelayModel,
        ingress: int,
    ) -> tuple[list[Address], list[tuple[Address, str]], int]:
        # caller holds the lock
        delivered: list[Address] = []
        failed: list[tuple[Address, str]] = []
        egress = ingress
        for target in recipients:
            sess = self._sessions.get(target)
            if sess is None or not sess.alive or sess.conn.closed:
                failed.append((target, "Offline"))
                if sess is not None:
                    self._drop_session(target, "Offline")
                continue
            if sess.pending >= self._queue_cap:
                failed.append((target, "SlowConsumer"))
                self._drop_session(target, "SlowConsumer")
                continue
            due = ingress + delay.sample(self._rng)
            due = max(due, sess.last_due)  # per-session FIFO even under jitter
            sess.last_due = due
            egress = max(egress, int(due))
            copy = stamped.with_hop("broker_out", int(due))
            sess.pending += 1
            self._scheduler.schedule(due, self._make_delivery(sess, copy))
            delivered.append(target)
        return delivered, failed, egress

    def _make_delivery(self, sess: _Session, msg: Message):
        def deliver() -> None:
            sess.pending -= 1
            try:
                sess.conn.send(msg)
            except Exception:
                self.disconnect(sess.principal, reason="Offline")

        return deliver

    # -- frame frontend ------------------------------------------------------
    def accept(self, conn: FrameConn) -> None:
        """Take ownership of an unattached connection; the first frame must be
        a Register/attach naming a provisioned principal."""
        conn.set_receiver(lambda msg: self._on_handshake(conn, msg))

    def _on_handshake(self, conn: FrameConn, msg: Message) -> None:
        body = msg.payload
        if msg.msg_type is not MsgType.REGISTER or body.get("op") != "attach":
            self._ack(conn, msg, ok=False, error="PermissionDenied", detail="attach first")
            conn.close()
            return
        try:
            principal = parse_address(body.get("principal", ""))
            self.attach(principal, conn)
        except FabricError as exc:
            self._ack(conn, msg, ok=False, error=type(exc).__name__, detail=str(exc))
            conn.close()
            return
        self._ack(conn, msg, ok=True, principal=principal.token)

    def _on_frame(self, principal: Address, msg: Message) -> None:
        try:
            if msg.msg_type is MsgType.REGISTER:
                self._handle_register(principal, msg)
            else:
                self._handle_app_message(principal, msg)
        except FabricError as exc:
            sess = self._session_conn(principal)
            if sess is not None:
                self._ack(sess, msg, ok=False, error=type(exc).__name__, detail=str(exc))

    def _session_conn(self, principal: Address) -> FrameConn | None:
        with self._lock:
            sess = self._sessions.get(principal)
            return sess.conn if sess is not None else None

    def _handle_register(self, principal: Address, msg: Message) -> None:
        body = msg.payload
        op = body.get("op")
        conn = self._session_conn(principal)
        if conn is None:
            return
        if op == "subscribe":
            self.subscribe(principal, parse_address(body["aid"]))
            self._ack(conn, msg, ok=True, op=op, aid=body["aid"])
        elif op == "unsubscribe":
            self.unsubscribe(principal, parse_address(body["aid"]))
            self._ack(conn, msg, ok=True, op=op, aid=body["aid"])
        elif op == "provision":
            self._require_component(principal)
            self.provision(
                parse_address(body["principal"]),
                Role(body["role"]),
                [parse_address(t) for t in body.get("areas", [])],
                reprovision=bool(body.get("reprovision", False)),
            )
            self._ack(conn, msg, ok=True, op=op)
        elif op == "declare_area":
            self._require_component(principal)
            self.declare_area(parse_address(body["aid"]))
            self._ack(conn, msg, ok=True, op=op)
        elif op == "attach":
            self._ack(conn, msg, ok=True, principal=principal.token)
        else:
            self._ack(conn, msg, ok=False, error="BadRequest", detail=f"unknown op {op!r}")

    def _require_component(self, principal: Address) -> None:
        record = self.record_for(principal)
        if record is None or record.role is not Role.COMPONENT:
            raise PermissionDenied(f"{principal} lacks the Component role")

    def _handle_app_message(self, principal: Address, msg: Message) -> None:
        conn = self._session_conn(principal)
        if msg.target.kind == "AID":
            report = self.publish_area(principal, msg.target, msg)
        elif msg.target.kind == "JID":
            report = self.send_direct(principal, msg.target, msg)
        else:
            raise PermissionDenied(f"broker does not route to {msg.target.kind} targets")
        if conn is not None:
            ack = Message(
                msg_type=MsgType.REGISTER_ACK,
                sender=msg.target,
                target=principal,
                correlation_id=msg.correlation_id,
                payload=report.to_body(),
            )
            try:
                conn.send(ack)
            except Exception:
                pass

    def _ack(self, conn: FrameConn, msg: Message, *, ok: bool, **extra) -> None:
        body = {"op": msg.payload.get("op", "ack"), "ok": ok, **extra}
        ack = Message(
            msg_type=MsgType.REGISTER_ACK,
            sender=msg.target,
            target=msg.sender,
            correlation_id=msg.correlation_id,
            payload=body,
        )
        try:
            conn.send(ack)
        except Exception:
            pass

    # -- server plumbing ---------------------------------------------------
    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._listener = TcpListener(host, port, self.accept)
        return self._listener.port

    def _log(self, record: dict) -> None:
        if self._log_file is None:
            return
        with self._log_lock:
            self._log_file.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_file.flush()

    def close(self) -> None:
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            for principal in list(self._sessions):
                self._drop_session(principal, "Shutdown")
        if self._owns_scheduler:
            self._scheduler.close()
        if self._log_file is not None:
            with self._log_lock:
                self._log_file.close()
            self._log_file = None
