"""Scripted consumer client: the stand-in for the paper's mobile app.

A client holds one service-channel connection in pull mode: requests are
synchronous (send, then read until the matching correlation id), and any push
frames encountered along the way are kept in ``pushes`` in arrival order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .model import Address, CorrelationIds, FabricError, Message, MsgType, parse_address
from .transport import Clock, FrameConn


class ClientError(FabricError):
    pass


@dataclass
class PushRecord:
    message: Message
    received_ms: int


class ConsumerClient:
    def __init__(self, did: Address, conn: FrameConn, clock: Clock,
                 component: Address | None = None, request_timeout_s: float = 10.0) -> None:
        self.did = did
        self.conn = conn
        self.clock = clock
        self.component = component or Address("JID", 1_000_000)
        self.timeout_s = request_timeout_s
        self.uid: Address | None = None
        self.pushes: list[PushRecord] = []
        self._cids = CorrelationIds(did)

    # -- session -----------------------------------------------------------
    def attach(self) -> None:
        ack = self._request(MsgType.REGISTER, {"op": "attach_client", "did": self.did.token})
        if not ack.payload.get("ok"):
            raise ClientError(f"attach failed: {ack.payload.get('error')}")
        self.uid = parse_address(ack.payload["uid"])

    def close(self) -> None:
        self.conn.close()

    # -- requests ------------------------------------------------------------
    def _request(self, msg_type: MsgType, body: dict, sender: Address | None = None) -> Message:
        cid = self._cids.next()
        msg = Message(msg_type, sender or self.did, self.component, cid, body)
        msg = msg.with_hop("client_send", self.clock.now_ms())
        self.conn.send(msg)
        return self._read_until(cid)

    def _read_until(self, cid: str) -> Message:
        if self.clock.virtual:
            # stepped stacks answer inline; everything is already in the inbox
            while True:
                msg = self.conn.try_recv()
                if msg is None:
                    raise ClientError(f"no response for {cid}")
                if msg.correlation_id == cid and msg.msg_type in (
                    MsgType.REGISTER_ACK, MsgType.CONTROL_ACK,
                ):
                    return msg
                self.pushes.append(PushRecord(msg, self.clock.now_ms()))
        deadline = time.monotonic() + self.timeout_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ClientError(f"timed out waiting for {cid}")
            msg = self.conn.recv(timeout=remaining)
            if msg.correlation_id == cid and msg.msg_type in (
                MsgType.REGISTER_ACK, MsgType.CONTROL_ACK,
            ):
                return msg
            self.pushes.append(PushRecord(msg, self.clock.now_ms()))

    def drain_pushes(self, wait_s: float = 0.0) -> list[PushRecord]:
        """Pull any pushes sitting in the inbox (optionally waiting a little)."""
        if wait_s > 0:
            deadline = time.monotonic() + wait_s
            while time.monotonic() < deadline:
                try:
                    msg = self.conn.recv(timeout=max(0.01, deadline - time.monotonic()))
                except Exception:
                    break
                self.pushes.append(PushRecord(msg, self.clock.now_ms()))
        while True:
            msg = self.conn.try_recv()
            if msg is None:
                return self.pushes
            self.pushes.append(PushRecord(msg, self.clock.now_ms()))

    # -- operations ---------------------------------------------------------------
    def automation(self, nid: Address, setting: dict) -> dict:
        """Send a control command for one of the family's devices."""
        sender = self.uid or self.did
        send_ms = self.clock.now_ms()
        reply = self._request(
            MsgType.CONTROL, {"nid": nid.token, "setting": setting}, sender=sender
        )
        recv_ms = self.clock.now_ms()
        ok = bool(reply.payload.get("ok")) or (
            reply.msg_type is MsgType.CONTROL_ACK
            and all(r[1] for r in reply.payload.get("results", []))
        )
        return {
            "ok": ok,
            "error": reply.payload.get("error"),
            "results": reply.payload.get("results", []),
            "hops": reply.hop_timestamps,
            "sent_ms": send_ms,
            "received_ms": recv_ms,
            "cid": reply.correlation_id,
        }

    def query_energy(self, from_ms: int = 0, to_ms: int = 2**62) -> dict:
        reply = self._request(MsgType.REGISTER, {
            "op": "query_energy", "uid": (self.uid or self.did).token,
            "from_ms": from_ms, "to_ms": to_ms,
        })
        if not reply.payload.get("ok"):
            raise ClientError(f"query_energy failed: {reply.payload.get('error')}")
        return reply.payload

    def set_away(self, fid: Address, away: bool) -> None:
        reply = self._request(MsgType.REGISTER, {"op": "set_away", "fid": fid.token, "away": away})
        if not reply.payload.get("ok"):
            raise ClientError(f"set_away failed: {reply.payload.get('error')}")

    def set_threshold(self, threshold_wh: float) -> None:
        reply = self._request(MsgType.REGISTER, {
            "op": "set_threshold", "uid": (self.uid or self.did).token,
            "threshold_wh": threshold_wh,
        })
        if not reply.payload.get("ok"):
            raise ClientError(f"set_threshold failed: {reply.payload.get('error')}")

    def publish_price(self, aid: Address, price_per_kwh: float,
                      effective_at_ms: int | None = None) -> dict:
        reply = self._request(MsgType.REGISTER, {
            "op": "publish_price", "aid": aid.token, "price_per_kwh": price_per_kwh,
            "effective_at_ms": effective_at_ms if effective_at_ms is not None else self.clock.now_ms(),
        })
        return {"cid": reply.correlation_id, "hops": reply.hop_timestamps, **reply.payload}

    def price_direct(self, gid: Address, price_per_kwh: float) -> dict:
        reply = self._request(MsgType.REGISTER, {
            "op": "price_direct", "gid": gid.token, "price_per_kwh": price_per_kwh,
        })
        return {"cid": reply.correlation_id, "hops": reply.hop_timestamps, **reply.payload}

    def dispatch_drm(self, aid: Address, directive: dict) -> dict:
        reply = self._request(MsgType.REGISTER, {
            "op": "dispatch_drm", "aid": aid.token, "directive": directive,
        })
        return {"cid": reply.correlation_id, "hops": reply.hop_timestamps, **reply.payload}
