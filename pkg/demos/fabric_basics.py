#!/usr/bin/env python3
"""Tour of the messaging fabric: addresses, frames, and broker semantics.

Walks through the typed identifier scheme, the newline-delimited JSON wire
format, role-based provisioning, area broadcast, and one-to-one delivery --
everything else in the system is built on these pieces.
"""

from gridfabric import (
    Broker,
    Clock,
    Message,
    MsgType,
    Role,
    aid,
    decode_frame,
    encode_frame,
    jid,
    parse_address,
)
from gridfabric.transport import MemoryConn

COMPONENT = jid(1_000_000)  # the cloud's reserved broker identity


def section(title):
    print(f"\n=== {title} ===")


# ---------------------------------------------------------------------------
section("Typed addresses")
# Seven identifier kinds cover the whole deployment: areas (AID), families
# (FID), users (UID), their phones (DID), gateways (GID), the gateway's
# broker session (JID), and end devices (NID).
for token in ("AID2", "FID1", "UID5", "DID9", "GID3", "JID2", "NID17"):
    addr = parse_address(token)
    print(f"  {token:7s} -> kind={addr.kind} number={addr.num}")

try:
    parse_address("XID1")
except Exception as exc:
    print(f"  XID1    -> rejected: {exc}")

# ---------------------------------------------------------------------------
section("Wire frames")
msg = Message(
    MsgType.CONTROL,
    sender=parse_address("UID5"),
    target=parse_address("JID2"),
    correlation_id="UID5-1",
    payload={"nid": "NID6", "setting": {"name": "setpoint_c", "value": 24}},
)
line = encode_frame(msg)
print("  encoded:", line.decode().strip())
print("  roundtrips exactly:", decode_frame(line) == msg)

stamped = msg.with_hop("client_send", 0).with_hop("cloud_recv", 71)
print("  hop chain:", stamped.hop_timestamps)

# ---------------------------------------------------------------------------
section("Broker: provisioning, broadcast, one-to-one")
broker = Broker(Clock.stepped())
broker.declare_area(aid(1))
broker.declare_area(aid(2))
broker.provision(COMPONENT, Role.COMPONENT)  # may publish anywhere + direct
for n, area in ((1, 1), (2, 2), (3, 1)):
    broker.provision(jid(n), Role.SUBSCRIBER, [aid(area)])

# each "gateway" here is just the client end of an in-memory frame pipe
inboxes = {}
for n in (1, 2, 3):
    client_end, server_end = MemoryConn.pair()
    broker.attach(jid(n), server_end)
    inboxes[n] = client_end
    broker.subscribe(jid(n), aid(1) if n != 2 else aid(2))

price = Message(MsgType.PRICE, COMPONENT, aid(1), "c-1", {"price_per_kwh": 0.23})
report = broker.publish_area(COMPONENT, aid(1), price)
print("  broadcast to AID1 delivered to:", [a.token for a in report.delivered_to])

control = Message(MsgType.CONTROL, COMPONENT, jid(2), "c-2",
                  {"nid": "NID6", "setting": {"name": "power", "value": "off"}})
report = broker.send_direct(COMPONENT, jid(2), control)
print("  direct to JID2 delivered to:  ", [a.token for a in report.delivered_to])

for n, inbox in inboxes.items():
    got = []
    while True:
        m = inbox.try_recv()
        if m is None:
            break
        got.append(m.msg_type.value)
    print(f"  JID{n} received: {got}")

# subscribers may not publish; the broker enforces roles
try:
    broker.publish_area(jid(1), aid(1), price)
except Exception as exc:
    print("  JID1 publishing ->", type(exc).__name__)

broker.close()
print("\ndone.")
