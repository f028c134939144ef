"""Typed addresses, the message vocabulary, and the wire frame codec.

Every process in the fabric speaks the same wire format: one JSON object per
line, UTF-8, keys ``v`` (schema version), ``t`` (message type), ``src``/``dst``
(address tokens), ``cid`` (correlation id), ``hops`` (list of
``[hop_name, ms]`` pairs), ``body`` (type-specific object).  Encoding is
deterministic (sorted keys, compact separators), so identical messages produce
identical bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import total_ordering
from typing import Any, Iterator

SCHEMA_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024


class FabricError(Exception):
    """Base class for every error raised by this package."""


class MalformedAddress(FabricError):
    pass


class EncodeError(FabricError):
    pass


class FrameDecodeError(FabricError):
    pass


class UnknownArea(FabricError):
    pass


ADDRESS_KINDS = ("AID", "FID", "UID", "DID", "GID", "JID", "NID")
_KIND_ORDER = {k: i for i, k in enumerate(ADDRESS_KINDS)}
_ADDRESS_RE = re.compile(r"^(AID|FID|UID|DID|GID|JID|NID)([1-9][0-9]*)$")


@total_ordering
@dataclass(frozen=True)
class Address:
    """A typed identifier such as AID1 or JID2, ordered by (kind, number)."""

    kind: str
    num: int

    def __post_init__(self) -> None:
        if self.kind not in _KIND_ORDER:
            raise MalformedAddress(f"unknown address kind {self.kind!r}")
        if not isinstance(self.num, int) or isinstance(self.num, bool) or self.num < 1:
            raise MalformedAddress(f"address number must be a positive int, got {self.num!r}")

    @property
    def token(self) -> str:
        return f"{self.kind}{self.num}"

    def __str__(self) -> str:
        return self.token

    def __lt__(self, other: "Address") -> bool:
        if not isinstance(other, Address):
            return NotImplemented
        return (_KIND_ORDER[self.kind], self.num) < (_KIND_ORDER[other.kind], other.num)


def parse_address(token: str) -> Address:
    """Parse an address token like "AID2"; raise MalformedAddress otherwise."""
    if not isinstance(token, str):
        raise MalformedAddress(f"address token must be a string, got {type(token).__name__}")
    m = _ADDRESS_RE.match(token)
    if m is None:
        raise MalformedAddress(f"malformed address token {token!r}")
    return Address(m.group(1), int(m.group(2)))


def aid(n: int) -> Address:
    return Address("AID", n)


def fid(n: int) -> Address:
    return Address("FID", n)


def uid(n: int) -> Address:
    return Address("UID", n)


def did(n: int) -> Address:
    return Address("DID", n)


def gid(n: int) -> Address:
    return Address("GID", n)


def jid(n: int) -> Address:
    return Address("JID", n)


def nid(n: int) -> Address:
    return Address("NID", n)


class MsgType(str, Enum):
    TELEMETRY = "Telemetry"
    CONTROL = "Control"
    CONTROL_ACK = "ControlAck"
    PRICE = "Price"
    DRM_DIRECTIVE = "DrmDirective"
    THRESHOLD_ALERT = "ThresholdAlert"
    SECURITY_ALARM = "SecurityAlarm"
    REGISTER = "Register"
    REGISTER_ACK = "RegisterAck"


_MSG_TYPES = {m.value: m for m in MsgType}

Hop = tuple[str, int]


@dataclass(frozen=True)
class Message:
    """One fabric message.  Immutable; stamping a hop returns a new Message."""

    msg_type: MsgType
    sender: Address
    target: Address
    correlation_id: str
    payload: dict[str, Any] = field(default_factory=dict)
    hop_timestamps: tuple[Hop, ...] = ()

    def with_hop(self, name: str, ms: int) -> "Message":
        """Append a hop timestamp, clamped so the sequence stays non-decreasing."""
        if self.hop_timestamps:
            ms = max(ms, self.hop_timestamps[-1][1])
        return replace(self, hop_timestamps=self.hop_timestamps + ((name, int(ms)),))

    def hop_ms(self, name: str) -> int | None:
        for hop_name, ms in self.hop_timestamps:
            if hop_name == name:
                return ms
        return None


def _validate_control_body(body: dict[str, Any]) -> None:
    # Invariant: a Control names exactly one NID and one setting.
    nid_token = body.get("nid")
    setting = body.get("setting")
    if not isinstance(nid_token, str):
        raise EncodeError("Control payload must name exactly one nid")
    node = parse_address(nid_token)
    if node.kind != "NID":
        raise EncodeError(f"Control nid must be a NID token, got {nid_token!r}")
    if not isinstance(setting, dict) or set(setting) != {"name", "value"}:
        raise EncodeError("Control payload must carry one setting {name, value}")
    if not isinstance(setting["name"], str):
        raise EncodeError("Control setting name must be a string")


def _check_payload(msg_type: MsgType, body: dict[str, Any], err: type[FabricError]) -> None:
    if not isinstance(body, dict):
        raise err("message payload must be an object")
    if msg_type is MsgType.CONTROL:
        try:
            _validate_control_body(body)
        except (EncodeError, MalformedAddress) as exc:
            raise err(str(exc)) from None


def encode_frame(msg: Message) -> bytes:
    """Encode a message as one newline-terminated JSON line (deterministic)."""
    _check_payload(msg.msg_type, msg.payload, EncodeError)
    obj = {
        "v": SCHEMA_VERSION,
        "t": msg.msg_type.value,
        "src": msg.sender.token,
        "dst": msg.target.token,
        "cid": msg.correlation_id,
        "hops": [[name, ms] for name, ms in msg.hop_timestamps],
        "body": msg.payload,
    }
    try:
        line = json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise EncodeError(f"unencodable payload: {exc}") from None
    data = line.encode("utf-8") + b"\n"
    if len(data) > MAX_FRAME_BYTES:
        raise EncodeError(f"frame of {len(data)} bytes exceeds the {MAX_FRAME_BYTES} byte limit")
    return data


def _decode_hops(raw: Any) -> tuple[Hop, ...]:
    if not isinstance(raw, list):
        raise FrameDecodeError("hops must be a list")
    hops: list[Hop] = []
    last = None
    for item in raw:
        if not isinstance(item, list) or len(item) != 2:
            raise FrameDecodeError("each hop must be a [name, ms] pair")
        name, ms = item
        if not isinstance(name, str):
            raise FrameDecodeError("hop name must be a string")
        if not isinstance(ms, int) or isinstance(ms, bool) or ms < 0:
            raise FrameDecodeError("hop time must be a non-negative integer")
        if last is not None and ms < last:
            raise FrameDecodeError("hop times must be non-decreasing")
        last = ms
        hops.append((name, ms))
    return tuple(hops)


def decode_frame(line: bytes | str) -> Message:
    """Decode one frame line; any invalid input raises FrameDecodeError."""
    if isinstance(line, bytes):
        if len(line) > MAX_FRAME_BYTES:
            raise FrameDecodeError("frame exceeds the size limit")
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FrameDecodeError(f"frame is not valid UTF-8: {exc}") from None
    else:
        text = line
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FrameDecodeError(f"frame is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise FrameDecodeError("frame must be a JSON object")
    # Reject unknown schema versions before touching any other field.
    if obj.get("v") != SCHEMA_VERSION:
        raise FrameDecodeError(f"unsupported schema version {obj.get('v')!r}")
    expected = {"v", "t", "src", "dst", "cid", "hops", "body"}
    if set(obj) != expected:
        raise FrameDecodeError(f"frame keys must be exactly {sorted(expected)}")
    t = obj["t"]
    if t not in _MSG_TYPES:
        raise FrameDecodeError(f"unknown message type {t!r}")
    try:
        src = parse_address(obj["src"])
        dst = parse_address(obj["dst"])
    except MalformedAddress as exc:
        raise FrameDecodeError(str(exc)) from None
    cid = obj["cid"]
    if not isinstance(cid, str) or not cid:
        raise FrameDecodeError("cid must be a non-empty string")
    hops = _decode_hops(obj["hops"])
    body = obj["body"]
    _check_payload(_MSG_TYPES[t], body, FrameDecodeError)
    return Message(
        msg_type=_MSG_TYPES[t],
        sender=src,
        target=dst,
        correlation_id=cid,
        payload=body,
        hop_timestamps=hops,
    )


class FrameReader:
    """Incremental line splitter for a frame byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[Message]:
        self._buf.extend(data)
        if len(self._buf) > MAX_FRAME_BYTES and b"\n" not in self._buf:
            raise FrameDecodeError("frame exceeds the size limit without a line break")
        while True:
            idx = self._buf.find(b"\n")
            if idx < 0:
                return
            line = bytes(self._buf[: idx + 1])
            del self._buf[: idx + 1]
            yield decode_frame(line)


class CorrelationIds:
    """Per-process correlation-id allocator: "<principal>-<n>"."""

    def __init__(self, principal: Address | str) -> None:
        self._prefix = str(principal)
        self._n = 0

    def next(self) -> str:
        self._n += 1
        return f"{self._prefix}-{self._n}"
