"""The per-home gateway: broker session, device links, poll/upload loop.

Control handling takes priority over polling on a single link scheduler: one
transfer runs at a time, and a control that arrives mid-poll jumps the queue,
so at most the transfer already in flight completes before the control's
first transfer starts.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .energy import Metric
from .devices import Device, Sensor, make_device
from .model import Address, CorrelationIds, FabricError, Message, MsgType, parse_address
from .transport import Clock, FrameConn

PRIO_CONTROL = 0
PRIO_POLL = 1

DEFAULT_RETRY_TIMEOUT_MS = 500
DEFAULT_RETRIES = 2


class GatewayError(FabricError):
    pass


class UnknownNid(GatewayError):
    pass


class DuplicateNid(GatewayError):
    pass


class LinkTimeout(GatewayError):
    pass


@dataclass(frozen=True)
class LinkModel:
    """Simulated non-IP device link: latency band plus loss probability."""

    protocol: str  # ZWaveLike | ZigbeeLike | BleLike
    mean_ms: float
    jitter_ms: float = 0.0
    loss: float = 0.0

    def __post_init__(self) -> None:
        if self.mean_ms <= 0:
            raise GatewayError("link mean latency must be positive")
        if not (0.0 <= self.loss < 1.0):
            raise GatewayError("link loss must lie in [0, 1)")

    def sample_latency(self, rng: random.Random) -> float:
        return max(0.0, rng.uniform(self.mean_ms - self.jitter_ms, self.mean_ms + self.jitter_ms))

    @classmethod
    def zwave(cls, loss: float = 0.0) -> "LinkModel":
        # 785 ms anchors the measured control+ack time on the Z-wave path.
        return cls("ZWaveLike", 785.0, 78.5, loss)

    @classmethod
    def zigbee(cls, loss: float = 0.0) -> "LinkModel":
        return cls("ZigbeeLike", 150.0, 15.0, loss)

    @classmethod
    def ble(cls, loss: float = 0.0) -> "LinkModel":
        return cls("BleLike", 100.0, 10.0, loss)

    @classmethod
    def instant(cls) -> "LinkModel":
        return cls("BleLike", 1e-6, 0.0, 0.0)

    @classmethod
    def from_dict(cls, raw: dict) -> "LinkModel":
        return cls(
            protocol=raw.get("protocol", "ZWaveLike"),
            mean_ms=float(raw.get("mean_ms", 785.0)),
            jitter_ms=float(raw.get("jitter_ms", 0.0)),
            loss=float(raw.get("loss", 0.0)),
        )


@dataclass
class LinkResult:
    nid: Address
    op: str  # "read" | "write"
    ok: bool
    value: object = None
    error: str | None = None
    attempts: int = 1
    elapsed_ms: float = 0.0


@dataclass
class GatewayConfig:
    gid: Address
    jid: Address
    aid: Address
    poll_interval_s: float = 10.0
    link_seed: int = 0
    retries: int = DEFAULT_RETRIES
    retry_timeout_ms: float = DEFAULT_RETRY_TIMEOUT_MS
    ring_hours: float = 24.0
    broker_endpoint: tuple[str, int] | None = None
    cloud_endpoint: tuple[str, int] | None = None

    def __post_init__(self) -> None:
        if self.poll_interval_s <= 0:
            raise GatewayError("poll_interval must be positive")

    @classmethod
    def from_json(cls, path: str | Path) -> tuple["GatewayConfig", list[tuple[Address, str, dict, LinkModel]]]:
        """Load config plus the device table [(nid, kind, extras, link)]."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = cls(
            gid=parse_address(raw["gid"]),
            jid=parse_address(raw["jid"]),
            aid=parse_address(raw["aid"]),
            poll_interval_s=float(raw.get("poll_interval_s", 10.0)),
            link_seed=int(raw.get("link_seed", 0)),
            broker_endpoint=tuple(raw["broker"]) if "broker" in raw else None,
            cloud_endpoint=tuple(raw["cloud"]) if "cloud" in raw else None,
        )
        table = []
        for item in raw.get("devices", []):
            nid = parse_address(item["nid"])
            link = LinkModel.from_dict(item.get("link", {}))
            extras = {k: item[k] for k in ("rating_w", "metric") if k in item}
            table.append((nid, item["kind"], extras, link))
        seen = {t[0] for t in table}
        if len(seen) != len(table):
            raise GatewayError("device table NIDs must be unique")
        return cfg, table


class _Entry:
    __slots__ = ("device", "link")

    def __init__(self, device: Device, link: LinkModel) -> None:
        self.device = device
        self.link = link


class Gateway:
    """Sans-IO gateway core: wire it to broker/cloud conns and it runs."""

    def __init__(
        self,
        config: GatewayConfig,
        clock: Clock,
        *,
        timescale: float = 1.0,
        component_jid: Address | None = None,
        transfer_recorder: Callable[[dict], None] | None = None,
        delivery_recorder: Callable[[Address, Message, int], None] | None = None,
        local_log: str | Path | None = None,
    ) -> None:
        self.config = config
        self.clock = clock
        self.timescale = timescale
        self.component_jid = component_jid or Address("JID", 1_000_000)
        self._transfer_recorder = transfer_recorder
        self._delivery_recorder = delivery_recorder
        self._rng = random.Random(config.link_seed)
        self._cids = CorrelationIds(config.gid)
        self._devices: dict[Address, _Entry] = {}
        self._dev_lock = threading.RLock()
        self._broker_conn: FrameConn | None = None
        self._cloud_conn: FrameConn | None = None
        self._pending_acks: dict[str, tuple[threading.Event, list]] = {}
        self._pending_lock = threading.Lock()
        self._batch_seq = 0
        self._buffered_batches: deque[dict] = deque(maxlen=10)
        ring_len = max(1, int(config.ring_hours * 3600.0 / config.poll_interval_s))
        self._ring: deque[dict] = deque(maxlen=ring_len)
        self._log_file = open(local_log, "a", encoding="utf-8") if local_log else None
        self._log_lock = threading.Lock()
        # single link scheduler; threaded mode runs it on a worker thread
        self._queue: list[tuple[int, int, object]] = []
        self._qlock = threading.Condition()
        self._qseq = itertools.count()
        self._stopped = False
        self._worker: threading.Thread | None = None
        self._poller: threading.Thread | None = None
        if not clock.virtual:
            self._worker = threading.Thread(
                target=self._link_worker, name=f"link-{config.gid.token}", daemon=True
            )
            self._worker.start()

    # -- device table -----------------------------------------------------
    def attach_device(self, nid: Address, device: Device, link: LinkModel,
                      register: Callable[[Address, str], None] | None = None) -> None:
        with self._dev_lock:
            if nid in self._devices:
                raise DuplicateNid(f"{nid} is already attached")
            self._devices[nid] = _Entry(device, link)
        if register is not None:
            register(nid, device.kind)
        self._log_event({"event": "attach_device", "nid": nid.token, "kind": device.kind})

    def detach_device(self, nid: Address) -> None:
        with self._dev_lock:
            if nid not in self._devices:
                raise UnknownNid(f"{nid} is not attached")
            del self._devices[nid]
        self._log_event({"event": "detach_device", "nid": nid.token})

    def device(self, nid: Address) -> Device:
        with self._dev_lock:
            entry = self._devices.get(nid)
            if entry is None:
                raise UnknownNid(f"{nid} is not attached")
            return entry.device

    def devices(self) -> dict[Address, Device]:
        with self._dev_lock:
            return {n: e.device for n, e in self._devices.items()}

    def owned_nids(self) -> tuple[Address, ...]:
        with self._dev_lock:
            return tuple(sorted(self._devices))

    # -- connections --------------------------------------------------------
    def connect_broker(self, conn: FrameConn) -> None:
        self._broker_conn = conn
        conn.set_receiver(self._on_broker_frame)
        self._request(conn, {"op": "attach", "principal": self.config.jid.token},
                      sender=self.config.jid, target=self.component_jid)
        self._request(conn, {"op": "subscribe", "aid": self.config.aid.token},
                      sender=self.config.jid, target=self.component_jid)

    def connect_cloud(self, conn: FrameConn) -> None:
        self._cloud_conn = conn
        conn.set_receiver(self._on_cloud_frame)
        self._request(conn, {"op": "attach_gateway", "gid": self.config.gid.token},
                      sender=self.config.gid, target=self.component_jid)

    def _request(self, conn: FrameConn, body: dict, *, sender: Address, target: Address,
                 timeout: float = 5.0) -> Message | None:
        cid = self._cids.next()
        event = threading.Event()
        slot: list = []
        with self._pending_lock:
            self._pending_acks[cid] = (event, slot)
        msg = Message(MsgType.REGISTER, sender, target, cid, body)
        conn.send(msg)
        # stepped stacks resolve inline during send; a real clock may wait
        ok = event.is_set() if self.clock.virtual else event.wait(timeout)
        if not ok:
            with self._pending_lock:
                self._pending_acks.pop(cid, None)
            return None
        return slot[0] if slot else None

    def _resolve_ack(self, msg: Message) -> bool:
        with self._pending_lock:
            entry = self._pending_acks.pop(msg.correlation_id, None)
        if entry is None:
            return False
        event, slot = entry
        slot.append(msg)
        event.set()
        return True

    # -- broker side ----------------------------------------------------------
    def _on_broker_frame(self, msg: Message) -> None:
        if msg.msg_type is MsgType.REGISTER_ACK:
            self._resolve_ack(msg)
            return
        now = self.clock.now_ms()
        stamped = msg.with_hop("gw_recv", now)
        if self._delivery_recorder is not None:
            self._delivery_recorder(self.config.jid, stamped, now)
        self._log_event({"event": "received", "t": msg.msg_type.value,
                         "cid": msg.correlation_id, "at_ms": now})
        if msg.msg_type in (MsgType.CONTROL, MsgType.DRM_DIRECTIVE):
            self.handle_control(stamped)

    def handle_control(self, msg: Message) -> None:
        """Resolve targets and queue priority link writes; acks when all land."""
        targets: list[tuple[Address, dict]] = []
        unknown: list[Address] = []
        if msg.msg_type is MsgType.CONTROL:
            node = parse_address(msg.payload["nid"])
            with self._dev_lock:
                present = node in self._devices
            if present:
                targets.append((node, msg.payload["setting"]))
            else:
                unknown.append(node)
        else:
            targets = self._directive_targets(msg.payload)
        results: list[list] = [[n.token, False, "UnknownNid"] for n in unknown]
        if not targets:
            self._send_control_ack(msg, results)
            return
        remaining = [len(targets)]
        res_lock = threading.Lock()

        def on_done(result: LinkResult) -> None:
            with res_lock:
                results.append([result.nid.token, result.ok, result.error])
                remaining[0] -= 1
                last = remaining[0] == 0
            if last:
                self._send_control_ack(msg, results)

        for node, setting in targets:
            self._submit(PRIO_CONTROL, node, "write", setting, on_done)

    def _directive_targets(self, body: dict) -> list[tuple[Address, dict]]:
        action = body.get("action")
        kind = body.get("device_kind")
        named = body.get("nids")
        with self._dev_lock:
            owned = dict(self._devices)
        if named is not None:
            nodes = [parse_address(t) for t in named]
            nodes = [n for n in nodes if n in owned]  # foreign NIDs ignored silently
        else:
            nodes = [n for n, e in owned.items() if kind is None or e.device.kind == kind]
        nodes.sort()
        if action == "setpoint_delta":
            setting = {"name": "setpoint_delta_c", "value": body.get("delta_c", 0)}
            nodes = [n for n in nodes if owned[n].device.kind == "AC"]
        elif action == "off":
            if kind == "Light":
                setting = {"name": "shed", "value": True}
            else:
                setting = {"name": "power", "value": "off"}
        elif action == "restore":
            setting = {"name": "shed", "value": False}
            nodes = [n for n in nodes if owned[n].device.kind == "Light"]
        else:
            return []
        return [(n, setting) for n in nodes]

    def _send_control_ack(self, msg: Message, results: list[list]) -> None:
        results = sorted(results, key=lambda r: parse_address(r[0]))
        ack = Message(
            MsgType.CONTROL_ACK,
            self.config.gid,
            self.component_jid,
            msg.correlation_id,
            {"results": results, "gid": self.config.gid.token},
            msg.hop_timestamps,
        ).with_hop("link_done", self.clock.now_ms())
        conn = self._cloud_conn
        if conn is not None:
            try:
                conn.send(ack)
            except Exception:
                pass
        self._log_event({"event": "control_ack", "cid": msg.correlation_id, "results": results})

    # -- cloud side -------------------------------------------------------------
    def _on_cloud_frame(self, msg: Message) -> None:
        if msg.msg_type is MsgType.REGISTER_ACK:
            self._resolve_ack(msg)

    def poll_cycle(self) -> dict:
        """Read every pollable device once, upload (with any buffered batches)."""
        with self._dev_lock:
            nodes = sorted(n for n, e in self._devices.items() if e.device.kind != "Camera")
        done = threading.Event()
        remaining = [len(nodes)]
        res_lock = threading.Lock()
        collected: dict[Address, LinkResult] = {}

        def on_done(result: LinkResult) -> None:
            with res_lock:
                collected[result.nid] = result
                remaining[0] -= 1
                if remaining[0] == 0:
                    done.set()

        for node in nodes:
            self._submit(PRIO_POLL, node, "read", None, on_done)
        if nodes and not self.clock.virtual:
            done.wait(timeout=120.0)
        self._batch_seq += 1
        samples, omitted = [], []
        for node in nodes:
            result = collected.get(node)
            if result is not None and result.ok:
                samples.append(result.value.to_wire())
            else:
                omitted.append([node.token, (result.error if result else "LinkTimeout") or "LinkTimeout"])
        batch = {"seq": self._batch_seq, "gid": self.config.gid.token,
                 "samples": samples, "omitted": omitted}
        self._ring.append(batch)
        self._log_event({"event": "batch", **batch})
        self._upload([*(b for b in list(self._buffered_batches)), batch])
        return batch

    def upload_batch(self, samples: list[list], omitted: list[list] | None = None) -> bool:
        """Upload an explicit batch (scenario/test hook); True when accepted."""
        self._batch_seq += 1
        batch = {"seq": self._batch_seq, "gid": self.config.gid.token,
                 "samples": samples, "omitted": list(omitted or [])}
        self._ring.append(batch)
        return self._upload([*(b for b in list(self._buffered_batches)), batch])

    def _upload(self, batches: list[dict]) -> bool:
        conn = self._cloud_conn
        ok = False
        if conn is not None and not conn.closed:
            reply = None
            try:
                reply = self._request_upload(conn, batches)
            except Exception:
                reply = None
            ok = bool(reply is not None and reply.payload.get("ok", False))
        if ok:
            self._buffered_batches.clear()
            self._log_event({"event": "batch_uploaded", "count": len(batches)})
        else:
            newest = batches[-1]
            self._buffered_batches.append(newest)  # deque cap drops the oldest
            self._log_event({"event": "batch_buffered", "buffered": len(self._buffered_batches)})
        return ok

    def _request_upload(self, conn: FrameConn, batches: list[dict]) -> Message | None:
        cid = self._cids.next()
        event = threading.Event()
        slot: list = []
        with self._pending_lock:
            self._pending_acks[cid] = (event, slot)
        msg = Message(MsgType.TELEMETRY, self.config.gid, self.component_jid, cid,
                      {"batches": batches}).with_hop("gw_send", self.clock.now_ms())
        conn.send(msg)
        ok = event.is_set() if self.clock.virtual else event.wait(5.0)
        if not ok:
            with self._pending_lock:
                self._pending_acks.pop(cid, None)
            return None
        return slot[0] if slot else None

    def recent_samples(self) -> list[dict]:
        return list(self._ring)

    # -- link scheduler -----------------------------------------------------------
    def _submit(self, prio: int, nid: Address, op: str, setting: dict | None,
                on_done: Callable[[LinkResult], None]) -> None:
        job = (nid, op, setting, on_done)
        if self.clock.virtual:
            self._execute(prio, *job)
            return
        with self._qlock:
            heapq.heappush(self._queue, (prio, next(self._qseq), job))
            self._qlock.notify()

    def _link_worker(self) -> None:
        while True:
            with self._qlock:
                while not self._queue and not self._stopped:
                    self._qlock.wait(timeout=0.5)
                if self._stopped:
                    leftovers = [job for _, _, job in self._queue]
                    self._queue.clear()
                    for nid_, op, _setting, on_done in leftovers:
                        on_done(LinkResult(nid_, op, ok=False, error="Stopped"))
                    return
                prio, _, job = heapq.heappop(self._queue)
            self._execute(prio, *job)

    def _execute(self, prio: int, nid: Address, op: str, setting: dict | None,
                 on_done: Callable[[LinkResult], None]) -> None:
        start = self.clock.now_ms()
        if self._transfer_recorder is not None:
            self._transfer_recorder({"prio": prio, "nid": nid.token, "op": op,
                                     "start_ms": start, "wall": time.monotonic()})
        self._log_event({"event": "transfer_start", "nid": nid.token, "op": op,
                         "prio": prio})
        result = self.link_transfer(nid, op, setting)
        self._log_event({"event": "transfer_end", "nid": nid.token, "op": op,
                         "ok": result.ok, "elapsed_ms": result.elapsed_ms})
        on_done(result)

    def link_transfer(self, nid: Address, op: str, setting: dict | None = None) -> LinkResult:
        """One serialized transfer over the device's simulated link."""
        with self._dev_lock:
            entry = self._devices.get(nid)
        if entry is None:
            return LinkResult(nid, op, ok=False, error="UnknownNid")
        cfg = self.config
        elapsed = 0.0
        for attempt in range(1 + cfg.retries):
            if self._rng.random() < entry.link.loss:
                elapsed += cfg.retry_timeout_ms
                self._wait_ms(cfg.retry_timeout_ms)
                continue
            latency = entry.link.sample_latency(self._rng)
            elapsed += latency
            self._wait_ms(latency)
            with self._dev_lock:
                if nid not in self._devices:
                    return LinkResult(nid, op, ok=False, error="UnknownNid",
                                      attempts=attempt + 1, elapsed_ms=elapsed)
                device = entry.device
                if op == "write":
                    try:
                        device.apply(setting["name"], setting["value"])
                    except FabricError as exc:
                        return LinkResult(nid, op, ok=False, error=type(exc).__name__,
                                          attempts=attempt + 1, elapsed_ms=elapsed)
                    value = device.describe()
                else:
                    value = self._read_sample(nid, device)
            return LinkResult(nid, op, ok=True, value=value,
                              attempts=attempt + 1, elapsed_ms=elapsed)
        return LinkResult(nid, op, ok=False, error="LinkTimeout",
                          attempts=1 + cfg.retries, elapsed_ms=elapsed)

    def _read_sample(self, nid: Address, device: Device):
        from .energy import TelemetrySample

        ts = self.clock.now_ms()
        if isinstance(device, Sensor):
            return TelemetrySample(nid, device.metric, device.read(), ts)
        return TelemetrySample(nid, Metric.POWER_W, device.power_w, ts)

    def _wait_ms(self, ms: float) -> None:
        if self.clock.virtual:
            self.clock.advance_to(self.clock.now_ms() + int(ms))
        elif ms > 0 and self.timescale > 0:
            time.sleep(ms * self.timescale / 1000.0)

    # -- polling loop (threaded runtime) -----------------------------------------
    def start_polling(self) -> None:
        if self.clock.virtual:
            raise GatewayError("polling loop requires a real clock")
        if self._poller is None:
            self._poller = threading.Thread(target=self._poll_loop, daemon=True,
                                            name=f"poll-{self.config.gid.token}")
            self._poller.start()

    def _poll_loop(self) -> None:
        interval = self.config.poll_interval_s * max(self.timescale, 1e-9)
        while not self._stopped:
            time.sleep(interval)
            if self._stopped:
                return
            try:
                self.poll_cycle()
            except Exception:
                pass

    def stop(self) -> None:
        self._stopped = True
        with self._qlock:
            self._qlock.notify_all()
        if self._worker is not None and self._worker is not threading.current_thread():
            self._worker.join(timeout=2.0)
        if self._log_file is not None:
            with self._log_lock:
                self._log_file.close()
            self._log_file = None

    def _log_event(self, record: dict) -> None:
        if self._log_file is None:
            return
        record = {"t_ms": self.clock.now_ms(), "gid": self.config.gid.token, **record}
        with self._log_lock:
            self._log_file.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_file.flush()


def build_device_table(gateway: Gateway, table: list[tuple[Address, str, dict, LinkModel]]) -> None:
    for nid, kind, extras, link in table:
        device = make_device(nid, kind, **extras)
        gateway.attach_device(nid, device, link)


class GatewayRuntime:
    """Supervises a gateway's TCP connections: retry with backoff at boot,
    reconnect and re-subscribe after a broker or cloud restart."""

    def __init__(self, gateway: Gateway, *, poll: bool = True,
                 backoff_s: float = 0.2, max_backoff_s: float = 3.0) -> None:
        if gateway.config.broker_endpoint is None or gateway.config.cloud_endpoint is None:
            raise GatewayError("runtime needs broker and cloud endpoints in the config")
        self.gateway = gateway
        self._poll = poll
        self._backoff_s = backoff_s
        self._max_backoff_s = max_backoff_s
        self._stopped = False
        self._thread = threading.Thread(target=self._supervise, daemon=True,
                                        name=f"gw-runtime-{gateway.config.gid.token}")

    def start(self) -> None:
        self._thread.start()

    def _connect(self, endpoint: tuple[str, int]):
        from .transport import TcpConn

        return TcpConn.connect(endpoint[0], endpoint[1], timeout=3.0)

    def _supervise(self) -> None:
        backoff = self._backoff_s
        broker_conn = None
        cloud_conn = None
        while not self._stopped:
            try:
                if cloud_conn is None or cloud_conn.closed:
                    cloud_conn = self._connect(self.gateway.config.cloud_endpoint)
                    self.gateway.connect_cloud(cloud_conn)
                if broker_conn is None or broker_conn.closed:
                    broker_conn = self._connect(self.gateway.config.broker_endpoint)
                    self.gateway.connect_broker(broker_conn)  # attach + re-subscribe
                if self._poll:
                    self.gateway.start_polling()
                backoff = self._backoff_s
            except Exception:
                time.sleep(backoff)
                backoff = min(backoff * 2, self._max_backoff_s)
                continue
            time.sleep(0.2)

    def stop(self) -> None:
        self._stopped = True
        self.gateway.stop()
