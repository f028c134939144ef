"""Experiment drivers: scripted scenarios and the per-segment latency bench.

Scenarios run on a stepped stack (virtual clock, deterministic); the bench
runs the threaded stack with real sleeps and the calibrated delay models, and
extracts per-segment delays from the hop timestamps each process stamps into
the frames.
"""

from __future__ import annotations

import csv
import json
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .clients import ConsumerClient
from .energy import Metric
from .model import Address, FabricError, Message, encode_frame, parse_address
from .stack import FabricDelays, Stack
from .gateway import LinkModel


class SpecError(FabricError):
    pass


class IncompleteRun(FabricError):
    pass


SEGMENTS = (
    "client_to_cloud",
    "cloud_to_broker",
    "broadcast_broker_to_uhg",
    "one_to_one_broker_to_uhg",
    "uhg_to_node_control_ack",
)


# ---------------------------------------------------------------------------
# Scenario runner
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSpec:
    topology: dict
    events: list[dict]
    seed: int = 0
    name: str = "scenario"
    zero_jitter_links: bool = True

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioSpec":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            topology=raw["topology"],
            events=raw.get("events", []),
            seed=int(raw.get("seed", 0)),
            name=raw.get("name", "scenario"),
            zero_jitter_links=bool(raw.get("zero_jitter_links", True)),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "name": self.name,
            "seed": self.seed,
            "zero_jitter_links": self.zero_jitter_links,
            "topology": self.topology,
            "events": self.events,
        }, indent=2), encoding="utf-8")


@dataclass
class ScenarioReport:
    name: str
    outcomes: list[dict]
    gateway_deliveries: dict[str, list[str]]  # jid token -> frame lines as received
    client_pushes: dict[str, list[str]]  # did token -> frame lines as received
    device_states: dict[str, dict]
    audit: dict

    def delivery_log_bytes(self) -> bytes:
        """Canonical per-recipient delivery log (for determinism comparisons)."""
        blob = {
            "gateways": self.gateway_deliveries,
            "clients": self.client_pushes,
        }
        return json.dumps(blob, sort_keys=True).encode("utf-8")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "name": self.name,
            "outcomes": self.outcomes,
            "gateway_deliveries": self.gateway_deliveries,
            "client_pushes": self.client_pushes,
            "device_states": self.device_states,
            "audit": self.audit,
        }, indent=2, default=str), encoding="utf-8")


_KNOWN_ACTIONS = {
    "connect_client", "disconnect_client", "automation", "publish_price",
    "dispatch_drm", "set_away", "set_threshold", "telemetry", "motion",
    "poll", "query_energy", "security_alarm",
}


def _validate_spec(spec: ScenarioSpec) -> None:
    last = -1
    for event in spec.events:
        at = int(event.get("at_ms", 0))
        if at < last:
            raise SpecError("events must be time-ordered")
        last = at
        action = event.get("action")
        if action not in _KNOWN_ACTIONS:
            raise SpecError(f"unknown action {action!r}")


def run_scenario(spec: ScenarioSpec) -> ScenarioReport:
    """Execute the event script against a freshly bootstrapped stepped stack."""
    _validate_spec(spec)
    deliveries: dict[str, list[str]] = {}

    def delivery_recorder(jid: Address, msg: Message, now: int) -> None:
        deliveries.setdefault(jid.token, []).append(
            encode_frame(msg).decode("utf-8").rstrip("\n")
        )

    stack = Stack(
        spec.topology,
        mode="stepped",
        seed=spec.seed,
        zero_jitter_links=spec.zero_jitter_links,
        delivery_recorder=delivery_recorder,
    )
    clients: dict[str, ConsumerClient] = {}
    outcomes: list[dict] = []
    try:
        _check_references(spec, stack)
        for event in spec.events:
            stack.clock.advance_to(int(event.get("at_ms", 0)))
            outcomes.append(_run_event(stack, clients, event))
        for client in clients.values():
            client.drain_pushes()
        report = ScenarioReport(
            name=spec.name,
            outcomes=outcomes,
            gateway_deliveries={k: list(v) for k, v in sorted(deliveries.items())},
            client_pushes={
                did: [encode_frame(p.message).decode("utf-8").rstrip("\n") for p in c.pushes]
                for did, c in sorted(clients.items())
            },
            device_states={
                node.token: device.describe()
                for _info, node, device in stack.all_devices()
            },
            audit={"areas": [a.token for a in stack.areas],
                   "families": [f.fid.token for f in stack.families]},
        )
        return report
    finally:
        stack.close()


def _check_references(spec: ScenarioSpec, stack: Stack) -> None:
    registry = stack.cloud.registry
    for event in spec.events:
        for key, checker in (("did", registry.has_device_id), ("gid", registry.has_gateway),
                             ("nid", registry.has_node), ("uid", registry.has_user),
                             ("aid", registry.has_area)):
            if key in event and not checker(parse_address(event[key])):
                raise SpecError(f"{event['action']}: dangling reference {event[key]}")
        if "fid" in event:
            try:
                registry.area_of_family(parse_address(event["fid"]))
            except FabricError:
                raise SpecError(f"{event['action']}: dangling reference {event['fid']}") from None


def _client_for(stack: Stack, clients: dict[str, ConsumerClient], did_token: str) -> ConsumerClient:
    if did_token not in clients:
        clients[did_token] = stack.connect_client(parse_address(did_token))
    return clients[did_token]


def _run_event(stack: Stack, clients: dict[str, ConsumerClient], event: dict) -> dict:
    action = event["action"]
    out: dict = {"action": action, "at_ms": int(event.get("at_ms", 0))}
    if action == "connect_client":
        _client_for(stack, clients, event["did"])
    elif action == "disconnect_client":
        client = clients.pop(event["did"], None)
        if client is not None:
            client.drain_pushes()
            # keep its push history under its did for the report
            clients[f"{event['did']} (closed)"] = client
            client.close()
    elif action == "automation":
        client = _client_for(stack, clients, event["did"])
        out["outcome"] = client.automation(parse_address(event["nid"]), event["setting"])
        out["outcome"]["hops"] = [list(h) for h in out["outcome"]["hops"]]
    elif action == "publish_price":
        client = _client_for(stack, clients, event["did"]) if "did" in event else None
        if client is not None:
            out["outcome"] = client.publish_price(parse_address(event["aid"]),
                                                  float(event["price_per_kwh"]))
        else:
            report, push_report = stack.cloud.publish_price(
                parse_address(event["aid"]), float(event["price_per_kwh"]),
                int(event.get("effective_at_ms", stack.clock.now_ms())))
            out["outcome"] = {
                "delivered": [a.token for a in report.delivered_to],
                "pushed": [d.token for d in (push_report.delivered + push_report.queued)]
                if push_report else [],
            }
    elif action == "dispatch_drm":
        report = stack.cloud.dispatch_drm(parse_address(event["aid"]), event["directive"])
        out["outcome"] = {"delivered": [a.token for a in report.delivered_to],
                          "failed": [[a.token, r] for a, r in report.failed]}
    elif action == "set_away":
        stack.cloud.set_away(parse_address(event["fid"]), bool(event["away"]))
    elif action == "set_threshold":
        stack.cloud.set_threshold(parse_address(event["uid"]), float(event["threshold_wh"]))
    elif action == "telemetry":
        gateway = stack.gateway(parse_address(event["gid"]))
        out["outcome"] = {"uploaded": gateway.upload_batch(event["samples"])}
    elif action == "motion":
        gateway = stack.gateway(parse_address(event["gid"]))
        ts = int(event.get("ts_ms", stack.clock.now_ms()))
        out["outcome"] = {
            "uploaded": gateway.upload_batch(
                [[event["nid"], Metric.MOTION.value, float(event.get("value", 1)), ts]]
            )
        }
    elif action == "poll":
        gateway = stack.gateway(parse_address(event["gid"]))
        out["outcome"] = {"batch": gateway.poll_cycle()}
    elif action == "query_energy":
        client = _client_for(stack, clients, event["did"])
        out["outcome"] = client.query_energy(int(event.get("from_ms", 0)),
                                             int(event.get("to_ms", 2**62)))
    elif action == "security_alarm":
        fired = stack.cloud.security_alarm(parse_address(event["gid"]),
                                           event.get("evidence", {}))
        out["outcome"] = {"fired": fired}
    return out


# ---------------------------------------------------------------------------
# Latency bench
# ---------------------------------------------------------------------------

@dataclass
class BenchConfig:
    """Bench sizing.  Broadcast publishes target the first ``broadcast_areas``
    areas; direct and control requests target gateways in the remaining
    (quiet) areas, so cross-class queueing on a shared gateway session does
    not smear one segment's delay into another (deliveries to one session are
    FIFO in broker-ingress order, as on a real connection)."""

    clients: int = 1000
    mix: tuple[int, int, int] = (1, 1, 1)  # broadcast : direct : control
    concurrent: bool = True
    areas: int = 5
    broadcast_areas: int = 2
    homes: int = 100
    seed: int = 1
    delays: FabricDelays = field(default_factory=FabricDelays.paper_calibrated)
    control_link: LinkModel = field(default_factory=LinkModel.zwave)
    sample_floor: int = 100
    deadline_ms: float = 8000.0
    transport: str = "memory"
    request_timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if not (0 < self.broadcast_areas < self.areas):
            raise IncompleteRun("need at least one broadcast area and one quiet area")

    def topology(self) -> dict:
        users_per_home, remainder = divmod(self.clients, self.homes)
        families = []
        for i in range(self.homes):
            families.append({
                "area": (i % self.areas) + 1,
                "users": users_per_home + (1 if i < remainder else 0),
                "devices": [{
                    "kind": "Plug",
                    "rating_w": 500,
                    "link": {
                        "protocol": self.control_link.protocol,
                        "mean_ms": self.control_link.mean_ms,
                        "jitter_ms": self.control_link.jitter_ms,
                        "loss": self.control_link.loss,
                    },
                }],
            })
        return {"areas": self.areas, "families": families}


@dataclass
class SegmentStats:
    name: str
    count: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    max_ms: float


@dataclass
class LatencyReport:
    mode: str
    clients: int
    samples: dict[str, list[tuple[str, float]]]  # segment -> [(cid, delay_ms)]
    end_to_end: list[tuple[str, float]]
    unaccounted: list[str]  # requests with no terminal outcome (dangling cids)
    failures: list[str]  # explicit failures (terminal, but not a success)
    consistency_errors: list[str]

    def stats(self) -> dict[str, SegmentStats]:
        out = {}
        for name, pairs in self.samples.items():
            values = [d for _, d in pairs]
            if not values:
                out[name] = SegmentStats(name, 0, 0.0, 0.0, 0.0, 0.0)
                continue
            ordered = sorted(values)
            p95 = ordered[min(len(ordered) - 1, int(0.95 * len(ordered)))]
            out[name] = SegmentStats(name, len(values), statistics.fmean(values),
                                     statistics.median(values), p95, max(values))
        return out

    def require_valid(self, sample_floor: int = 100) -> None:
        if self.unaccounted:
            raise IncompleteRun(
                f"{len(self.unaccounted)} requests lack a terminal outcome: "
                f"{self.unaccounted[:5]}..."
            )
        if self.failures:
            raise IncompleteRun(
                f"{len(self.failures)} requests failed: {self.failures[:5]}..."
            )
        if self.consistency_errors:
            raise IncompleteRun(f"segment bookkeeping errors: {self.consistency_errors[:5]}")
        for name in SEGMENTS:
            if len(self.samples.get(name, ())) < sample_floor:
                raise IncompleteRun(
                    f"segment {name} has {len(self.samples.get(name, ()))} samples, "
                    f"needs {sample_floor}"
                )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["segment", "correlation_id", "delay_ms"])
            for name in SEGMENTS:
                for cid, delay in self.samples.get(name, ()):
                    writer.writerow([name, cid, f"{delay:.3f}"])
            for cid, delay in self.end_to_end:
                writer.writerow(["end_to_end", cid, f"{delay:.3f}"])

    def summary_table(self) -> str:
        lines = [f"{'segment':<28}{'n':>7}{'mean':>10}{'median':>10}{'p95':>10}{'max':>10}"]
        for name in SEGMENTS:
            s = self.stats().get(name)
            if s is None:
                continue
            lines.append(
                f"{name:<28}{s.count:>7}{s.mean_ms:>10.1f}{s.median_ms:>10.1f}"
                f"{s.p95_ms:>10.1f}{s.max_ms:>10.1f}"
            )
        if self.end_to_end:
            values = sorted(d for _, d in self.end_to_end)
            lines.append(
                f"{'end_to_end (controls)':<28}{len(values):>7}"
                f"{statistics.fmean(values):>10.1f}{statistics.median(values):>10.1f}"
                f"{values[min(len(values) - 1, int(0.95 * len(values)))]:>10.1f}"
                f"{values[-1]:>10.1f}"
            )
        return "\n".join(lines)


def _hop_delta(hops: tuple, a: str, b: str) -> float | None:
    ts = dict(hops)
    if a in ts and b in ts:
        return float(ts[b] - ts[a])
    return None


def run_latency_bench(config: BenchConfig | None = None) -> LatencyReport:
    """Fire N scripted client requests at a threaded stack and attribute
    delay to each architecture segment from the stamped hop chains."""
    config = config or BenchConfig()
    received: list[tuple[Message, int]] = []
    received_lock = threading.Lock()

    def delivery_recorder(jid: Address, msg: Message, now: int) -> None:
        with received_lock:
            received.append((msg, now))

    stack = Stack(
        config.topology(),
        mode="threaded",
        transport=config.transport,
        delays=config.delays,
        seed=config.seed,
        delivery_recorder=delivery_recorder,
        # queued controls may legitimately take several seconds under the
        # concurrent burst; the 8 s reserve deadline is the acceptance bound
        command_timeout_ms=config.deadline_ms + 2000.0,
    )
    outcomes: list[dict] = []
    outcome_lock = threading.Lock()
    try:
        plan = _bench_plan(config, stack)

        clients = [stack.connect_client(did, timeout_s=config.request_timeout_s)
                   for did, _, _ in plan]
        barrier = threading.Barrier(len(plan) + 1)
        serial_lock = threading.Lock()

        def run_client(client: ConsumerClient, kind: str, target: dict) -> None:
            barrier.wait()
            hold = serial_lock if not config.concurrent else None
            if hold is not None:
                hold.acquire()
            try:
                sent = stack.clock.now_ms()
                if kind == "broadcast":
                    reply = client.publish_price(target["aid"], 0.21)
                    outcome = {"kind": kind, "ok": bool(reply.get("ok")),
                               "cid": reply.get("cid", ""), "sent_ms": sent,
                               "recv_ms": stack.clock.now_ms(),
                               "delivered": reply.get("delivered", []),
                               "hops": reply.get("hops", ())}
                elif kind == "direct":
                    reply = client.price_direct(target["gid"], 0.21)
                    outcome = {"kind": kind, "ok": bool(reply.get("ok")),
                               "cid": reply.get("cid", ""), "sent_ms": sent,
                               "recv_ms": stack.clock.now_ms(),
                               "delivered": reply.get("delivered", []),
                               "hops": reply.get("hops", ())}
                else:
                    result = client.automation(target["nid"], {"name": "power", "value": "on"})
                    outcome = {"kind": kind, "ok": result["ok"], "cid": result["cid"],
                               "sent_ms": result["sent_ms"], "recv_ms": result["received_ms"],
                               "hops": result["hops"], "error": result["error"]}
            except Exception as exc:
                outcome = {"kind": kind, "ok": False, "cid": "", "error": repr(exc)}
            finally:
                if hold is not None:
                    hold.release()
            with outcome_lock:
                outcomes.append(outcome)

        threads = [
            threading.Thread(target=run_client, args=(client, kind, target), daemon=True)
            for client, (_, kind, target) in zip(clients, plan)
        ]
        for t in threads:
            t.start()
        barrier.wait()
        for t in threads:
            t.join(timeout=config.request_timeout_s + 30)
        # let in-flight broadcast deliveries settle
        deadline = time.monotonic() + 5.0
        expected_deliveries = _expected_delivery_count(outcomes)
        while time.monotonic() < deadline:
            with received_lock:
                have = len(received)
            if have >= expected_deliveries:
                break
            time.sleep(0.05)
        return _assemble_report(config, outcomes, received)
    finally:
        stack.close()


def _bench_plan(config: BenchConfig, stack: Stack) -> list[tuple[Address, str, dict]]:
    """One request per client: controls go to quiet-area clients (own plug,
    spread one per home), directs target quiet gateways round-robin, and the
    rest publish prices to the broadcast areas."""
    b, d, c = config.mix
    cycle = max(1, b + d + c)
    n_broadcast = round(config.clients * b / cycle)
    n_direct = round(config.clients * d / cycle)
    n_control = config.clients - n_broadcast - n_direct

    broadcast_aids = stack.areas[: config.broadcast_areas]
    quiet_families = [f for f in stack.families if f.aid not in broadcast_aids]
    if not quiet_families:
        raise IncompleteRun("no quiet-area families to host direct/control targets")

    # round-robin over quiet homes so link queues stay balanced
    control_clients: list[tuple[Address, str, dict]] = []
    per_home_users = [list(f.dids) for f in quiet_families]
    home_idx = 0
    while len(control_clients) < n_control:
        users = per_home_users[home_idx % len(per_home_users)]
        if users:
            did = users.pop(0)
            family = quiet_families[home_idx % len(quiet_families)]
            control_clients.append((did, "control", {"nid": family.nids[0][0]}))
        home_idx += 1
        if all(not u for u in per_home_users) and len(control_clients) < n_control:
            raise IncompleteRun("not enough quiet-area clients for the control mix")

    used = {did for did, _, _ in control_clients}
    remaining = [did for f in stack.families for did in f.dids if did not in used]
    plan = list(control_clients)
    for i in range(n_direct):
        family = quiet_families[i % len(quiet_families)]
        plan.append((remaining.pop(0), "direct", {"gid": family.gid}))
    for i in range(n_broadcast):
        plan.append((remaining.pop(0), "broadcast", {"aid": broadcast_aids[i % len(broadcast_aids)]}))
    return plan[: config.clients]


def _expected_delivery_count(outcomes: list[dict]) -> int:
    total = 0
    for out in outcomes:
        if out.get("kind") in ("broadcast", "direct"):
            total += len(out.get("delivered", []))
        elif out.get("kind") == "control" and out.get("ok"):
            total += 1
    return total


def _assemble_report(config: BenchConfig, outcomes: list[dict],
                     received: list[tuple[Message, int]]) -> LatencyReport:
    samples: dict[str, list[tuple[str, float]]] = {name: [] for name in SEGMENTS}
    end_to_end: list[tuple[str, float]] = []
    unaccounted: list[str] = []
    failures: list[str] = []
    consistency: list[str] = []

    receipts_by_cid: dict[str, list[tuple[Message, int]]] = {}
    for msg, now in received:
        receipts_by_cid.setdefault(msg.correlation_id, []).append((msg, now))

    seen_cloud_to_broker: set[str] = set()
    for msg, _now in received:
        hops = msg.hop_timestamps
        cid = msg.correlation_id
        pub = _hop_delta(hops, "cloud_pub", "broker_in")
        fwd = _hop_delta(hops, "cloud_fwd", "broker_in")
        leg = pub if pub is not None else fwd
        if leg is not None and cid not in seen_cloud_to_broker:
            seen_cloud_to_broker.add(cid)
            samples["cloud_to_broker"].append((cid, leg))
        span = _hop_delta(hops, "broker_in", "gw_recv")
        if span is not None:
            if _is_broadcast(msg):
                samples["broadcast_broker_to_uhg"].append((cid, span))
            else:
                samples["one_to_one_broker_to_uhg"].append((cid, span))

    for out in outcomes:
        cid = out.get("cid", "")
        kind = out.get("kind")
        if not out.get("ok"):
            if cid:
                failures.append(f"{kind}:{cid}:{out.get('error')}")
            else:
                unaccounted.append(f"{kind}:{out.get('error', 'unknown')}")
            continue
        hops = tuple(tuple(h) for h in out.get("hops", ()))
        c2c = _hop_delta(hops, "client_send", "cloud_recv")
        if c2c is not None:
            samples["client_to_cloud"].append((cid, c2c))
        if kind == "control":
            link = _hop_delta(hops, "gw_recv", "link_done")
            if link is not None:
                samples["uhg_to_node_control_ack"].append((cid, link))
            e2e = float(out["recv_ms"] - out["sent_ms"])
            end_to_end.append((cid, e2e))
            spans = _consecutive_spans(hops, out["sent_ms"], out["recv_ms"])
            if spans is not None and abs(spans - e2e) > 1.0:
                consistency.append(f"{cid}: spans {spans} vs e2e {e2e}")
            receipts = receipts_by_cid.get(cid, [])
            if not receipts:
                unaccounted.append(f"control-delivery:{cid}")
        elif kind in ("broadcast", "direct"):
            expected = len(out.get("delivered", []))
            got = len(receipts_by_cid.get(cid, [])) if expected else 0
            if expected and got != expected:
                unaccounted.append(f"{kind}:{cid} delivered {got}/{expected}")
    return LatencyReport(
        mode="concurrent" if config.concurrent else "serialized",
        clients=config.clients,
        samples=samples,
        end_to_end=end_to_end,
        unaccounted=unaccounted,
        failures=failures,
        consistency_errors=consistency,
    )


def _is_broadcast(msg: Message) -> bool:
    # broadcast copies keep their AID target; directs are addressed to a JID
    return msg.target.kind == "AID"


def _consecutive_spans(hops: tuple, sent_ms: int, recv_ms: int) -> float | None:
    if not hops:
        return None
    total = 0.0
    prev = sent_ms
    for _name, ms in hops:
        total += ms - prev
        prev = ms
    total += recv_ms - prev
    return total
