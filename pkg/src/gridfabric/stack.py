"""Builds a wired fabric (broker + cloud + gateways) from a topology spec.

Topologies are plain dicts (JSON-able).  Identifier allocation follows
registration order: areas in list order get AID1.., families area-major get
FID1.., each user one UID and one DID in order, one gateway per family
(GID*n*/JID*n*), then devices get NIDs in listing order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .broker import Broker, Role
from .clients import ConsumerClient
from .cloud import COMPONENT_JID, Cloud
from .devices import LightProfile, make_device
from .gateway import Gateway, GatewayConfig, LinkModel
from .model import Address, FabricError, Message
from .transport import Clock, DelayModel, FrameConn, MemoryConn, Scheduler, TcpConn


@dataclass(frozen=True)
class FabricDelays:
    """Injected per-segment delays; the knobs that calibrate the bench."""

    cloud_ingress: DelayModel = DelayModel.zero()
    broadcast: DelayModel = DelayModel.zero()
    direct: DelayModel = DelayModel.zero()
    extra_ms: float = 0.0  # WAN-like addition applied to every segment

    @classmethod
    def zero(cls) -> "FabricDelays":
        return cls()

    @classmethod
    def paper_calibrated(cls, extra_ms: float = 0.0) -> "FabricDelays":
        # Means measured on the reference testbed: client->cloud 71.06 ms,
        # broadcast 342.35 ms, one-to-one 161.59 ms; jitter 10% of mean.
        return cls(
            cloud_ingress=DelayModel(71.06, 7.1),
            broadcast=DelayModel(342.35, 34.2),
            direct=DelayModel(161.59, 16.2),
            extra_ms=extra_ms,
        )

    def _plus_extra(self, model: DelayModel) -> DelayModel:
        if self.extra_ms <= 0:
            return model
        return DelayModel(model.mean_ms + self.extra_ms, model.jitter_ms)

    @property
    def effective_ingress(self) -> DelayModel:
        return self._plus_extra(self.cloud_ingress)

    @property
    def effective_broadcast(self) -> DelayModel:
        return self._plus_extra(self.broadcast)

    @property
    def effective_direct(self) -> DelayModel:
        return self._plus_extra(self.direct)


@dataclass
class FamilyInfo:
    fid: Address
    aid: Address
    uids: tuple[Address, ...]
    dids: tuple[Address, ...]
    gid: Address
    jid: Address
    nids: tuple[tuple[Address, str], ...]  # (nid, kind)

    def nids_of_kind(self, kind: str) -> tuple[Address, ...]:
        return tuple(n for n, k in self.nids if k == kind)


DEFAULT_LINKS = {
    "Plug": LinkModel.zwave(),
    "Light": LinkModel.zwave(),
    "AC": LinkModel.zigbee(),
    "Sensor": LinkModel.zigbee(),
    "Camera": LinkModel.ble(),
}


def default_link_for(kind: str) -> LinkModel:
    return DEFAULT_LINKS.get(kind, LinkModel.zigbee())


class Stack:
    """A complete in-process fabric, stepped (virtual time) or threaded."""

    def __init__(
        self,
        topology: dict,
        *,
        mode: str = "stepped",
        transport: str = "memory",
        delays: FabricDelays | None = None,
        seed: int = 0,
        zero_jitter_links: bool = False,
        instant_links: bool = False,
        light_profile: LightProfile | None = None,
        transfer_recorder: Callable[[dict], None] | None = None,
        delivery_recorder: Callable[[Address, Message, int], None] | None = None,
        broker_log: str | Path | None = None,
        audit_log: str | Path | None = None,
        command_timeout_ms: float = 2000.0,
        host: str = "127.0.0.1",
    ) -> None:
        if mode not in ("stepped", "threaded"):
            raise FabricError(f"unknown stack mode {mode!r}")
        if transport not in ("memory", "tcp"):
            raise FabricError(f"unknown transport {transport!r}")
        if mode == "stepped" and transport == "tcp":
            raise FabricError("a stepped stack needs the in-memory transport")
        self.mode = mode
        self.transport = transport
        self.delays = delays or FabricDelays.zero()
        self.seed = seed
        self.clock = Clock.stepped() if mode == "stepped" else Clock.real()
        self.scheduler = Scheduler(self.clock)
        self.broker = Broker(
            self.clock,
            scheduler=self.scheduler,
            broadcast_delay=self.delays.effective_broadcast,
            direct_delay=self.delays.effective_direct,
            delay_seed=seed + 101,
            log_path=broker_log,
        )
        self.cloud = Cloud(
            self.clock,
            ingress_delay=self.delays.effective_ingress,
            delay_seed=seed + 202,
            scheduler=self.scheduler,
            audit_log=audit_log,
            command_timeout_ms=command_timeout_ms,
        )
        self.gateways: dict[Address, Gateway] = {}
        self.families: list[FamilyInfo] = []
        self.areas: list[Address] = []
        self._clients: list[ConsumerClient] = []
        self._host = host
        self.broker_port: int | None = None
        self.service_port: int | None = None
        self._light_profile = light_profile
        self._zero_jitter = zero_jitter_links
        self._instant_links = instant_links
        self._transfer_recorder = transfer_recorder
        self._delivery_recorder = delivery_recorder
        if transport == "tcp":
            self.broker_port = self.broker.serve_tcp(host)
            from .transport import TcpListener

            self._service_listener = TcpListener(host, 0, self.cloud.accept_service)
            self.service_port = self._service_listener.port
        else:
            self._service_listener = None
        self.broker.provision(COMPONENT_JID, Role.COMPONENT)
        self.cloud.connect_broker(self._dial_broker())
        self._bootstrap(topology)

    # -- wiring helpers ----------------------------------------------------
    def _dial_broker(self) -> FrameConn:
        if self.transport == "tcp":
            return TcpConn.connect(self._host, self.broker_port)
        client_end, server_end = MemoryConn.pair()
        self.broker.accept(server_end)
        return client_end

    def _dial_service(self) -> FrameConn:
        if self.transport == "tcp":
            return TcpConn.connect(self._host, self.service_port)
        client_end, server_end = MemoryConn.pair()
        self.cloud.accept_service(server_end)
        return client_end

    def _normalize_link(self, link: LinkModel) -> LinkModel:
        if self._instant_links:
            return LinkModel.instant()
        if self._zero_jitter:
            return LinkModel(link.protocol, link.mean_ms, 0.0, link.loss)
        return link

    # -- bootstrap -------------------------------------------------------------
    def _bootstrap(self, topology: dict) -> None:
        """Topology format: {"areas": N, "families": [{"area": 1..N, "users": k,
        "devices": [...]}, ...]}.  Families register in list order, which fixes
        the FID/UID/DID/GID/JID/NID numbering."""
        registry = self.cloud.registry
        for _ in range(int(topology.get("areas", 1))):
            self.areas.append(registry.register_area())
        for family_spec in topology.get("families", []):
            area = self.areas[int(family_spec.get("area", 1)) - 1]
            family = registry.register_family(area)
            uids, dids = [], []
            for _ in range(int(family_spec.get("users", 1))):
                user = registry.register_user(family)
                uids.append(user)
                dids.append(registry.register_device_id(user))
            gid_addr, jid_addr = registry.register_gateway(family)
            config = GatewayConfig(
                gid=gid_addr,
                jid=jid_addr,
                aid=area,
                poll_interval_s=float(family_spec.get("poll_interval_s", 10.0)),
                link_seed=self.seed + 1000 + gid_addr.num,
            )
            gateway = Gateway(
                config,
                self.clock,
                component_jid=COMPONENT_JID,
                transfer_recorder=self._transfer_recorder,
                delivery_recorder=self._delivery_recorder,
            )
            nid_list: list[tuple[Address, str]] = []
            for dev_spec in family_spec.get("devices", []):
                kind = dev_spec["kind"]
                node = registry.register_node(gid_addr, kind)
                link = (
                    LinkModel.from_dict(dev_spec["link"])
                    if "link" in dev_spec
                    else default_link_for(kind)
                )
                device = make_device(
                    node,
                    kind,
                    rating_w=dev_spec.get("rating_w"),
                    metric=dev_spec.get("metric"),
                    profile=dev_spec.get("profile") or (
                        self._light_profile if kind == "Light" else None
                    ),
                )
                gateway.attach_device(node, device, self._normalize_link(link))
                nid_list.append((node, kind))
            gateway.connect_broker(self._dial_broker())
            gateway.connect_cloud(self._dial_service())
            self.gateways[gid_addr] = gateway
            self.families.append(
                FamilyInfo(family, area, tuple(uids), tuple(dids),
                           gid_addr, jid_addr, tuple(nid_list))
            )

    # -- views ---------------------------------------------------------------------
    def family(self, fid: Address) -> FamilyInfo:
        for info in self.families:
            if info.fid == fid:
                return info
        raise FabricError(f"no family {fid}")

    def family_of_did(self, did: Address) -> FamilyInfo:
        for info in self.families:
            if did in info.dids:
                return info
        raise FabricError(f"no family with device id {did}")

    def gateway(self, gid: Address) -> Gateway:
        return self.gateways[gid]

    def all_devices(self):
        for info in self.families:
            gateway = self.gateways[info.gid]
            for node, device in sorted(gateway.devices().items()):
                yield info, node, device

    def community_device_kw(self) -> float:
        return sum(device.power_w for _, _, device in self.all_devices()) / 1000.0

    # -- clients ---------------------------------------------------------------------
    def connect_client(self, did: Address, *, timeout_s: float = 10.0) -> ConsumerClient:
        client = ConsumerClient(did, self._dial_service(), self.clock,
                                component=COMPONENT_JID, request_timeout_s=timeout_s)
        client.attach()
        self._clients.append(client)
        return client

    def close(self) -> None:
        for client in self._clients:
            try:
                client.close()
            except Exception:
                pass
        for gateway in self.gateways.values():
            gateway.stop()
        self.cloud.close()
        self.broker.close()
        if self._service_listener is not None:
            self._service_listener.close()
        self.scheduler.close()


def topology_from_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def demo_topology() -> dict:
    """The canonical two-area layout used across the case studies.

    Family 1 (Area 1): 4 users (DID1-4), gateway GID1/JID1, AC + plug +
    2 lights + temperature sensor (NID1-5).
    Family 2 (Area 2): 5 users (DID5-9), gateway GID2/JID2, AC + plug -
    so Area 2 pricing reaches exactly DID5..DID9 and the automation case
    routes via JID2 (NID6 is that family's AC).
    Family 3 (Area 1): 2 users (DID10-11), motion sensor + camera + light.
    """
    zigbee = {"protocol": "ZigbeeLike", "mean_ms": 150.0, "jitter_ms": 15.0}
    zwave = {"protocol": "ZWaveLike", "mean_ms": 785.0, "jitter_ms": 78.5}
    ble = {"protocol": "BleLike", "mean_ms": 100.0, "jitter_ms": 10.0}
    return {
        "areas": 2,
        "families": [
            {
                "area": 1,
                "users": 4,
                "devices": [
                    {"kind": "AC", "rating_w": 1000, "link": zigbee},
                    {"kind": "Plug", "rating_w": 500, "link": zwave},
                    {"kind": "Light", "rating_w": 100, "link": zwave},
                    {"kind": "Light", "rating_w": 100, "link": zwave},
                    {"kind": "Sensor", "metric": "TemperatureC", "link": zigbee},
                ],
            },
            {
                "area": 2,
                "users": 5,
                "devices": [
                    {"kind": "AC", "rating_w": 1000, "link": zigbee},
                    {"kind": "Plug", "rating_w": 500, "link": zwave},
                ],
            },
            {
                "area": 1,
                "users": 2,
                "devices": [
                    {"kind": "Sensor", "metric": "Motion", "link": zigbee},
                    {"kind": "Camera", "link": ble},
                    {"kind": "Light", "rating_w": 100, "link": zwave},
                ],
            },
        ],
    }
