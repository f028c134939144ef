"""Cloud-side identity registry: areas, families, users, devices, gateways.

Bindings maintained: FID->AID, GID<->JID (bijection), UID->FID, DID->UID,
NID->GID.  Addresses are allocated in registration order, so a bootstrap that
registers Family 1 before Family 2 gets GID1/JID1 and GID2/JID2, matching the
conventions used throughout the scenario scripts.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

from .model import Address, FabricError, UnknownArea


class RegistryError(FabricError):
    pass


class UnknownParent(RegistryError):
    pass


class DuplicateBinding(RegistryError):
    pass


class UnknownUser(RegistryError):
    pass


class UnknownDevice(RegistryError):
    pass


class UnknownGateway(RegistryError):
    pass


@dataclass
class RegistryRecord:
    """Snapshot view of one family's bindings."""

    family: Address
    area: Address
    gateways: tuple[tuple[Address, Address], ...]  # (GID, JID)
    users: tuple[tuple[Address, Address | None], ...]  # (UID, first DID or None)
    devices: tuple[tuple[Address, str, Address], ...]  # (NID, kind, GID)


class Registry:
    """Allocates typed addresses and tracks the ownership graph."""

    def __init__(self, on_gateway: Callable[[Address, Address, Address], None] | None = None) -> None:
        # on_gateway(gid, jid, aid) fires when a gateway registers, so the
        # cloud can provision the broker side.
        self._lock = threading.RLock()
        self._on_gateway = on_gateway
        self._counters = {k: 0 for k in ("AID", "FID", "UID", "DID", "GID", "JID", "NID")}
        self._areas: set[Address] = set()
        self._fid_aid: dict[Address, Address] = {}
        self._gid_jid: dict[Address, Address] = {}
        self._jid_gid: dict[Address, Address] = {}
        self._gid_fid: dict[Address, Address] = {}
        self._uid_fid: dict[Address, Address] = {}
        self._did_uid: dict[Address, Address] = {}
        self._nid_gid: dict[Address, Address] = {}
        self._nid_kind: dict[Address, str] = {}

    # -- allocation ------------------------------------------------------
    def _alloc(self, kind: str, value: int | None) -> Address:
        if value is None:
            self._counters[kind] += 1
            return Address(kind, self._counters[kind])
        addr = Address(kind, value)
        self._counters[kind] = max(self._counters[kind], value)
        return addr

    def register(self, kind: str, **attrs) -> Address:
        """Generic entry point: register("FID", area=aid(1)) etc.

        Returns the new address; gateway registration returns the GID (use
        jid_of to fetch the paired JID).
        """
        if kind == "AID":
            return self.register_area(value=attrs.get("value"))
        if kind == "FID":
            return self.register_family(attrs["area"], value=attrs.get("value"))
        if kind == "UID":
            return self.register_user(attrs["family"], value=attrs.get("value"))
        if kind == "DID":
            return self.register_device_id(attrs["user"], value=attrs.get("value"))
        if kind == "GID":
            gid, _ = self.register_gateway(attrs["family"], value=attrs.get("value"))
            return gid
        if kind == "NID":
            return self.register_node(attrs["gateway"], attrs.get("device_kind", "Plug"), value=attrs.get("value"))
        raise RegistryError(f"cannot register addresses of kind {kind!r}")

    def register_area(self, *, value: int | None = None) -> Address:
        with self._lock:
            area = self._alloc("AID", value)
            if area in self._areas:
                raise DuplicateBinding(f"{area} already exists")
            self._areas.add(area)
            return area

    def register_family(self, area: Address, *, value: int | None = None) -> Address:
        with self._lock:
            if area not in self._areas:
                raise UnknownParent(f"area {area} is not registered")
            family = self._alloc("FID", value)
            if family in self._fid_aid:
                raise DuplicateBinding(f"{family} already exists")
            self._fid_aid[family] = area
            return family

    def register_user(self, family: Address, *, value: int | None = None) -> Address:
        with self._lock:
            if family not in self._fid_aid:
                raise UnknownParent(f"family {family} is not registered")
            user = self._alloc("UID", value)
            if user in self._uid_fid:
                raise DuplicateBinding(f"{user} already exists")
            self._uid_fid[user] = family
            return user

    def register_device_id(self, user: Address, *, value: int | None = None) -> Address:
        with self._lock:
            if user not in self._uid_fid:
                raise UnknownParent(f"user {user} is not registered")
            device = self._alloc("DID", value)
            if device in self._did_uid:
                raise DuplicateBinding(f"{device} already exists")
            self._did_uid[device] = user
            return device

    def register_gateway(self, family: Address, *, value: int | None = None) -> tuple[Address, Address]:
        with self._lock:
            if family not in self._fid_aid:
                raise UnknownParent(f"family {family} is not registered")
            gid = self._alloc("GID", value)
            if gid in self._gid_jid:
                raise DuplicateBinding(f"{gid} already exists")
            jid = self._alloc("JID", value)
            if jid in self._jid_gid:
                raise DuplicateBinding(f"{jid} already exists")
            self._gid_jid[gid] = jid
            self._jid_gid[jid] = gid
            self._gid_fid[gid] = family
            area = self._fid_aid[family]
        if self._on_gateway is not None:
            self._on_gateway(gid, jid, area)
        return gid, jid

    def register_node(self, gateway: Address, device_kind: str, *, value: int | None = None) -> Address:
        with self._lock:
            if gateway not in self._gid_jid:
                raise UnknownParent(f"gateway {gateway} is not registered")
            node = self._alloc("NID", value)
            if node in self._nid_gid:
                raise DuplicateBinding(f"{node} already exists")
            self._nid_gid[node] = gateway
            self._nid_kind[node] = device_kind
            return node

    # -- lookups -----------------------------------------------------------
    def has_area(self, area: Address) -> bool:
        with self._lock:
            return area in self._areas

    def require_area(self, area: Address) -> None:
        if not self.has_area(area):
            raise UnknownArea(f"{area} is not a registered area")

    def area_of_family(self, family: Address) -> Address:
        with self._lock:
            try:
                return self._fid_aid[family]
            except KeyError:
                raise UnknownParent(f"family {family} is not registered") from None

    def family_of_user(self, user: Address) -> Address:
        with self._lock:
            try:
                return self._uid_fid[user]
            except KeyError:
                raise UnknownUser(f"user {user} is not registered") from None

    def user_of_device_id(self, device: Address) -> Address:
        with self._lock:
            try:
                return self._did_uid[device]
            except KeyError:
                raise UnknownDevice(f"device id {device} is not registered") from None

    def jid_of(self, gateway: Address) -> Address:
        with self._lock:
            try:
                return self._gid_jid[gateway]
            except KeyError:
                raise UnknownGateway(f"gateway {gateway} is not registered") from None

    def gid_of(self, jid: Address) -> Address:
        with self._lock:
            try:
                return self._jid_gid[jid]
            except KeyError:
                raise UnknownGateway(f"no gateway for {jid}") from None

    def family_of_gateway(self, gateway: Address) -> Address:
        with self._lock:
            try:
                return self._gid_fid[gateway]
            except KeyError:
                raise UnknownGateway(f"gateway {gateway} is not registered") from None

    def gateway_of_node(self, node: Address) -> Address:
        with self._lock:
            try:
                return self._nid_gid[node]
            except KeyError:
                raise UnknownDevice(f"node {node} is not registered") from None

    def kind_of_node(self, node: Address) -> str:
        with self._lock:
            return self._nid_kind[node]

    def has_node(self, node: Address) -> bool:
        with self._lock:
            return node in self._nid_gid

    def has_gateway(self, gateway: Address) -> bool:
        with self._lock:
            return gateway in self._gid_jid

    def has_user(self, user: Address) -> bool:
        with self._lock:
            return user in self._uid_fid

    def has_device_id(self, device: Address) -> bool:
        with self._lock:
            return device in self._did_uid

    def family_of_node(self, node: Address) -> Address:
        return self.family_of_gateway(self.gateway_of_node(node))

    def users_of_family(self, family: Address) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(u for u, f in self._uid_fid.items() if f == family))

    def dids_of_user(self, user: Address) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(d for d, u in self._did_uid.items() if u == user))

    def dids_of_family(self, family: Address) -> tuple[Address, ...]:
        with self._lock:
            users = {u for u, f in self._uid_fid.items() if f == family}
            return tuple(sorted(d for d, u in self._did_uid.items() if u in users))

    def dids_of_area(self, area: Address) -> tuple[Address, ...]:
        with self._lock:
            families = {f for f, a in self._fid_aid.items() if a == area}
            users = {u for u, f in self._uid_fid.items() if f in families}
            return tuple(sorted(d for d, u in self._did_uid.items() if u in users))

    def families_of_area(self, area: Address) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(f for f, a in self._fid_aid.items() if a == area))

    def gateways_of_family(self, family: Address) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(g for g, f in self._gid_fid.items() if f == family))

    def nodes_of_gateway(self, gateway: Address) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(n for n, g in self._nid_gid.items() if g == gateway))

    def nodes_of_family(self, family: Address) -> tuple[Address, ...]:
        with self._lock:
            gids = {g for g, f in self._gid_fid.items() if f == family}
            return tuple(sorted(n for n, g in self._nid_gid.items() if g in gids))

    def all_areas(self) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(self._areas))

    def record_of_family(self, family: Address) -> RegistryRecord:
        with self._lock:
            area = self.area_of_family(family)
            gateways = tuple((g, self._gid_jid[g]) for g in self.gateways_of_family(family))
            users = tuple(
                (u, (self.dids_of_user(u) or (None,))[0]) for u in self.users_of_family(family)
            )
            devices = tuple(
                (n, self._nid_kind[n], g)
                for g in self.gateways_of_family(family)
                for n in self.nodes_of_gateway(g)
            )
            return RegistryRecord(family, area, gateways, users, devices)

    def check_bijections(self) -> None:
        """Raise if any structural invariant is broken (used by property tests)."""
        with self._lock:
            assert len(self._gid_jid) == len(self._jid_gid)
            for g, j in self._gid_jid.items():
                assert self._jid_gid[j] == g
            for d, u in self._did_uid.items():
                assert u in self._uid_fid
            for u, f in self._uid_fid.items():
                assert f in self._fid_aid
            for n, g in self._nid_gid.items():
                assert g in self._gid_jid
            for f, a in self._fid_aid.items():
                assert a in self._areas
