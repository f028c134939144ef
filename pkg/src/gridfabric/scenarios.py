"""Canonical scripted scenarios for the five application flows.

All five run against the demo topology (two areas, three families) and are
asserted end to end against the registry: exact recipient sets, exact device
state changes.
"""

from __future__ import annotations

from .harness import ScenarioSpec
from .stack import demo_topology


def drm_scenario() -> ScenarioSpec:
    """Grid signal: every AC in Area 1 is set 2 degrees higher."""
    return ScenarioSpec(
        name="demand-response",
        topology=demo_topology(),
        events=[
            {"at_ms": 0, "action": "connect_client", "did": "DID1"},
            {"at_ms": 1000, "action": "dispatch_drm", "aid": "AID1",
             "directive": {"action": "setpoint_delta", "device_kind": "AC", "delta_c": 2}},
        ],
    )


def pricing_scenario() -> ScenarioSpec:
    """Dynamic price for Area 2: broadcast plus push to exactly DID5-DID9."""
    return ScenarioSpec(
        name="dynamic-pricing",
        topology=demo_topology(),
        events=[
            {"at_ms": 0, "action": "connect_client", "did": "DID5"},
            {"at_ms": 0, "action": "connect_client", "did": "DID6"},
            {"at_ms": 0, "action": "connect_client", "did": "DID1"},
            {"at_ms": 1000, "action": "publish_price", "aid": "AID2",
             "price_per_kwh": 0.31},
        ],
    )


def monitoring_scenario() -> ScenarioSpec:
    """Energy monitoring: two plugs at constant draw, then a user query."""
    return ScenarioSpec(
        name="energy-monitoring",
        topology=demo_topology(),
        events=[
            {"at_ms": 0, "action": "telemetry", "gid": "GID1",
             "samples": [["NID2", "PowerW", 100.0, 0], ["NID3", "PowerW", 50.0, 0]]},
            {"at_ms": 3_600_000, "action": "telemetry", "gid": "GID1",
             "samples": [["NID2", "PowerW", 100.0, 3_600_000],
                          ["NID3", "PowerW", 50.0, 3_600_000]]},
            {"at_ms": 3_600_500, "action": "query_energy", "did": "DID1"},
        ],
    )


def automation_scenario() -> ScenarioSpec:
    """User 1 of Family 2 sets the home AC to 24 C from a mobile client."""
    return ScenarioSpec(
        name="home-automation",
        topology=demo_topology(),
        events=[
            {"at_ms": 0, "action": "connect_client", "did": "DID5"},
            {"at_ms": 500, "action": "automation", "did": "DID5", "nid": "NID6",
             "setting": {"name": "setpoint_c", "value": 24}},
        ],
    )


def security_scenario() -> ScenarioSpec:
    """Family 3 goes away; motion trips the alarm and starts the camera."""
    return ScenarioSpec(
        name="home-security",
        topology=demo_topology(),
        events=[
            {"at_ms": 0, "action": "connect_client", "did": "DID10"},
            {"at_ms": 0, "action": "connect_client", "did": "DID11"},
            {"at_ms": 100, "action": "set_away", "fid": "FID3", "away": True},
            {"at_ms": 5000, "action": "motion", "gid": "GID3", "nid": "NID8", "value": 1},
        ],
    )


def threshold_scenario() -> ScenarioSpec:
    """A 500 Wh daily threshold crossed once by steady consumption."""
    return ScenarioSpec(
        name="threshold-alert",
        topology=demo_topology(),
        events=[
            {"at_ms": 0, "action": "connect_client", "did": "DID1"},
            {"at_ms": 0, "action": "set_threshold", "uid": "UID1", "threshold_wh": 500},
            {"at_ms": 0, "action": "telemetry", "gid": "GID1",
             "samples": [["NID2", "PowerW", 998.0, 0]]},
            {"at_ms": 1_800_000, "action": "telemetry", "gid": "GID1",
             "samples": [["NID2", "PowerW", 998.0, 1_800_000]]},
            {"at_ms": 1_810_000, "action": "telemetry", "gid": "GID1",
             "samples": [["NID2", "PowerW", 998.0, 1_810_000]]},
            {"at_ms": 3_600_000, "action": "telemetry", "gid": "GID1",
             "samples": [["NID2", "PowerW", 998.0, 3_600_000]]},
        ],
    )


def case_study_specs() -> dict[str, ScenarioSpec]:
    return {
        "drm": drm_scenario(),
        "pricing": pricing_scenario(),
        "monitoring": monitoring_scenario(),
        "automation": automation_scenario(),
        "security": security_scenario(),
        "threshold": threshold_scenario(),
    }
