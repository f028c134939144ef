"""gridfabric: a desk-scale residential smart-grid IoT fabric.

An addressable pub-sub broker, a cloud service tier with an offline-capable
push gateway, simulated home gateways with non-IP device links, a household
load simulator, a demand-response controller, and harnesses for the latency
and peak-shaving experiments.
"""

from .model import (
    Address,
    FabricError,
    FrameDecodeError,
    EncodeError,
    MalformedAddress,
    Message,
    MsgType,
    UnknownArea,
    aid,
    decode_frame,
    did,
    encode_frame,
    fid,
    gid,
    jid,
    nid,
    parse_address,
    uid,
)
from .broker import Broker, DeliveryReport, ProvisionRecord, Role
from .cloud import COMPONENT_JID, Cloud, CommandOutcome, PushNotice, PushReport
from .clients import ConsumerClient
from .devices import (
    BaseLoadCurve,
    BaseLoadParams,
    LightProfile,
    SLOTS_PER_DAY,
    generate_base_load,
)
from .drm import (
    DayResult,
    DayScenario,
    DrmConfig,
    DrmController,
    LoadTrace,
    brute_force_sheds,
    plot_trace,
    run_day,
    select_sheds,
)
from .energy import EnergyLedger, Metric, TelemetrySample
from .gateway import Gateway, GatewayConfig, GatewayRuntime, LinkModel
from .harness import (
    BenchConfig,
    IncompleteRun,
    LatencyReport,
    ScenarioReport,
    ScenarioSpec,
    SpecError,
    run_latency_bench,
    run_scenario,
)
from .registry import Registry
from .stack import FabricDelays, Stack, demo_topology
from .transport import Clock, DelayModel

__version__ = "0.1.0"

__all__ = [
    "Address", "FabricError", "FrameDecodeError", "EncodeError", "MalformedAddress",
    "Message", "MsgType", "UnknownArea", "parse_address", "encode_frame", "decode_frame",
    "aid", "fid", "uid", "did", "gid", "jid", "nid",
    "Broker", "DeliveryReport", "ProvisionRecord", "Role",
    "Cloud", "COMPONENT_JID", "CommandOutcome", "PushNotice", "PushReport",
    "ConsumerClient",
    "BaseLoadCurve", "BaseLoadParams", "LightProfile", "SLOTS_PER_DAY", "generate_base_load",
    "DayResult", "DayScenario", "DrmConfig", "DrmController", "LoadTrace",
    "brute_force_sheds", "plot_trace", "run_day", "select_sheds",
    "EnergyLedger", "Metric", "TelemetrySample",
    "Gateway", "GatewayConfig", "GatewayRuntime", "LinkModel",
    "BenchConfig", "IncompleteRun", "LatencyReport", "ScenarioReport", "ScenarioSpec",
    "SpecError", "run_latency_bench", "run_scenario",
    "Registry", "FabricDelays", "Stack", "demo_topology",
    "Clock", "DelayModel",
    "__version__",
]
