"""Command-line entry points for running fabric processes and experiments.

Subcommands: broker, cloud, gateway (long-running processes); sim-day, plot,
bench, scenario (experiments); stack-up / stack-down (spawn or kill a full
local stack as OS processes); recent (query a gateway's local sample log).
"""

from __future__ import annotations

import argparse
import json
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

from .broker import Broker
from .cloud import COMPONENT_JID, Cloud
from .drm import DayScenario, DrmConfig, LoadTrace, plot_trace, run_day
from .gateway import Gateway, GatewayConfig, GatewayRuntime, build_device_table
from .harness import BenchConfig, ScenarioSpec, run_latency_bench, run_scenario
from .stack import FabricDelays
from .transport import Clock, TcpConn, TcpListener


def _serve_forever() -> None:
    stop = []
    signal.signal(signal.SIGTERM, lambda *_: stop.append(1))
    try:
        while not stop:
            time.sleep(0.3)
    except KeyboardInterrupt:
        pass


def cmd_broker(args: argparse.Namespace) -> int:
    clock = Clock.real(args.epoch)
    broker = Broker(clock, log_path=args.log)
    if args.provision_file:
        n = broker.load_provision_file(args.provision_file)
        print(f"[broker] loaded {n} provision records", flush=True)
    port = broker.serve_tcp(args.host, args.port)
    print(f"[broker] listening on {args.host}:{port}", flush=True)
    _serve_forever()
    broker.close()
    return 0


def cmd_cloud(args: argparse.Namespace) -> int:
    clock = Clock.real(args.epoch)
    cloud = Cloud(clock, audit_log=args.audit_log)
    host, port = args.broker.rsplit(":", 1)
    conn = None
    for _ in range(50):  # the broker may still be booting
        try:
            conn = TcpConn.connect(host, int(port), timeout=2.0)
            break
        except OSError:
            time.sleep(0.2)
    if conn is None:
        print("[cloud] cannot reach the broker", file=sys.stderr)
        return 1
    cloud.connect_broker(conn)
    if args.bootstrap:
        topology = json.loads(Path(args.bootstrap).read_text(encoding="utf-8"))
        _bootstrap_registry(cloud, topology)
        print(f"[cloud] bootstrapped {len(topology.get('families', []))} families", flush=True)
    listener = TcpListener(args.host, args.service_port, cloud.accept_service)
    print(f"[cloud] service on {args.host}:{listener.port}", flush=True)
    _serve_forever()
    if args.ledger_csv:
        rows = cloud.export_ledger_csv(args.ledger_csv)
        print(f"[cloud] wrote {rows} ledger rows to {args.ledger_csv}", flush=True)
    listener.close()
    cloud.close()
    return 0


def _bootstrap_registry(cloud: Cloud, topology: dict) -> None:
    registry = cloud.registry
    areas = [registry.register_area() for _ in range(int(topology.get("areas", 1)))]
    for family_spec in topology.get("families", []):
        area = areas[int(family_spec.get("area", 1)) - 1]
        family = registry.register_family(area)
        for _ in range(int(family_spec.get("users", 1))):
            user = registry.register_user(family)
            registry.register_device_id(user)
        gid_addr, _jid = registry.register_gateway(family)
        for dev_spec in family_spec.get("devices", []):
            registry.register_node(gid_addr, dev_spec["kind"])


def cmd_gateway(args: argparse.Namespace) -> int:
    config, table = GatewayConfig.from_json(args.config)
    if args.seed is not None:
        config.link_seed = args.seed
    clock = Clock.real(args.epoch)
    gateway = Gateway(config, clock, local_log=args.local_log)
    build_device_table(gateway, table)
    runtime = GatewayRuntime(gateway, poll=not args.no_poll)
    runtime.start()
    print(f"[gateway] {config.gid.token} running (aid={config.aid.token})", flush=True)
    _serve_forever()
    runtime.stop()
    return 0


def cmd_sim_day(args: argparse.Namespace) -> int:
    scenario = DayScenario.from_json(args.config) if args.config else DayScenario()
    if args.seed is not None:
        scenario.seed = args.seed
    if args.freeze_arrivals:
        scenario.freeze_arrivals_during_drm = True
    slots = scenario.base_params.slots
    config = DrmConfig(peak_limit_kw=args.limit, trigger_kw=args.trigger,
                       slots_per_day=slots, sample_period_s=86400.0 / slots)
    result = run_day(config, scenario, drm_enabled=not args.no_drm)
    result.trace.to_csv(args.out)
    above = int((result.trace.controlled_kw > config.peak_limit_kw).sum())
    print(f"wrote {args.out}: {len(result.trace.base_kw)} slots, "
          f"{len(result.directives)} directives, {above} slots above {config.peak_limit_kw} kW")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    trace = LoadTrace.from_csv(args.trace)
    plot_trace(trace, args.out, peak_limit_kw=args.limit, trigger_kw=args.trigger)
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    mix = tuple(int(x) for x in args.mix.split(":"))
    if len(mix) != 3:
        print("mix must be b:d:c", file=sys.stderr)
        return 2
    config = BenchConfig(
        clients=args.clients,
        mix=mix,
        concurrent=not args.serialized,
        areas=args.areas,
        broadcast_areas=args.broadcast_areas,
        homes=args.homes,
        seed=args.seed,
        delays=FabricDelays.paper_calibrated(extra_ms=args.extra_delay),
        transport=args.transport,
    )
    report = run_latency_bench(config)
    report.to_csv(args.out)
    print(report.summary_table())
    print(f"mode={report.mode} clients={report.clients} "
          f"unaccounted={len(report.unaccounted)} failed={len(report.failures)}")
    report.require_valid(sample_floor=min(config.sample_floor, config.clients // 10 or 1))
    print(f"wrote {args.out}")
    return 0


def cmd_scenario(args: argparse.Namespace) -> int:
    spec = ScenarioSpec.from_json(args.spec)
    report = run_scenario(spec)
    report.to_json(args.out)
    print(f"wrote {args.out}: {len(report.outcomes)} events, "
          f"{sum(len(v) for v in report.gateway_deliveries.values())} gateway deliveries")
    return 0


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def cmd_stack_up(args: argparse.Namespace) -> int:
    state_dir = Path(args.dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    topology = json.loads(Path(args.topology).read_text(encoding="utf-8"))
    epoch = time.time()
    broker_port = args.base_port or _free_port()
    service_port = (args.base_port + 1) if args.base_port else _free_port()

    provision_path = state_dir / "provision.json"
    provision_path.write_text(json.dumps({
        "areas": [],
        "records": [{"principal": COMPONENT_JID.token, "role": "Component", "areas": []}],
    }, indent=2), encoding="utf-8")

    python = sys.executable
    procs: list[dict] = []

    def spawn(name: str, cmd: list[str]) -> None:
        log = open(state_dir / f"{name}.log", "a")
        proc = subprocess.Popen(cmd, stdout=log, stderr=subprocess.STDOUT)
        procs.append({"name": name, "pid": proc.pid})

    spawn("broker", [python, "-m", "gridfabric", "broker", "--port", str(broker_port),
                     "--provision-file", str(provision_path),
                     "--log", str(state_dir / "broker-deliveries.jsonl"),
                     "--epoch", str(epoch)])
    _wait_port(broker_port)
    spawn("cloud", [python, "-m", "gridfabric", "cloud",
                    "--service-port", str(service_port),
                    "--broker", f"127.0.0.1:{broker_port}",
                    "--bootstrap", str(Path(args.topology).resolve()),
                    "--audit-log", str(state_dir / "cloud-audit.jsonl"),
                    "--epoch", str(epoch)])
    _wait_port(service_port)

    # gateway configs mirror the registry's deterministic allocation order
    gw_configs = _gateway_configs(topology, broker_port, service_port)
    for i, cfg in enumerate(gw_configs, start=1):
        path = state_dir / f"gateway-{i}.json"
        path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
        spawn(f"gateway-{i}", [python, "-m", "gridfabric", "gateway",
                               "--config", str(path), "--epoch", str(epoch),
                               "--local-log", str(state_dir / f"gateway-{i}.jsonl")])

    state = {"epoch": epoch, "broker_port": broker_port, "service_port": service_port,
             "procs": procs}
    (state_dir / "stack-state.json").write_text(json.dumps(state, indent=2), encoding="utf-8")
    print(f"stack up: broker :{broker_port}, service :{service_port}, "
          f"{len(gw_configs)} gateways; state in {state_dir}")
    return 0


def _wait_port(port: int, timeout_s: float = 15.0) -> None:
    deadline = time.time() + timeout_s
    while time.time() < deadline:
        try:
            with socket.create_connection(("127.0.0.1", port), timeout=0.5):
                return
        except OSError:
            time.sleep(0.1)
    raise TimeoutError(f"port {port} never came up")


def _gateway_configs(topology: dict, broker_port: int, service_port: int) -> list[dict]:
    configs = []
    nid_counter = 0
    for i, family_spec in enumerate(topology.get("families", []), start=1):
        devices = []
        for dev_spec in family_spec.get("devices", []):
            nid_counter += 1
            devices.append({
                "nid": f"NID{nid_counter}",
                "kind": dev_spec["kind"],
                **({"rating_w": dev_spec["rating_w"]} if "rating_w" in dev_spec else {}),
                **({"metric": dev_spec["metric"]} if "metric" in dev_spec else {}),
                **({"link": dev_spec["link"]} if "link" in dev_spec else {}),
            })
        configs.append({
            "gid": f"GID{i}",
            "jid": f"JID{i}",
            "aid": f"AID{int(family_spec.get('area', 1))}",
            "poll_interval_s": family_spec.get("poll_interval_s", 10.0),
            "broker": ["127.0.0.1", broker_port],
            "cloud": ["127.0.0.1", service_port],
            "devices": devices,
        })
    return configs


def cmd_stack_down(args: argparse.Namespace) -> int:
    state_path = Path(args.dir) / "stack-state.json"
    if not state_path.exists():
        print(f"no stack state at {state_path}", file=sys.stderr)
        return 1
    state = json.loads(state_path.read_text(encoding="utf-8"))
    import os

    for proc in reversed(state.get("procs", [])):
        try:
            os.kill(proc["pid"], signal.SIGTERM)
            print(f"stopped {proc['name']} (pid {proc['pid']})")
        except ProcessLookupError:
            print(f"{proc['name']} (pid {proc['pid']}) already gone")
    state_path.unlink()
    return 0


def cmd_recent(args: argparse.Namespace) -> int:
    cutoff_ms = None
    rows = 0
    lines = Path(args.local_log).read_text(encoding="utf-8").splitlines()
    batches = [json.loads(line) for line in lines if '"event": "batch"' in line or '"event":"batch"' in line]
    if batches:
        latest = max(b["t_ms"] for b in batches)
        cutoff_ms = latest - int(args.hours * 3_600_000)
    for batch in batches:
        if cutoff_ms is not None and batch["t_ms"] < cutoff_ms:
            continue
        for nid_token, metric, value, ts in batch.get("samples", []):
            print(f"{ts}\t{nid_token}\t{metric}\t{value}")
            rows += 1
    print(f"({rows} samples from the last {args.hours} h)", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridfabric",
                                     description="residential smart-grid IoT fabric")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run the pub-sub broker")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--provision-file", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--epoch", type=float, default=None)
    p.set_defaults(fn=cmd_broker)

    p = sub.add_parser("cloud", help="run the cloud service tier")
    p.add_argument("--service-port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--broker", required=True, help="host:port of the broker")
    p.add_argument("--bootstrap", default=None, help="topology JSON to register at boot")
    p.add_argument("--audit-log", default=None)
    p.add_argument("--ledger-csv", default=None)
    p.add_argument("--epoch", type=float, default=None)
    p.set_defaults(fn=cmd_cloud)

    p = sub.add_parser("gateway", help="run one home gateway")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--local-log", default=None)
    p.add_argument("--no-poll", action="store_true")
    p.add_argument("--epoch", type=float, default=None)
    p.set_defaults(fn=cmd_gateway)

    p = sub.add_parser("sim-day", help="run the 8640-slot peak-shaving day")
    p.add_argument("--config", default=None, help="day scenario JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="trace.csv")
    p.add_argument("--no-drm", action="store_true")
    p.add_argument("--freeze-arrivals", action="store_true")
    p.add_argument("--limit", type=float, default=33.0)
    p.add_argument("--trigger", type=float, default=33.5)
    p.set_defaults(fn=cmd_sim_day)

    p = sub.add_parser("plot", help="render a day trace CSV to SVG")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default="trace.svg")
    p.add_argument("--limit", type=float, default=33.0)
    p.add_argument("--trigger", type=float, default=33.5)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("bench", help="per-segment latency bench")
    p.add_argument("--clients", type=int, default=1000)
    p.add_argument("--mix", default="1:1:1", help="broadcast:direct:control proportions")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--concurrent", action="store_true", default=True)
    group.add_argument("--serialized", action="store_true")
    p.add_argument("--homes", type=int, default=100)
    p.add_argument("--areas", type=int, default=5)
    p.add_argument("--broadcast-areas", type=int, default=2)
    p.add_argument("--extra-delay", type=float, default=0.0, help="WAN-like ms per segment")
    p.add_argument("--transport", choices=("memory", "tcp"), default="memory")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default="report.csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("scenario", help="run a scripted scenario")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default="report.json")
    p.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("stack-up", help="spawn broker/cloud/gateways as processes")
    p.add_argument("--topology", required=True)
    p.add_argument("--dir", default="gridfabric-stack")
    p.add_argument("--base-port", type=int, default=None)
    p.set_defaults(fn=cmd_stack_up)

    p = sub.add_parser("stack-down", help="stop a spawned stack")
    p.add_argument("--dir", default="gridfabric-stack")
    p.set_defaults(fn=cmd_stack_down)

    p = sub.add_parser("recent", help="print a gateway's recent samples from its local log")
    p.add_argument("--local-log", required=True)
    p.add_argument("--hours", type=float, default=24.0)
    p.set_defaults(fn=cmd_recent)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
