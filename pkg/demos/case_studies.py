#!/usr/bin/env python3
"""The five application flows, end to end through the full fabric.

Each scenario boots a fresh stack (broker + cloud + three home gateways in
two areas), runs its scripted events, and prints the evidence: who received
what, and how device state changed.
"""

import json

from gridfabric import run_scenario
from gridfabric.scenarios import case_study_specs


def frame_types(lines):
    return [json.loads(line)["t"] for line in lines]


def show(report):
    print(f"\n=== {report.name} ===")
    for outcome in report.outcomes:
        label = outcome["action"]
        detail = outcome.get("outcome")
        if isinstance(detail, dict):
            brief = {k: v for k, v in detail.items() if k in
                     ("delivered", "pushed", "ok", "error", "fired", "uploaded")}
            print(f"  {label}: {brief}" if brief else f"  {label}")
        else:
            print(f"  {label}")
    if report.gateway_deliveries:
        for jid_token, lines in report.gateway_deliveries.items():
            print(f"  {jid_token} received {frame_types(lines)}")
    for did_token, lines in report.client_pushes.items():
        if lines:
            print(f"  {did_token} pushes: {frame_types(lines)}")


specs = case_study_specs()

# 1. Demand response: the grid asks every Area-1 AC to run 2 degrees higher.
report = run_scenario(specs["drm"])
show(report)
print("  AC setpoints:", {n: s["setpoint_c"] for n, s in report.device_states.items()
                          if s["kind"] == "AC"})

# 2. Dynamic pricing: Area-2 broadcast plus push to exactly that area's users.
report = run_scenario(specs["pricing"])
show(report)

# 3. Energy monitoring: ingest two plugs for an hour, query the family view.
report = run_scenario(specs["monitoring"])
show(report)
series = report.outcomes[-1]["outcome"]
print("  per-device Wh:", {k: v[-1][1] for k, v in series["per_nid"].items() if v})
print("  family total Wh:", series["total"][-1][1])

# 4. Home automation: User 1 of Family 2 sets the bedroom AC from a client.
report = run_scenario(specs["automation"])
show(report)
print("  NID6 state:", report.device_states["NID6"])

# 5. Home security: away mode + motion -> family-wide alarm + camera start.
report = run_scenario(specs["security"])
show(report)
print("  camera recording:", report.device_states["NID9"]["recording"])

# Bonus: the energy threshold alert that rides the same push gateway.
report = run_scenario(specs["threshold"])
show(report)
print("\ndone.")
