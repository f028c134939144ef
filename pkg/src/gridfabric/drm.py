"""Demand-response controller and the full-day peak-shaving experiment.

The controller samples the community meter once per 10 s slot.  Above the
trigger level it sheds the exact minimum set of lights (smallest cardinality,
then smallest wattage, then lexicographically smallest NIDs) that brings the
total back under the peak limit; once the meter has stayed comfortably below
the limit it restores sheds one per tick, largest-wattage last.

The meter reads end-of-slot totals and directives land at the next slot
boundary, which is what makes short exceedances above the limit visible in
the trace, exactly as on the reference testbed.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .devices import (
    BaseLoadCurve,
    BaseLoadParams,
    LightProfile,
    SLOTS_PER_DAY,
    generate_base_load,
)
from .model import Address, FabricError
from .stack import Stack


class DrmError(FabricError):
    pass


@dataclass(frozen=True)
class DrmConfig:
    peak_limit_kw: float = 33.0
    trigger_kw: float = 33.5
    sample_period_s: float = 10.0
    slots_per_day: int = SLOTS_PER_DAY
    hysteresis_kw: float = 0.5
    restore_hold_slots: int = 3
    drift_guard_kw: float = 0.05

    def __post_init__(self) -> None:
        if not (self.trigger_kw >= self.peak_limit_kw > 0):
            raise DrmError("trigger must be >= limit > 0")
        if abs(self.slots_per_day * self.sample_period_s - 86400.0) > 1e-6:
            raise DrmError("slots_per_day x sample_period must cover 24 h")


# ---------------------------------------------------------------------------
# Exact shed selection
# ---------------------------------------------------------------------------

def select_sheds(candidates, total_kw: float, limit_kw: float) -> frozenset[Address]:
    """Choose which lights to turn off.

    candidates: iterable of (nid, power_w, currently_on).  Returns the
    minimum-cardinality subset of on-lights whose wattage covers the excess
    (total - limit); among those, the smallest total wattage; among those,
    the lexicographically smallest NID set.  If nothing suffices, all
    candidates are shed.
    """
    on = sorted(((n, float(w)) for n, w, is_on in candidates if is_on), key=lambda t: t[0])
    need_w = (total_kw - limit_kw) * 1000.0
    if need_w <= 1e-9 or not on:
        return frozenset()
    powers = [w for _, w in on]
    if sum(powers) < need_w - 1e-9:
        return frozenset(n for n, _ in on)

    # minimum cardinality: the top-k powers are the best any k-subset can do
    desc = sorted(on, key=lambda t: (-t[1], t[0]))
    prefix = 0.0
    k_min = len(on)
    for i, (_, w) in enumerate(desc):
        prefix += w
        if prefix >= need_w - 1e-9:
            k_min = i + 1
            break

    # smallest achievable wattage for k_min items; if even the k smallest
    # cover the excess they are optimal outright (the homogeneous-fleet case)
    asc = sorted(powers)
    low_sum = sum(asc[:k_min])
    if low_sum >= need_w - 1e-9:
        best_sum = low_sum
    else:
        best_sum = _min_sum_covering(desc, k_min, need_w)

    chosen = _lexicographic_subset(on, k_min, best_sum)
    return frozenset(chosen)


def _min_sum_covering(desc: list[tuple[Address, float]], k: int, need_w: float) -> float:
    """Branch and bound: minimum sum of a k-subset with sum >= need_w."""
    n = len(desc)
    powers = [w for _, w in desc]
    # suffix max/min sums for c picks from position i onward
    suf_sorted = [sorted(powers[i:], reverse=True) for i in range(n + 1)]
    best: list[float | None] = [None]

    def dfs(i: int, count: int, cur: float) -> None:
        if count == k:
            if cur >= need_w - 1e-9 and (best[0] is None or cur < best[0] - 1e-9):
                best[0] = cur
            return
        slots = k - count
        if n - i < slots:
            return
        avail = suf_sorted[i]
        if cur + sum(avail[:slots]) < need_w - 1e-9:
            return  # even the largest remainders cannot cover the excess
        if best[0] is not None and cur + sum(avail[-slots:]) >= best[0] - 1e-9:
            return  # cannot beat the incumbent
        dfs(i + 1, count + 1, cur + powers[i])
        dfs(i + 1, count, cur)

    dfs(0, 0, 0.0)
    assert best[0] is not None
    return best[0]


def _lexicographic_subset(on_by_nid: list[tuple[Address, float]], k: int, target_sum: float) -> list[Address]:
    """Greedy NID-ascending construction of a k-subset with the target sum."""
    n = len(on_by_nid)
    powers = [w for _, w in on_by_nid]
    asc_suffix = [sorted(powers[i:]) for i in range(n + 1)]
    memo: dict[tuple[int, int, int], bool] = {}

    def feasible(i: int, count: int, remaining: float) -> bool:
        if count == 0:
            return abs(remaining) < 1e-6
        if n - i < count:
            return False
        suffix = asc_suffix[i]
        if remaining < sum(suffix[:count]) - 1e-6 or remaining > sum(suffix[-count:]) + 1e-6:
            return False
        key = (i, count, int(round(remaining * 1000)))
        cached = memo.get(key)
        if cached is not None:
            return cached
        result = feasible(i + 1, count - 1, remaining - powers[i]) or feasible(i + 1, count, remaining)
        memo[key] = result
        return result

    chosen: list[Address] = []
    remaining = target_sum
    count = k
    i = 0
    while count > 0:
        nid_i, w_i = on_by_nid[i]
        if feasible(i + 1, count - 1, remaining - w_i):
            chosen.append(nid_i)
            remaining -= w_i
            count -= 1
        i += 1
    return chosen


def brute_force_sheds(candidates, total_kw: float, limit_kw: float) -> frozenset[Address]:
    """Exhaustive oracle over all subsets (for instances of ~15 candidates)."""
    from itertools import combinations

    on = sorted(((n, float(w)) for n, w, is_on in candidates if is_on), key=lambda t: t[0])
    need_w = (total_kw - limit_kw) * 1000.0
    if need_w <= 1e-9 or not on:
        return frozenset()
    if sum(w for _, w in on) < need_w - 1e-9:
        return frozenset(n for n, _ in on)
    best: tuple[float, list[Address]] | None = None
    for k in range(1, len(on) + 1):
        for combo in combinations(on, k):
            s = sum(w for _, w in combo)
            if s >= need_w - 1e-9:
                nids = [n for n, _ in combo]
                if best is None or s < best[0] - 1e-9 or (abs(s - best[0]) < 1e-9 and nids < best[1]):
                    best = (s, nids)
        if best is not None:
            return frozenset(best[1])
    return frozenset(n for n, _ in on)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

class DrmController:
    """Stateful per-slot controller; emits at most one directive per tick."""

    def __init__(self, config: DrmConfig) -> None:
        self.config = config
        self.active_sheds: dict[Address, float] = {}
        self._restore_streak = 0
        self.directives: list[tuple[int, dict]] = []

    @property
    def drm_active(self) -> bool:
        return bool(self.active_sheds)

    def tick(self, slot: int, meter_total_kw: float, candidates) -> dict | None:
        cfg = self.config
        if meter_total_kw > cfg.trigger_kw:
            self._restore_streak = 0
            sheds = select_sheds(candidates, meter_total_kw,
                                 cfg.peak_limit_kw - cfg.drift_guard_kw)
            if not sheds:
                return None
            by_nid = {n: w for n, w, is_on in candidates if is_on}
            for n in sheds:
                self.active_sheds[n] = by_nid.get(n, 0.0)
            directive = {
                "action": "off",
                "device_kind": "Light",
                "nids": [n.token for n in sorted(sheds)],
            }
            self.directives.append((slot, directive))
            return directive
        if meter_total_kw <= cfg.peak_limit_kw - cfg.hysteresis_kw:
            self._restore_streak += 1
        else:
            self._restore_streak = 0
        if self.active_sheds and self._restore_streak >= cfg.restore_hold_slots:
            nid = min(self.active_sheds, key=lambda n: (self.active_sheds[n], n))
            del self.active_sheds[nid]
            directive = {"action": "restore", "device_kind": "Light", "nids": [nid.token]}
            self.directives.append((slot, directive))
            return directive
        return None


# ---------------------------------------------------------------------------
# Day simulation
# ---------------------------------------------------------------------------

@dataclass
class LoadTrace:
    base_kw: np.ndarray
    uncontrolled_kw: np.ndarray
    controlled_kw: np.ndarray
    drm_active: np.ndarray
    shed_nids: list[tuple[str, ...]]

    def __post_init__(self) -> None:
        for slot in range(len(self.base_kw)):
            if self.shed_nids[slot] and not self.drm_active[slot]:
                raise DrmError("shed set must be empty when DRM is inactive")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slot", "base_kw", "uncontrolled_kw", "controlled_kw",
                             "drm_active", "shed_nids"])
            for slot in range(len(self.base_kw)):
                writer.writerow([
                    slot,
                    f"{self.base_kw[slot]:.6f}",
                    f"{self.uncontrolled_kw[slot]:.6f}",
                    f"{self.controlled_kw[slot]:.6f}",
                    int(self.drm_active[slot]),
                    ";".join(self.shed_nids[slot]),
                ])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LoadTrace":
        base, unc, con, act, sheds = [], [], [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                base.append(float(row["base_kw"]))
                unc.append(float(row["uncontrolled_kw"]))
                con.append(float(row["controlled_kw"]))
                act.append(bool(int(row["drm_active"])))
                sheds.append(tuple(t for t in row["shed_nids"].split(";") if t))
        return cls(np.array(base), np.array(unc), np.array(con), np.array(act), sheds)


@dataclass
class DayScenario:
    """Fleet description for the peak-shaving day: homes with lights only, a
    shared community base-load curve, and explicit seeds."""

    homes: int = 10
    lights_per_home: int = 4
    light_rating_w: float = 100.0
    min_on_slots: int = 30
    base_params: BaseLoadParams = field(default_factory=BaseLoadParams)
    seed: int = 7
    freeze_arrivals_during_drm: bool = False

    def topology(self) -> dict:
        light = {"kind": "Light", "rating_w": self.light_rating_w}
        return {
            "areas": 1,
            "families": [
                {"area": 1, "users": 1, "devices": [dict(light) for _ in range(self.lights_per_home)]}
                for _ in range(self.homes)
            ],
        }

    def light_profile(self) -> LightProfile:
        profile = LightProfile.day_peaked(slots=self.base_params.slots,
                                          rating_w=self.light_rating_w)
        return LightProfile(profile.on_probability, self.light_rating_w, self.min_on_slots)

    @classmethod
    def from_json(cls, path: str | Path) -> "DayScenario":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        base_raw = raw.get("base_params", {})
        params = BaseLoadParams(
            min_kw=float(base_raw.get("min_kw", 26.0)),
            max_kw=float(base_raw.get("max_kw", 32.8)),
            noise_kw=float(base_raw.get("noise_kw", 0.4)),
            slots=int(base_raw.get("slots", SLOTS_PER_DAY)),
        )
        return cls(
            homes=int(raw.get("homes", 10)),
            lights_per_home=int(raw.get("lights_per_home", 4)),
            light_rating_w=float(raw.get("light_rating_w", 100.0)),
            min_on_slots=int(raw.get("min_on_slots", 30)),
            base_params=params,
            seed=int(raw.get("seed", 7)),
            freeze_arrivals_during_drm=bool(raw.get("freeze_arrivals_during_drm", False)),
        )


@dataclass
class DayResult:
    trace: LoadTrace
    directives: list[tuple[int, dict]]
    config: DrmConfig
    scenario: DayScenario


def _run_pass(config: DrmConfig, scenario: DayScenario, base: BaseLoadCurve,
              drm_enabled: bool) -> tuple[np.ndarray, np.ndarray, list[tuple[str, ...]], list]:
    slots = config.slots_per_day
    period_ms = int(config.sample_period_s * 1000)
    stack = Stack(scenario.topology(), mode="stepped",
                  light_profile=scenario.light_profile(), seed=scenario.seed)
    try:
        area = stack.areas[0]
        controller = DrmController(config)
        home_devices = []
        home_rngs = []
        for idx, info in enumerate(stack.families):
            gateway = stack.gateways[info.gid]
            home_devices.append(sorted(gateway.devices().items()))
            home_rngs.append(random.Random((scenario.seed << 16) + idx))
        all_devices = [dev for devs in home_devices for _node, dev in devs]
        lights = [
            (node, dev)
            for devs in home_devices
            for node, dev in devs
            if dev.kind == "Light"
        ]
        totals = np.zeros(slots)
        active = np.zeros(slots, dtype=bool)
        sheds: list[tuple[str, ...]] = []
        for slot in range(slots):
            stack.clock.advance_to(slot * period_ms)
            freeze = scenario.freeze_arrivals_during_drm and controller.drm_active
            for idx, devs in enumerate(home_devices):
                rng = home_rngs[idx]
                for _node, dev in devs:
                    dev.step(slot, rng, freeze_arrivals=freeze)
            # the meter and the trace read the same fleet: load conservation
            total = base.kw[slot] + sum(dev.power_w for dev in all_devices) / 1000.0
            totals[slot] = total
            if drm_enabled:
                candidates = [(node, dev.rating_w, dev.power_w > 0) for node, dev in lights]
                directive = controller.tick(slot, total, candidates)
                if directive is not None:
                    stack.cloud.dispatch_drm(area, directive)
            active[slot] = controller.drm_active
            sheds.append(tuple(sorted(n.token for n in controller.active_sheds)))
        return totals, active, sheds, controller.directives
    finally:
        stack.close()


def run_day(config: DrmConfig | None = None, scenario: DayScenario | None = None,
            *, drm_enabled: bool = True) -> DayResult:
    """Run the coupled day loop twice (identical seeds): once with the
    controller in the loop and once without, yielding the paired traces."""
    config = config or DrmConfig()
    scenario = scenario or DayScenario()
    if scenario.base_params.slots != config.slots_per_day:
        raise DrmError("scenario slot count must match the controller's slots_per_day")
    base = generate_base_load(scenario.seed, scenario.base_params)
    uncontrolled, _, _, _ = _run_pass(config, scenario, base, drm_enabled=False)
    if drm_enabled:
        controlled, active, sheds, directives = _run_pass(config, scenario, base, drm_enabled=True)
    else:
        controlled, active, sheds, directives = uncontrolled.copy(), np.zeros(
            config.slots_per_day, dtype=bool), [()] * config.slots_per_day, []
    trace = LoadTrace(base.kw.copy(), uncontrolled, controlled, active, sheds)
    return DayResult(trace, directives, config, scenario)


def plot_trace(trace: LoadTrace, out_path: str | Path, *, peak_limit_kw: float = 33.0,
               trigger_kw: float | None = 33.5) -> None:
    """Render the day chart: base load, with/without control, and the limit."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    slots = len(trace.base_kw)
    hours = np.arange(slots) * (24.0 / slots)
    fig, ax = plt.subplots(figsize=(11, 5))
    ax.fill_between(hours, 0, trace.base_kw, color="0.8", label="base load")
    ax.fill_between(hours, trace.base_kw, trace.uncontrolled_kw,
                    color="tab:blue", alpha=0.45, label="without control")
    ax.fill_between(hours, trace.base_kw, trace.controlled_kw,
                    color="tab:green", alpha=0.55, label="with control")
    ax.plot(hours, trace.controlled_kw, color="tab:blue", linewidth=0.7)
    ax.axhline(peak_limit_kw, color="red", linewidth=1.5, label=f"peak limit {peak_limit_kw} kW")
    if trigger_kw is not None:
        ax.axhline(trigger_kw, color="red", linewidth=0.8, linestyle="--",
                   label=f"trigger {trigger_kw} kW")
    ax.set_xlabel("hour of day")
    ax.set_ylabel("community load (kW)")
    ax.set_xlim(0, 24)
    ax.set_ylim(bottom=min(float(trace.base_kw.min()) - 2.0, peak_limit_kw - 8.0))
    ax.legend(loc="lower right", fontsize=9)
    ax.set_title("Peak shaving by light control")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
