"""Telemetry samples and the per-node energy ledger.

Power integration uses the rectangle rule: each power sample is held until
the next sample on the same node, so energy added over an interval is
``held_watts * interval_ms / 3_600_000`` Wh.  The first sample on a node
contributes no energy; it only starts the hold.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .model import Address, FabricError

MS_PER_HOUR = 3_600_000
MS_PER_DAY = 86_400_000


class Metric(str, Enum):
    POWER_W = "PowerW"
    TEMPERATURE_C = "TemperatureC"
    HUMIDITY = "Humidity"
    MOTION = "Motion"
    LIGHT = "Light"
    NOISE = "Noise"


class BadBatch(FabricError):
    pass


@dataclass(frozen=True)
class TelemetrySample:
    nid: Address
    metric: Metric
    value: float
    sampled_at: int  # ms since the run epoch

    def __post_init__(self) -> None:
        if self.metric is Metric.POWER_W and self.value < 0:
            raise BadBatch(f"negative power sample on {self.nid}")

    def to_wire(self) -> list:
        return [self.nid.token, self.metric.value, self.value, self.sampled_at]

    @classmethod
    def from_wire(cls, raw: list) -> "TelemetrySample":
        from .model import parse_address

        nid_token, metric, value, ts = raw
        return cls(parse_address(nid_token), Metric(metric), float(value), int(ts))


@dataclass
class _NodeSeries:
    points: list[tuple[int, float, float]]  # (ts, power_w, cumulative_wh)

    def last(self) -> tuple[int, float, float] | None:
        return self.points[-1] if self.points else None


class EnergyLedger:
    """Cumulative Wh per node, integrated from PowerW samples."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._series: dict[Address, _NodeSeries] = {}

    def add_power_sample(self, nid: Address, ts: int, watts: float) -> float:
        """Record a power sample; returns the Wh added since the prior sample."""
        if watts < 0:
            raise BadBatch(f"negative power sample on {nid}")
        with self._lock:
            series = self._series.setdefault(nid, _NodeSeries([]))
            last = series.last()
            if last is None:
                series.points.append((ts, watts, 0.0))
                return 0.0
            last_ts, last_w, last_wh = last
            if ts < last_ts:
                raise BadBatch(f"timestamps must be non-decreasing per node ({nid})")
            added = last_w * (ts - last_ts) / MS_PER_HOUR
            series.points.append((ts, watts, last_wh + added))
            return added

    def last_point(self, nid: Address) -> tuple[int, float, float] | None:
        """(ts, power_w, cumulative_wh) of the newest sample, if any."""
        with self._lock:
            series = self._series.get(nid)
            return series.last() if series is not None else None

    def energy_at(self, nid: Address, ts: int) -> float:
        """Cumulative Wh at time ts (held-rate interpolation between samples)."""
        with self._lock:
            series = self._series.get(nid)
            if series is None or not series.points or ts < series.points[0][0]:
                return 0.0
            pts = series.points
            lo, hi = 0, len(pts) - 1
            while lo < hi:
                mid = (lo + hi + 1) // 2
                if pts[mid][0] <= ts:
                    lo = mid
                else:
                    hi = mid - 1
            base_ts, base_w, base_wh = pts[lo]
            return base_wh + base_w * (ts - base_ts) / MS_PER_HOUR

    def series(self, nid: Address, start_ms: int, end_ms: int) -> list[tuple[int, float]]:
        """(ts, cumulative_wh) points with start_ms <= ts <= end_ms."""
        if end_ms < start_ms:
            return []
        with self._lock:
            node = self._series.get(nid)
            if node is None:
                return []
            return [(ts, wh) for ts, _w, wh in node.points if start_ms <= ts <= end_ms]

    def timestamps(self, nids, start_ms: int, end_ms: int) -> list[int]:
        with self._lock:
            stamps: set[int] = set()
            for nid in nids:
                node = self._series.get(nid)
                if node is None:
                    continue
                stamps.update(ts for ts, _w, _wh in node.points if start_ms <= ts <= end_ms)
            return sorted(stamps)

    def known_nodes(self) -> tuple[Address, ...]:
        with self._lock:
            return tuple(sorted(self._series))

    def export_csv(self, path: str | Path) -> int:
        """Write `nid,timestamp_ms,power_w,energy_wh` rows; returns row count."""
        with self._lock:
            rows = [
                (nid.token, ts, w, wh)
                for nid in sorted(self._series)
                for ts, w, wh in self._series[nid].points
            ]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["nid", "timestamp_ms", "power_w", "energy_wh"])
            writer.writerows(rows)
        return len(rows)


class ThresholdTracker:
    """Per-user daily energy accounting with upward-crossing alerts.

    A user's accounted energy is their family's total for the current
    accounting day (interval energy is attributed to the day containing the
    interval start).  Because energy only grows within a day, each threshold
    crosses at most once per day; a new day re-arms it implicitly.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._thresholds: dict[Address, float] = {}  # uid -> Wh
        self._day_wh: dict[tuple[Address, int], float] = {}  # (fid, day) -> Wh

    def set_threshold(self, uid: Address, wh: float) -> None:
        with self._lock:
            self._thresholds[uid] = wh

    def threshold_of(self, uid: Address) -> float | None:
        with self._lock:
            return self._thresholds.get(uid)

    def add_family_energy(self, fid: Address, interval_start_ms: int, added_wh: float,
                          uids: tuple[Address, ...]) -> list[tuple[Address, float, float, int]]:
        """Account added energy; returns (uid, energy_wh, threshold_wh, day)
        for every user whose threshold was crossed by this addition."""
        if added_wh <= 0:
            return []
        day = interval_start_ms // MS_PER_DAY
        with self._lock:
            key = (fid, day)
            before = self._day_wh.get(key, 0.0)
            after = before + added_wh
            self._day_wh[key] = after
            crossed = []
            for uid in uids:
                t = self._thresholds.get(uid)
                if t is not None and before < t <= after:
                    crossed.append((uid, after, t, day))
            return crossed

    def day_energy(self, fid: Address, day: int) -> float:
        with self._lock:
            return self._day_wh.get((fid, day), 0.0)
