"""Simulated devices and household load models.

A day is 8640 slots of 10 s.  Lights follow a per-slot turn-on probability
with a minimum on-duration; demand-response shedding only *masks* a light's
natural on-state (the profile keeps evolving underneath), so a controlled run
with the same seed can never draw more than its uncontrolled twin, and a
restored light simply resumes its profile.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .model import Address, FabricError
from .energy import Metric

SLOTS_PER_DAY = 8640
SLOT_SECONDS = 10.0


class InvalidSetting(FabricError):
    pass


class InvalidParams(FabricError):
    pass


@dataclass
class LightProfile:
    """Per-slot probability of a light turning on, plus its hold time."""

    on_probability: np.ndarray  # shape (slots,), values in [0, 1]
    rating_w: float = 100.0
    min_on_slots: int = 30  # 5 minutes at 10 s slots

    def __post_init__(self) -> None:
        self.on_probability = np.asarray(self.on_probability, dtype=float)
        if self.on_probability.ndim != 1:
            raise InvalidParams("on_probability must be one-dimensional")
        if np.any(self.on_probability < 0) or np.any(self.on_probability > 1):
            raise InvalidParams("probabilities must lie in [0, 1]")
        if self.rating_w <= 0:
            raise InvalidParams("rating must be positive")

    @classmethod
    def day_peaked(cls, slots: int = SLOTS_PER_DAY, rating_w: float = 100.0) -> "LightProfile":
        """Default shape: busy 09:00-18:00, quiet overnight."""
        hours = np.arange(slots) * (24.0 / slots)
        p = np.full(slots, 0.002)
        p[(hours >= 6) & (hours < 9)] = 0.01
        p[(hours >= 9) & (hours < 18)] = 0.08
        p[(hours >= 18) & (hours < 23)] = 0.02
        return cls(on_probability=p, rating_w=rating_w)

    @classmethod
    def constant(cls, p: float, slots: int = SLOTS_PER_DAY, rating_w: float = 100.0,
                 min_on_slots: int = 30) -> "LightProfile":
        return cls(np.full(slots, float(p)), rating_w=rating_w, min_on_slots=min_on_slots)


class Device:
    """Mutable simulated device state."""

    kind = "Device"

    def __init__(self, nid: Address, rating_w: float = 0.0) -> None:
        self.nid = nid
        self.rating_w = rating_w

    @property
    def power_w(self) -> float:
        return 0.0

    def step(self, slot: int, rng: random.Random, *, freeze_arrivals: bool = False) -> None:
        """Advance one slot.  Every device draws the same number of RNG values
        regardless of its state, so trajectories with equal seeds stay aligned
        across control variants."""

    def apply(self, name: str, value) -> None:
        raise InvalidSetting(f"{self.kind} has no setting {name!r}")

    def describe(self) -> dict:
        return {"nid": self.nid.token, "kind": self.kind, "power_w": self.power_w}


class Plug(Device):
    kind = "Plug"

    def __init__(self, nid: Address, rating_w: float = 500.0, on: bool = False) -> None:
        super().__init__(nid, rating_w)
        self.on = on

    @property
    def power_w(self) -> float:
        return self.rating_w if self.on else 0.0

    def apply(self, name: str, value) -> None:
        if name == "power" and value in ("on", "off"):
            self.on = value == "on"
        else:
            raise InvalidSetting(f"Plug setting must be power=on|off, got {name}={value!r}")

    def describe(self) -> dict:
        return {**super().describe(), "on": self.on}


class Light(Device):
    kind = "Light"

    def __init__(self, nid: Address, profile: LightProfile) -> None:
        super().__init__(nid, profile.rating_w)
        self.profile = profile
        self.natural_on = False
        self.on_until_slot = -1
        self.shed = False  # demand-response mask; profile keeps running underneath

    @property
    def power_w(self) -> float:
        return self.rating_w if (self.natural_on and not self.shed) else 0.0

    def step(self, slot: int, rng: random.Random, *, freeze_arrivals: bool = False) -> None:
        draw = rng.random()  # always consume one draw per slot
        if self.natural_on and slot >= self.on_until_slot:
            self.natural_on = False
        if not self.natural_on and not freeze_arrivals:
            p = self.profile.on_probability[slot % len(self.profile.on_probability)]
            if draw < p:
                self.natural_on = True
                self.on_until_slot = slot + self.profile.min_on_slots

    def apply(self, name: str, value) -> None:
        if name == "power" and value in ("on", "off"):
            self.natural_on = value == "on"
            if value == "off":
                self.on_until_slot = -1
        elif name == "shed" and isinstance(value, bool):
            self.shed = value
        else:
            raise InvalidSetting(f"Light setting must be power=on|off or shed=bool, got {name}={value!r}")

    def describe(self) -> dict:
        return {**super().describe(), "natural_on": self.natural_on, "shed": self.shed}


class AirConditioner(Device):
    kind = "AC"

    SETPOINT_MIN = 16.0
    SETPOINT_MAX = 30.0

    def __init__(self, nid: Address, rating_w: float = 1000.0, setpoint_c: float = 24.0,
                 on: bool = True) -> None:
        super().__init__(nid, rating_w)
        self.setpoint_c = float(setpoint_c)
        self.on = on

    @property
    def power_w(self) -> float:
        # Constant rated draw while on; the setpoint tracks comfort, not watts.
        return self.rating_w if self.on else 0.0

    def apply(self, name: str, value) -> None:
        if name == "power" and value in ("on", "off"):
            self.on = value == "on"
        elif name == "setpoint_c":
            self.setpoint_c = self._clamp(float(value))
        elif name == "setpoint_delta_c":
            self.setpoint_c = self._clamp(self.setpoint_c + float(value))
        else:
            raise InvalidSetting(f"AC setting must be power/setpoint_c/setpoint_delta_c, got {name}={value!r}")

    def _clamp(self, c: float) -> float:
        return min(max(c, self.SETPOINT_MIN), self.SETPOINT_MAX)

    def describe(self) -> dict:
        return {**super().describe(), "setpoint_c": self.setpoint_c, "on": self.on}


class Sensor(Device):
    kind = "Sensor"

    _BASES = {
        Metric.TEMPERATURE_C: (25.0, 1.5),
        Metric.HUMIDITY: (60.0, 8.0),
        Metric.LIGHT: (300.0, 80.0),
        Metric.NOISE: (40.0, 6.0),
        Metric.MOTION: (0.0, 0.0),
    }

    def __init__(self, nid: Address, metric: Metric) -> None:
        super().__init__(nid, 0.0)
        self.metric = metric
        self.value = self._BASES.get(metric, (0.0, 0.0))[0]
        self.forced_value: float | None = None  # scenario-injected reading

    def step(self, slot: int, rng: random.Random, *, freeze_arrivals: bool = False) -> None:
        base, spread = self._BASES.get(self.metric, (0.0, 0.0))
        noise = rng.uniform(-spread, spread)
        if self.forced_value is None:
            self.value = 0.0 if self.metric is Metric.MOTION else base + noise

    def read(self) -> float:
        return self.value if self.forced_value is None else self.forced_value

    def force(self, value: float | None) -> None:
        self.forced_value = value

    def describe(self) -> dict:
        return {**super().describe(), "metric": self.metric.value, "value": self.read()}


class Camera(Device):
    kind = "Camera"

    def __init__(self, nid: Address) -> None:
        super().__init__(nid, 0.0)
        self.recording = False

    def apply(self, name: str, value) -> None:
        if name == "recording" and isinstance(value, bool):
            self.recording = value
        else:
            raise InvalidSetting(f"Camera setting must be recording=bool, got {name}={value!r}")

    def describe(self) -> dict:
        return {**super().describe(), "recording": self.recording}


def device_step(dev: Device, slot: int, rng: random.Random, *, freeze_arrivals: bool = False) -> Device:
    """Advance a device one slot; mutates and returns the same object."""
    dev.step(slot, rng, freeze_arrivals=freeze_arrivals)
    return dev


def apply_setting(dev: Device, setting: dict) -> Device:
    """Apply a {name, value} setting; raises InvalidSetting on a bad pair."""
    if not isinstance(setting, dict) or set(setting) != {"name", "value"}:
        raise InvalidSetting(f"setting must be a {{name, value}} pair, got {setting!r}")
    dev.apply(setting["name"], setting["value"])
    return dev


def make_device(nid: Address, kind: str, *, rating_w: float | None = None,
                metric: str | Metric | None = None,
                profile: LightProfile | None = None) -> Device:
    if kind == "Plug":
        return Plug(nid, rating_w if rating_w is not None else 500.0)
    if kind == "Light":
        prof = profile or LightProfile.day_peaked(rating_w=rating_w or 100.0)
        return Light(nid, prof)
    if kind == "AC":
        return AirConditioner(nid, rating_w if rating_w is not None else 1000.0)
    if kind == "Sensor":
        return Sensor(nid, Metric(metric or Metric.TEMPERATURE_C))
    if kind == "Camera":
        return Camera(nid)
    raise InvalidParams(f"unknown device kind {kind!r}")


# ---------------------------------------------------------------------------
# Community base load
# ---------------------------------------------------------------------------

# Diurnal anchor points (hour, relative level): low overnight, morning rise,
# sustained day plateau, evening shoulder.
_TEMPLATE_ANCHORS = (
    (0.0, 0.30), (4.0, 0.18), (6.0, 0.22), (8.0, 0.65), (9.0, 0.92),
    (12.0, 1.00), (14.0, 0.97), (17.0, 0.95), (18.0, 0.85), (20.0, 0.70),
    (22.0, 0.45), (24.0, 0.30),
)


@dataclass(frozen=True)
class BaseLoadParams:
    min_kw: float = 26.0
    max_kw: float = 32.8
    noise_kw: float = 0.4
    slots: int = SLOTS_PER_DAY

    def __post_init__(self) -> None:
        if self.min_kw > self.max_kw:
            raise InvalidParams(f"min_kw {self.min_kw} exceeds max_kw {self.max_kw}")
        if self.min_kw < 0 or self.noise_kw < 0 or self.slots < 1:
            raise InvalidParams("base-load parameters must be non-negative")


@dataclass
class BaseLoadCurve:
    kw: np.ndarray
    seed: int
    params: BaseLoadParams

    def __post_init__(self) -> None:
        self.kw = np.asarray(self.kw, dtype=float)
        if len(self.kw) != self.params.slots or np.any(self.kw < 0):
            raise InvalidParams("base-load curve must be non-negative with one value per slot")


def diurnal_template(params: BaseLoadParams) -> np.ndarray:
    """The deterministic diurnal shape scaled into [min_kw, max_kw]."""
    hours = np.arange(params.slots) * (24.0 / params.slots)
    xs = np.array([h for h, _ in _TEMPLATE_ANCHORS])
    ys = np.array([v for _, v in _TEMPLATE_ANCHORS])
    level = np.interp(hours, xs, ys)
    return params.min_kw + level * (params.max_kw - params.min_kw)


def generate_base_load(seed: int, params: BaseLoadParams | None = None) -> BaseLoadCurve:
    """Template plus seeded low-frequency sinusoid noise, clamped to [min, max]."""
    params = params or BaseLoadParams()
    curve = diurnal_template(params)
    if params.noise_kw > 0:
        rng = np.random.default_rng(seed)
        hours = np.arange(params.slots) * (24.0 / params.slots)
        noise = np.zeros(params.slots)
        n_waves = 6
        for _ in range(n_waves):
            period_h = rng.uniform(2.0, 8.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = params.noise_kw * rng.uniform(0.3, 1.0) / np.sqrt(n_waves)
            noise += amp * np.sin(2.0 * np.pi * hours / period_h + phase)
        curve = curve + noise
    curve = np.clip(curve, params.min_kw, params.max_kw)
    return BaseLoadCurve(kw=curve, seed=seed, params=params)
