"""First-order electrical process model of a small MV/LV feeder.

Controllable assets follow normalized set-points toward
``setpoint * nominal_kw`` after a control-cycle delay, with exponential
relaxation. Bus voltages come from a radial sensitivity model: each feeder
segment adds ``(R * P + X * Q) / V_nominal`` for the net active power fed
in downstream of it (Q is zero here). Feed-in is positive and raises
voltage; consumption is negative.

The model cannot distinguish who commanded a set-point: identical command
timelines produce identical trajectories regardless of origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

V_NOMINAL_DEFAULT = 400.0
NAYY_R_OHM_PER_KM = 0.208  # NAYY 4x150 SE
NAYY_X_OHM_PER_KM = 0.08


class GridError(Exception):
    pass


class UnknownAsset(GridError):
    pass


class NotControllable(GridError):
    pass


class UnknownMeasuringPoint(GridError):
    pass


@dataclass(frozen=True)
class AssetSpec:
    """One DER or load: where it sits electrically and who controls it."""

    name: str
    nominal_kw: float
    bus: str
    controllable: bool = True
    rtu: Optional[str] = None
    ioa_setpoint: Optional[int] = None
    ioa_power: Optional[int] = None
    initial_setpoint: float = 0.0
    storage_kwh: Optional[float] = None  # battery capacity, if any

    def __post_init__(self):
        if self.nominal_kw <= 0:
            raise GridError(f"{self.name}: nominal power must be positive")
        if self.controllable and self.ioa_setpoint is None:
            raise GridError(f"{self.name}: controllable asset needs a set-point IOA")


@dataclass(frozen=True)
class FeederSegment:
    from_bus: str
    to_bus: str
    length_m: float
    r_ohm_per_km: float = NAYY_R_OHM_PER_KM
    x_ohm_per_km: float = NAYY_X_OHM_PER_KM

    def __post_init__(self):
        if self.length_m <= 0:
            raise GridError("segment length must be positive")

    @property
    def r_ohm(self) -> float:
        return self.r_ohm_per_km * self.length_m / 1000.0

    @property
    def x_ohm(self) -> float:
        return self.x_ohm_per_km * self.length_m / 1000.0


@dataclass(frozen=True)
class GridConfig:
    assets: tuple
    segments: tuple
    root_bus: str = "busbar"
    v_nominal: float = V_NOMINAL_DEFAULT
    tau_s: float = 0.4  # relaxation time constant
    control_delay_s: float = 1.0  # command to target-activation delay
    soc_initial: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "segments", tuple(self.segments))


class ProcessModel:
    """Mutable process state stepped on a fixed cadence by one owner."""

    def __init__(self, config: GridConfig):
        self.config = config
        self.time = 0.0
        self._assets = {a.name: a for a in config.assets}
        if len(self._assets) != len(config.assets):
            raise GridError("duplicate asset names")
        self.setpoints = {a.name: a.initial_setpoint for a in config.assets}
        # Constant-power assets (loads) hold their initial operating point.
        self.active_power_kw = {a.name: a.initial_setpoint * a.nominal_kw for a in config.assets}
        self.soc = {
            a.name: config.soc_initial * a.storage_kwh
            for a in config.assets
            if a.storage_kwh is not None
        }
        self._pending = []  # (t_effective, asset, value), applied during step()
        self._targets = dict(self.active_power_kw)
        self._children = {}
        self._parent_segment = {}
        for seg in config.segments:
            self._children.setdefault(seg.from_bus, []).append(seg)
            if seg.to_bus in self._parent_segment:
                raise GridError(f"bus {seg.to_bus} has two feeding segments")
            self._parent_segment[seg.to_bus] = seg
        self.buses = [config.root_bus] + [seg.to_bus for seg in config.segments]
        for a in config.assets:
            if a.bus not in self.buses:
                raise GridError(f"{a.name}: unknown bus {a.bus}")
        self.voltages = self._compute_voltages(self.active_power_kw)

    # -- commands ----------------------------------------------------------

    def asset(self, name: str) -> AssetSpec:
        try:
            return self._assets[name]
        except KeyError:
            raise UnknownAsset(name) from None

    def apply_setpoint(self, asset_name: str, value: float) -> float:
        """Record a normalized set-point; takes effect one control cycle
        later. Returns the clamped value actually scheduled."""
        spec = self.asset(asset_name)
        if not spec.controllable:
            raise NotControllable(asset_name)
        clamped = max(-1.0, min(1.0, float(value)))
        self.setpoints[asset_name] = clamped
        self._pending.append((self.time + self.config.control_delay_s, asset_name, clamped))
        return clamped

    # -- dynamics ----------------------------------------------------------

    def step(self, dt: float) -> None:
        if dt <= 0:
            raise GridError("dt must be positive")
        start = self.time
        remaining = []
        for t_eff, name, value in self._pending:
            if t_eff <= start:
                self._targets[name] = value * self._assets[name].nominal_kw
            else:
                remaining.append((t_eff, name, value))
        self._pending = remaining
        decay = math.exp(-dt / self.config.tau_s)
        for name, spec in self._assets.items():
            if not spec.controllable:
                continue
            target = self._targets[name]
            power = target + (self.active_power_kw[name] - target) * decay
            if spec.storage_kwh is not None:
                power = self._limit_storage(name, spec, power, dt)
            self.active_power_kw[name] = power
        self.voltages = self._compute_voltages(self.active_power_kw)
        self.time = start + dt

    def _limit_storage(self, name: str, spec: AssetSpec, power_kw: float, dt: float) -> float:
        # Positive power = discharge (feed-in). Clamp at empty/full.
        soc = self.soc[name] - power_kw * dt / 3600.0
        if soc <= 0.0:
            self.soc[name] = 0.0
            return 0.0 if power_kw > 0 else power_kw
        if soc >= spec.storage_kwh:
            self.soc[name] = spec.storage_kwh
            return 0.0 if power_kw < 0 else power_kw
        self.soc[name] = soc
        return power_kw

    # -- voltages ----------------------------------------------------------

    def _subtree_power_kw(self, bus: str, power_kw: dict) -> float:
        total = sum(p for name, p in power_kw.items() if self._assets[name].bus == bus)
        for seg in self._children.get(bus, []):
            total += self._subtree_power_kw(seg.to_bus, power_kw)
        return total

    def _compute_voltages(self, power_kw: dict) -> dict:
        vnom = self.config.v_nominal
        out = {self.config.root_bus: vnom}
        for bus in self.buses:
            if bus == self.config.root_bus:
                continue
            volts = vnom
            node = bus
            while node != self.config.root_bus:
                seg = self._parent_segment[node]
                p_watts = self._subtree_power_kw(seg.to_bus, power_kw) * 1000.0
                q_var = 0.0
                volts += (seg.r_ohm * p_watts + seg.x_ohm * q_var) / vnom
                node = seg.from_bus
            out[bus] = volts
        return out

    def voltage_at(self, bus: str) -> float:
        try:
            return self.voltages[bus]
        except KeyError:
            raise UnknownMeasuringPoint(bus) from None

    def voltages_for_powers(self, power_kw: dict) -> dict:
        """Steady-state voltages for an explicit power vector (kW)."""
        for name in power_kw:
            self.asset(name)
        full = {name: 0.0 for name in self._assets}
        full.update(power_kw)
        return self._compute_voltages(full)

    # -- export ------------------------------------------------------------

    def sample_rows(self) -> list:
        """Measurement rows (time_s, name, quantity, value) for CSV export."""
        rows = []
        for name in self._assets:
            rows.append((self.time, name, "P_kW", self.active_power_kw[name]))
            if self._assets[name].controllable:
                rows.append((self.time, name, "setpoint", self.setpoints[name]))
        for bus in self.buses:
            rows.append((self.time, bus, "V_V", self.voltages[bus]))
        return rows
