"""Simplified IEC 61850 device model and per-switch protection pipeline.

Each switch agent owns one device: a server holding one logical device whose
logical nodes run in a fixed order every sample — TCTR measures the current,
PIOC compares it against the pickup threshold, PTRC conditions the trip over
consecutive pickups, CSWI issues the open command and XCBR schedules the
physical position change. Every intermediate value is visible as a data
object, addressed by dotted path (e.g. ``CB1.LD0.PIOC1.Str``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

LN_ORDER = ("TCTR1", "PIOC1", "PTRC1", "CSWI1", "XCBR1")


@dataclass
class ProtectionConfig:
    threshold_a: float
    trip_persistence: int = 1  # consecutive over-threshold samples before PTRC trips
    operate_delay: int = 0  # ticks between CSWI command and XCBR position change
    sampling_period: int = 1

    def __post_init__(self) -> None:
        if self.threshold_a <= 0:
            raise ValueError("threshold must be positive")
        if self.trip_persistence < 1:
            raise ValueError("trip persistence must be >= 1")
        if self.operate_delay < 0:
            raise ValueError("operate delay must be >= 0")
        if self.sampling_period < 1:
            raise ValueError("sampling period must be >= 1")


@dataclass
class DeviceModel:
    """Server -> logical device -> logical nodes -> data objects."""

    server: str
    logical_device: str = "LD0"
    data: dict[str, dict[str, object]] = field(default_factory=dict)
    # Update journal: (tick, dotted path, value), in write order.
    journal: list[tuple[int, str, object]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for ln in LN_ORDER:
            self.data.setdefault(ln, {})
        self.data["TCTR1"].setdefault("Amp", 0.0)
        self.data["PIOC1"].setdefault("Str", False)  # instantaneous pickup
        self.data["PIOC1"].setdefault("Op", False)  # latched pickup since last reset
        self.data["PIOC1"].setdefault("StrCnt", 0)
        self.data["PTRC1"].setdefault("Tr", False)
        self.data["CSWI1"].setdefault("OpOpn", False)
        self.data["XCBR1"].setdefault("Pos", "Closed")
        self.data["TCTR1"].setdefault("LastTick", -1)

    def path(self, ln: str, do: str) -> str:
        return f"{self.server}.{self.logical_device}.{ln}.{do}"

    def write(self, tick: int, ln: str, do: str, value: object) -> None:
        self.data[ln][do] = value
        self.journal.append((tick, self.path(ln, do), value))

    def read(self, ln: str, do: str) -> object:
        return self.data[ln][do]

    @property
    def detection_latched(self) -> bool:
        """Fault-current-seen flag exposed to the coordination layer."""
        return bool(self.data["PIOC1"]["Op"])

    def reset_latch(self, tick: int) -> None:
        self.write(tick, "PIOC1", "Op", False)
        self.write(tick, "PIOC1", "StrCnt", 0)
        self.write(tick, "PTRC1", "Tr", False)
        self.write(tick, "CSWI1", "OpOpn", False)


@dataclass(frozen=True)
class TripCommand:
    """An open command issued by CSWI, effective after the operate delay."""

    switch: str
    issued_tick: int
    effective_tick: int


def ln_pipeline_step(
    device: DeviceModel,
    config: ProtectionConfig,
    current_a: float,
    tick: int,
    trip_enabled: bool = True,
) -> TripCommand | None:
    """Run one sample through TCTR->PIOC->PTRC->CSWI->XCBR.

    Returns the trip command when CSWI operates this sample. ROS/TIE units
    run the same pipeline with tripping disabled: they latch detections but
    only open on command. Out-of-order or misaligned ticks are ignored with
    a diagnostic journal entry.
    """
    last = device.data["TCTR1"]["LastTick"]
    assert isinstance(last, int)
    if tick <= last or tick % config.sampling_period != 0:
        device.journal.append((tick, device.path("TCTR1", "AmpSkipped"), current_a))
        return None
    device.write(tick, "TCTR1", "LastTick", tick)
    device.write(tick, "TCTR1", "Amp", current_a)

    pickup = current_a > config.threshold_a  # strict comparison
    device.write(tick, "PIOC1", "Str", pickup)
    count = device.data["PIOC1"]["StrCnt"]
    assert isinstance(count, int)
    count = count + 1 if pickup else 0
    device.write(tick, "PIOC1", "StrCnt", count)
    if pickup and not device.data["PIOC1"]["Op"]:
        device.write(tick, "PIOC1", "Op", True)

    trip = count >= config.trip_persistence
    device.write(tick, "PTRC1", "Tr", trip)
    if not (trip and trip_enabled):
        return None
    if device.data["CSWI1"]["OpOpn"]:
        return None  # already commanded; nothing new to issue
    device.write(tick, "CSWI1", "OpOpn", True)
    effective = tick + config.operate_delay
    device.write(tick, "XCBR1", "PosCmd", "Open")
    return TripCommand(switch=device.server, issued_tick=tick, effective_tick=effective)


def apply_position(device: DeviceModel, tick: int, position: str) -> None:
    """Record the physical position change at the XCBR level.

    A reclose rearms CSWI so the pipeline can trip again if fault current
    returns.
    """
    if position == "Closed":
        device.write(tick, "CSWI1", "OpOpn", False)
    device.write(tick, "XCBR1", "Pos", position)
