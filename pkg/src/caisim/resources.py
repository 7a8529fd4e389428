"""CPU pools, GPU devices, DVFS frequency tables, and power accounting.

Per-GPU behavior is driven entirely by profile data: an ordered frequency
table mapping SM frequency to a relative performance scale and to active /
idle power draw. Tensor-parallel variants ship as separate profiles whose
price and wattage cover the whole multi-GPU setup.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError, FrequencyError
from .simcore import to_s


@dataclass(frozen=True)
class FreqPoint:
    mhz: float
    perf_scale: float
    active_w: float
    idle_w: float


@dataclass
class GpuProfile:
    """Calibration data for one accelerator configuration."""

    name: str
    memory_gb: float
    price_per_hour: float
    slots: int
    freq_table: list[FreqPoint]

    def __post_init__(self):
        if not self.freq_table:
            raise ConfigError(f"profile[{self.name}].freq_table", "must not be empty")
        self.freq_table.sort(key=lambda p: p.mhz)
        prev = None
        for pt in self.freq_table:
            if pt.active_w < pt.idle_w:
                raise ConfigError(
                    f"profile[{self.name}].freq_table",
                    f"active_w {pt.active_w} below idle_w {pt.idle_w} at {pt.mhz} MHz",
                )
            if prev is not None and pt.perf_scale <= prev.perf_scale:
                raise ConfigError(
                    f"profile[{self.name}].freq_table",
                    "perf_scale must strictly increase with frequency",
                )
            prev = pt

    @property
    def min_mhz(self) -> float:
        return self.freq_table[0].mhz

    @property
    def max_mhz(self) -> float:
        return self.freq_table[-1].mhz


def profile_from_dict(obj: dict, source: str = "profile") -> GpuProfile:
    try:
        table = [
            FreqPoint(
                mhz=float(p["mhz"]),
                perf_scale=float(p["perf_scale"]),
                active_w=float(p["active_w"]),
                idle_w=float(p["idle_w"]),
            )
            for p in obj["freq_table"]
        ]
        return GpuProfile(
            name=str(obj["name"]),
            memory_gb=float(obj["memory_gb"]),
            price_per_hour=float(obj["price_per_hour"]),
            slots=int(obj["slots"]),
            freq_table=table,
        )
    except KeyError as exc:
        raise ConfigError(f"{source}.{exc.args[0]}", "missing required field") from exc


def load_profile_file(path) -> GpuProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return profile_from_dict(json.load(fh), source=str(path))


def perf_scale(profile: GpuProfile, mhz: float) -> float:
    """Performance scale at mhz, linearly interpolated between table points."""
    table = profile.freq_table
    if mhz < table[0].mhz or mhz > table[-1].mhz:
        raise FrequencyError(
            f"{mhz} MHz outside table range [{table[0].mhz}, {table[-1].mhz}] "
            f"for profile {profile.name}"
        )
    for lo, hi in zip(table, table[1:]):
        if lo.mhz <= mhz <= hi.mhz:
            if hi.mhz == lo.mhz:
                return lo.perf_scale
            frac = (mhz - lo.mhz) / (hi.mhz - lo.mhz)
            return lo.perf_scale + frac * (hi.perf_scale - lo.perf_scale)
    return table[-1].perf_scale


def _interp_power(profile: GpuProfile, mhz: float, attr: str) -> float:
    table = profile.freq_table
    if mhz < table[0].mhz or mhz > table[-1].mhz:
        raise FrequencyError(f"{mhz} MHz outside table range for profile {profile.name}")
    for lo, hi in zip(table, table[1:]):
        if lo.mhz <= mhz <= hi.mhz:
            if hi.mhz == lo.mhz:
                return getattr(lo, attr)
            frac = (mhz - lo.mhz) / (hi.mhz - lo.mhz)
            return getattr(lo, attr) + frac * (getattr(hi, attr) - getattr(lo, attr))
    return getattr(table[-1], attr)


@dataclass
class WorkVector:
    """Per-stage work description consumed by service_time."""

    uncached_prefill_tokens: int = 0
    decode_tokens: int = 0
    uncached_frames: int = 0
    unit_work: float = 0.0


@dataclass
class StageServiceModel:
    """Service-time model: a frequency-independent part plus a scaled part."""

    fixed_time: float = 0.0
    compute_time: float = 0.0
    per_token_prefill: float = 0.0
    per_token_decode: float = 0.0
    per_frame_encode: float = 0.0

    def __post_init__(self):
        for name in ("fixed_time", "compute_time", "per_token_prefill",
                     "per_token_decode", "per_frame_encode"):
            if getattr(self, name) < 0:
                raise ConfigError(f"service_model.{name}", "must be non-negative")


class GpuDevice:
    """One accelerator configuration instance inside a simulation."""

    def __init__(self, device_id: str, profile: GpuProfile, group: str,
                 frequency_mhz: float | None = None, slots: int | None = None,
                 busy_util_pct: float = 100.0):
        self.id = device_id
        self.profile = profile
        self.group = group
        self.slots = slots if slots is not None else profile.slots
        self.busy_util_pct = busy_util_pct
        self.price_per_hour = profile.price_per_hour
        self.hbm_capacity = int(profile.memory_gb * 1e9)
        self.current_freq_mhz = profile.max_mhz if frequency_mhz is None else frequency_mhz
        perf_scale(profile, self.current_freq_mhz)  # validate range
        self.kv_cache = None
        self.mm_cache = None
        # runtime state
        self.active = 0
        self.inflight_requests = 0
        # (time_us, active_count) transitions for power/utilization traces
        self.busy_transitions: list[tuple[int, int]] = [(0, 0)]

    @property
    def scale(self) -> float:
        return perf_scale(self.profile, self.current_freq_mhz)

    def active_watts(self) -> float:
        return _interp_power(self.profile, self.current_freq_mhz, "active_w")

    def idle_watts(self) -> float:
        return _interp_power(self.profile, self.current_freq_mhz, "idle_w")

    def begin_service(self, t_us: int) -> None:
        self.active += 1
        self.busy_transitions.append((t_us, self.active))

    def end_service(self, t_us: int) -> None:
        self.active -= 1
        assert self.active >= 0
        self.busy_transitions.append((t_us, self.active))


class CpuPool:
    """Host CPU cores plus DRAM occupancy tracking."""

    def __init__(self, cores: int, dram_capacity_bytes: int):
        self.cores = cores
        self.dram_capacity = dram_capacity_bytes
        self.busy_cores = 0
        self.dram_used = 0
        self.busy_transitions: list[tuple[int, int]] = [(0, 0)]
        self.dram_transitions: list[tuple[int, int]] = [(0, 0)]

    def acquire_core(self, t_us: int) -> None:
        self.busy_cores += 1
        assert self.busy_cores <= self.cores
        self.busy_transitions.append((t_us, self.busy_cores))

    def release_core(self, t_us: int) -> None:
        self.busy_cores -= 1
        assert self.busy_cores >= 0
        self.busy_transitions.append((t_us, self.busy_cores))

    def dram_add(self, t_us: int, nbytes: int) -> None:
        self.dram_used = min(self.dram_capacity, self.dram_used + nbytes)
        self.dram_transitions.append((t_us, self.dram_used))

    def dram_remove(self, t_us: int, nbytes: int) -> None:
        self.dram_used = max(0, self.dram_used - nbytes)
        self.dram_transitions.append((t_us, self.dram_used))


def service_time(model: StageServiceModel, device, work: WorkVector) -> float:
    """Stage duration in seconds for the given work on the given resource.

    fixed_time is frequency independent; everything else divides by the
    device's perf scale at its current frequency. CPU pools run at scale 1.
    """
    if min(work.uncached_prefill_tokens, work.decode_tokens, work.uncached_frames) < 0:
        raise ValueError("work vector components must be non-negative")
    if work.unit_work < 0:
        raise ValueError("work vector components must be non-negative")
    scaled = (
        model.compute_time
        + model.per_token_prefill * work.uncached_prefill_tokens
        + model.per_token_decode * work.decode_tokens
        + model.per_frame_encode * work.uncached_frames
        + work.unit_work
    )
    scale = device.scale if isinstance(device, GpuDevice) else 1.0
    return model.fixed_time + scaled / scale


def set_frequency(device: GpuDevice, mhz: float) -> None:
    """Retarget the device's SM frequency; only allowed between services."""
    if device.active > 0:
        raise FrequencyError(
            f"cannot change frequency of {device.id} with {device.active} requests in service"
        )
    perf_scale(device.profile, mhz)  # raises if out of range
    device.current_freq_mhz = mhz


def instantaneous_power(device: GpuDevice, t_us: int | None = None) -> float:
    """Power draw in watts; piecewise constant between events.

    With t_us the busy state is reconstructed from the transition log,
    otherwise the current state is used.
    """
    if t_us is None:
        busy = device.active > 0
    else:
        busy = False
        for trans_t, count in device.busy_transitions:
            if trans_t > t_us:
                break
            busy = count > 0
    return device.active_watts() if busy else device.idle_watts()


def power_breakpoints(device: GpuDevice, end_us: int) -> list[tuple[float, float]]:
    """(time_s, watts) breakpoints from service start/end transitions.

    The final breakpoint at end_us carries the terminal power level and is
    not integrated past.
    """
    points: list[tuple[float, float]] = []
    active_w = device.active_watts()
    idle_w = device.idle_watts()
    last_busy = None
    for t_us, count in device.busy_transitions:
        if t_us > end_us:
            break
        busy = count > 0
        if busy != last_busy:
            points.append((to_s(t_us), active_w if busy else idle_w))
            last_busy = busy
    points.append((to_s(end_us), active_w if last_busy else idle_w))
    return points
