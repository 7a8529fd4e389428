"""Timelines, percentiles, dominance analysis, energy/cost accounting, export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .resources import CpuPool, GpuDevice
from .simcore import to_s


def percentile(values: list[float], p: float) -> float:
    """Nearest-rank percentile: sorted value at 1-based index ceil(p/100*n)."""
    if not values:
        raise ValueError("percentile of empty list")
    if not 0 < p <= 100:
        raise ValueError(f"percentile p must be in (0, 100], got {p}")
    ordered = sorted(values)
    rank = math.ceil(p / 100.0 * len(ordered))
    return ordered[rank - 1]


@dataclass
class TimelineSample:
    t_s: float
    cpu_util: float
    gpu_utils: list[float]
    gpu_powers: list[float]
    dram_used: int


def dominance(samples: list[TimelineSample]) -> dict:
    """Fraction of samples each resource class dominates.

    A sample is GPU-dominant when the busiest GPU's utilization strictly
    exceeds CPU utilization; ties (including fully idle samples) count
    toward the CPU so the fractions always sum to one.
    """
    if not samples:
        raise ValueError("dominance of empty timeline")
    gpu_dominant = 0
    for s in samples:
        gpu_max = max(s.gpu_utils) if s.gpu_utils else 0.0
        if gpu_max > s.cpu_util:
            gpu_dominant += 1
    gpu_frac = gpu_dominant / len(samples)
    return {"cpu_frac": 1.0 - gpu_frac, "gpu_frac": gpu_frac}


def energy(power_breakpoints: list[tuple[float, float]]) -> float:
    """Watt-hours of a piecewise-constant power trace.

    Each (t, watts) entry holds until the next breakpoint; the final
    entry terminates the trace.
    """
    wh = 0.0
    for (t0, w), (t1, _) in zip(power_breakpoints, power_breakpoints[1:]):
        if t1 < t0:
            raise ValueError("power breakpoints must be time-sorted")
        wh += w * (t1 - t0) / 3600.0
    return wh


def cost(makespan_s: float, devices: list[GpuDevice]) -> float:
    """USD for holding every device for the full makespan."""
    if makespan_s < 0:
        raise ValueError("makespan must be non-negative")
    return sum(d.price_per_hour for d in devices) * makespan_s / 3600.0


def _step_value(transitions: list[tuple[int, int]], t_us: int) -> int:
    """Value of a right-continuous step function at t_us."""
    value = transitions[0][1]
    for trans_t, v in transitions:
        if trans_t > t_us:
            break
        value = v
    return value


def sample_timeline(pool: CpuPool, devices: list[GpuDevice], makespan_us: int,
                    interval_s: float) -> list[TimelineSample]:
    """Fixed-interval samples of utilization, power, and DRAM occupancy."""
    interval_us = max(1, int(round(interval_s * 1e6)))
    samples: list[TimelineSample] = []
    # step-function cursors, one linear pass over each transition log
    cursors = {d.id: 0 for d in devices}
    cpu_cursor = 0
    dram_cursor = 0
    cpu_trans = pool.busy_transitions
    dram_trans = pool.dram_transitions
    dev_trans = {d.id: d.busy_transitions for d in devices}
    cpu_val = 0
    dram_val = 0
    dev_val = {d.id: 0 for d in devices}
    t = 0
    while t <= makespan_us:
        while cpu_cursor < len(cpu_trans) and cpu_trans[cpu_cursor][0] <= t:
            cpu_val = cpu_trans[cpu_cursor][1]
            cpu_cursor += 1
        while dram_cursor < len(dram_trans) and dram_trans[dram_cursor][0] <= t:
            dram_val = dram_trans[dram_cursor][1]
            dram_cursor += 1
        gpu_utils = []
        gpu_powers = []
        for d in devices:
            trans = dev_trans[d.id]
            c = cursors[d.id]
            while c < len(trans) and trans[c][0] <= t:
                dev_val[d.id] = trans[c][1]
                c += 1
            cursors[d.id] = c
            busy = dev_val[d.id] > 0
            gpu_utils.append(d.busy_util_pct if busy else 0.0)
            gpu_powers.append(d.active_watts() if busy else d.idle_watts())
        samples.append(
            TimelineSample(
                t_s=to_s(t),
                cpu_util=100.0 * cpu_val / pool.cores,
                gpu_utils=gpu_utils,
                gpu_powers=gpu_powers,
                dram_used=dram_val,
            )
        )
        t += interval_us
    return samples


def export_json(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_timeline_csv(samples: list[TimelineSample], n_devices: int, path) -> None:
    """Timeline CSV: t,cpu_util,gpu<i>_util...,gpu<i>_power...,dram_used."""
    header = ["t", "cpu_util"]
    header += [f"gpu{i}_util" for i in range(n_devices)]
    header += [f"gpu{i}_power" for i in range(n_devices)]
    header.append("dram_used")
    lines = [",".join(header)]
    for s in samples:
        row = [f"{s.t_s:.1f}", f"{s.cpu_util:.2f}"]
        row += [f"{u:.2f}" for u in s.gpu_utils]
        row += [f"{p:.3f}" for p in s.gpu_powers]
        row.append(str(s.dram_used))
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def export(report: dict, fmt: str, path, samples: list[TimelineSample] | None = None,
           n_devices: int = 0) -> None:
    if fmt.upper() == "JSON":
        export_json(report, path)
    elif fmt.upper() == "CSV":
        if samples is None:
            raise ValueError("CSV export needs timeline samples")
        export_timeline_csv(samples, n_devices, path)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
