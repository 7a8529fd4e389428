"""Arrival-process generation: open-loop Poisson, closed-loop, trace replay."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import TraceParseError
from .simcore import RngStream, to_us


@dataclass
class ArrivalSchedule:
    """Arrival times in microseconds, strictly increasing.

    kind "closed_loop" carries no pre-computed times beyond the first
    release at t=0; the engine gates each subsequent arrival on the
    previous completion.
    """

    kind: str
    times_us: list[int] = field(default_factory=list)
    n: int | None = None  # closed loop only


def poisson_arrivals(rate_qps: float, horizon_s: float, rng: RngStream) -> ArrivalSchedule:
    """Open-loop Poisson arrivals: i.i.d. exponential gaps, one draw each.

    Generation stops at the horizon; coincident times (possible only
    through rounding) are perturbed forward by one microsecond.
    """
    if rate_qps <= 0:
        raise ValueError(f"rate must be positive, got {rate_qps}")
    if horizon_s <= 0:
        raise ValueError(f"horizon must be positive, got {horizon_s}")
    horizon_us = to_us(horizon_s)
    times: list[int] = []
    t = 0.0
    while True:
        t += rng.exponential(rate_qps)
        t_us = to_us(t)
        if t_us > horizon_us:
            break
        if times and t_us <= times[-1]:
            t_us = times[-1] + 1
            if t_us > horizon_us:
                break
        times.append(t_us)
    return ArrivalSchedule(kind="poisson", times_us=times)


def closed_loop(n: int) -> ArrivalSchedule:
    """Sequential load: request i+1 is released when request i completes."""
    if n < 1:
        raise ValueError(f"closed loop needs n >= 1, got {n}")
    return ArrivalSchedule(kind="closed_loop", times_us=[0], n=n)


def load_trace(path) -> ArrivalSchedule:
    """Replay a plain-text trace: one non-negative arrival seconds per line."""
    times: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                value = float(line)
            except ValueError as exc:
                raise TraceParseError(str(path), line_no, f"not a number: {line!r}") from exc
            if value < 0:
                raise TraceParseError(str(path), line_no, f"negative arrival time {value}")
            t_us = to_us(value)
            if times and t_us < times[-1]:
                raise TraceParseError(str(path), line_no, "arrival times must be sorted")
            if times and t_us == times[-1]:
                t_us += 1
            times.append(t_us)
    return ArrivalSchedule(kind="trace", times_us=times)
