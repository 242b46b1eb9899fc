"""RoCoF measurement and the definite-time RoCoF anti-islanding relay."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

# timer comparisons tolerate accumulated rounding of dt sums
TIMER_EPS = 1e-9


class TimestampError(ValueError):
    """Samples pushed out of order."""


@dataclass(frozen=True)
class RocofEstimatorCfg:
    sample_dt: float
    window: float = 0.1

    def __post_init__(self) -> None:
        if not self.sample_dt > 0:
            raise ValueError("sample_dt must be positive")
        if not self.window >= 2 * self.sample_dt:
            raise ValueError("window must span at least two samples")


class RocofEstimatorState:
    """Sliding window of (t, f) samples; the estimate is the least-squares slope."""

    def __init__(self) -> None:
        self.samples: deque[tuple[float, float]] = deque()
        self.estimate = 0.0

    @property
    def last_t(self) -> float | None:
        return self.samples[-1][0] if self.samples else None


def ls_slope(t: Sequence[float], f: Sequence[float]) -> float:
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    if t.size < 2:
        return 0.0
    tc = t - t.mean()
    fc = f - f.mean()
    return float(np.dot(tc, fc) / np.dot(tc, tc))


def rocof_update(est: RocofEstimatorState, f_sample: float, t: float, cfg: RocofEstimatorCfg) -> float:
    last = est.last_t
    if last is not None and not t > last:
        raise TimestampError(f"timestamp {t} does not follow {last}")
    est.samples.append((t, f_sample))
    horizon = t - cfg.window - TIMER_EPS
    while est.samples[0][0] < horizon:
        est.samples.popleft()
    if len(est.samples) < 2:
        est.estimate = 0.0
    else:
        ts, fs = zip(*est.samples)
        est.estimate = ls_slope(ts, fs)
    return est.estimate


@dataclass(frozen=True)
class RelaySettings:
    threshold: float = 1.7  # Hz/s
    duration: float = 0.6  # s

    def __post_init__(self) -> None:
        if not (self.threshold > 0 and self.duration > 0):
            raise ValueError("relay threshold and duration must be positive")


@dataclass(frozen=True)
class RelayState:
    above_timer: float = 0.0
    tripped: bool = False
    trip_time: float | None = None
    t: float = 0.0  # time of the last processed sample


def relay_step(
    rs: RelayState, rocof: float, dt: float, settings: RelaySettings, t: float | None = None
) -> RelayState:
    """Advance the relay by one sample of duration ``dt``.

    ``t`` stamps the sample (defaults to the previous stamp plus ``dt``). The
    timer resets on any sample at or below the threshold; the trip latches.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t is None:
        t = rs.t + dt
    if rs.tripped:
        return replace(rs, t=t)
    timer = rs.above_timer + dt if abs(rocof) > settings.threshold else 0.0
    if timer >= settings.duration - TIMER_EPS:
        return RelayState(above_timer=settings.duration, tripped=True, trip_time=t, t=t)
    return RelayState(above_timer=timer, tripped=False, trip_time=None, t=t)


def scan_trip(
    rocof: Sequence[float], dt: float, settings: RelaySettings, times: Sequence[float] | None = None
) -> tuple[bool, float | None]:
    """Brute-force trip decision over a recorded trace.

    Every sample stands for ``dt`` seconds. Every start index is tried and
    extended while the sample exceeds the threshold; the earliest window end
    reaching ``duration`` gives the trip, stamped with ``times[end]``
    (default ``(end + 1) * dt``).
    """
    n = len(rocof)
    above = [abs(r) > settings.threshold for r in rocof]
    best_end: int | None = None
    for i in range(n):
        j = i
        while j < n and above[j]:
            if (j - i + 1) * dt >= settings.duration - TIMER_EPS:
                if best_end is None or j < best_end:
                    best_end = j
                break
            j += 1
    if best_end is None:
        return False, None
    if times is None:
        return True, (best_end + 1) * dt
    return True, float(times[best_end])
