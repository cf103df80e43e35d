"""Mobility along road polylines and the broadcast radio channel."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

from ..node.beacon import C_M_PER_MS


class Route:
    """Piecewise-linear path travelled at constant speed from ``spawn_ms``,
    starting ``start_m`` metres along the polyline."""

    def __init__(self, points, speed_mps: float, spawn_ms: float = 0.0, start_m: float = 0.0):
        self.points = [tuple(map(float, p)) for p in points]
        self.speed_mps = float(speed_mps)
        self.spawn_ms = float(spawn_ms)
        self.start_m = float(start_m)
        self._cum = [0.0]
        for a, b in zip(self.points, self.points[1:]):
            self._cum.append(self._cum[-1] + math.dist(a, b))
        self.length = self._cum[-1]
        remaining = max(0.0, self.length - self.start_m)
        self.end_ms = self.spawn_ms + (remaining / self.speed_mps * 1000.0 if self.speed_mps > 0 else math.inf)

    def active(self, t: float) -> bool:
        return self.spawn_ms <= t <= self.end_ms

    def state(self, t: float) -> tuple[tuple[float, float], float, float]:
        """(position, speed m/s, heading degrees clockwise from north)."""
        s = min(self.start_m + max(0.0, (t - self.spawn_ms) / 1000.0 * self.speed_mps), self.length)
        i = min(max(0, bisect.bisect_right(self._cum, s) - 1), len(self.points) - 2)
        a, b = self.points[i], self.points[i + 1]
        seg = self._cum[i + 1] - self._cum[i]
        f = 0.0 if seg == 0 else (s - self._cum[i]) / seg
        pos = (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]))
        heading = math.degrees(math.atan2(b[0] - a[0], b[1] - a[1])) % 360.0
        return pos, self.speed_mps, heading


class StaticRoute(Route):
    def __init__(self, position, spawn_ms: float = 0.0):
        self.points = [tuple(map(float, position))] * 2
        self.speed_mps = 0.0
        self.spawn_ms = float(spawn_ms)
        self.start_m = 0.0
        self._cum = [0.0, 0.0]
        self.length = 0.0
        self.end_ms = math.inf


def in_rect(p, rect) -> bool:
    return rect[0] <= p[0] <= rect[2] and rect[1] <= p[1] <= rect[3]


@dataclass
class Jammer:
    actor_id: str
    region: tuple[float, float, float, float]
    duty_cycle: float = 1.0
    period_ms: float = 100.0
    start_ms: float = 0.0
    stop_ms: float = math.inf

    def jams(self, position, t: float) -> bool:
        if not (self.start_ms <= t < self.stop_ms) or not in_rect(position, self.region):
            return False
        return ((t - self.start_ms) % self.period_ms) < self.duty_cycle * self.period_ms


@dataclass(frozen=True)
class Frame:
    kind: str  # beacon | geocast | crl_piece | hsm_command | kill_ack | zone
    sender: str
    wire: bytes
    link_id: int = 0
    obj: object = None  # decoded form, shared by all receivers of one emission
    relayed: bool = False
    replayed: bool = False


class Radio:
    """Range-limited broadcast; arrival = emission + distance / c."""

    def __init__(self, range_m: float = 1000.0, loss: float = 0.0, rng=None):
        self.range_m = range_m
        self.loss = loss
        self.rng = rng
        self.jammers: list[Jammer] = []

    def jammed(self, position, t: float) -> bool:
        return any(j.jams(position, t) for j in self.jammers)

    def deliveries(self, origin, t: float, listeners, range_m: float | None = None):
        """Yield (listener, arrival_time) for listeners reached from ``origin`` at ``t``.

        ``listeners`` yields (listener, position) pairs.  Jamming is checked at
        the receiver; loss draws come from the shared scenario RNG in listener order.
        """
        r = self.range_m if range_m is None else range_m
        for listener, pos in listeners:
            d = math.dist(origin, pos)
            if d > r:
                continue
            arrival = t + d / C_M_PER_MS
            if self.jammed(pos, arrival):
                yield listener, None
                continue
            if self.loss > 0 and self.rng.random() < self.loss:
                continue
            yield listener, arrival
