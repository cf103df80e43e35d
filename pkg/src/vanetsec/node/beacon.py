"""Beacon payloads, time-of-flight neighbor verification, position plausibility."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from ..crypto_core import ROLE_CODES, ROLES, GeoStamp, Reader

C_M_PER_MS = 3.0e5  # 3e8 m/s
BEACON_FMT = "<ddffB"


@dataclass(frozen=True)
class BeaconPayload:
    x: float
    y: float
    speed: float
    heading: float
    role: str

    def to_bytes(self) -> bytes:
        return struct.pack(BEACON_FMT, self.x, self.y, self.speed, self.heading, ROLE_CODES[self.role])

    @classmethod
    def from_bytes(cls, data: bytes) -> "BeaconPayload":
        r = Reader(data)
        x, y, speed, heading, role = r.unpack(BEACON_FMT)
        if not r.done() or role >= len(ROLES):
            raise ValueError("malformed beacon payload")
        return cls(x, y, speed, heading, ROLES[role])


def distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def neighbor_check(sender_stamp: GeoStamp, receiver_position, receiver_time: float,
                   range_m: float, epsilon_m: float) -> bool:
    """Accept a communication neighbor when coordinate distance and
    time-of-flight distance agree within ``epsilon_m`` and lie within range.

    The range bound gets the same ``epsilon_m`` slack: a receiver moving away
    during flight would otherwise reject a sender heard exactly at the edge."""
    # clock error can make a very short flight look negative; that is still
    # judged against epsilon rather than rejected outright
    tof = receiver_time - sender_stamp.timestamp
    d_coord = distance(receiver_position, sender_stamp.position)
    d_tof = C_M_PER_MS * tof
    return abs(d_coord - d_tof) <= epsilon_m and d_coord <= range_m + epsilon_m


@dataclass(frozen=True)
class Plausibility:
    plausible: bool
    reason: str | None = None


def position_plausibility(claim: GeoStamp, prior: GeoStamp | None, receiver_position,
                          range_m: float = 1000.0, v_max_mps: float = 70.0,
                          concurrent=(), overlap_m: float = 1.0,
                          overlap_window_ms: float = 100.0) -> Plausibility:
    """Three heuristics: out of radio range, implied speed, overlapping claims.

    ``concurrent`` holds the latest geo-stamps of *other* pseudonyms.
    """
    if distance(receiver_position, claim.position) > range_m:
        return Plausibility(False, "out_of_range")
    if prior is not None:
        dt = (claim.timestamp - prior.timestamp) / 1000.0
        moved = distance(claim.position, prior.position)
        if dt <= 0:
            if moved > overlap_m:
                return Plausibility(False, "speed")
        elif moved / dt > v_max_mps:
            return Plausibility(False, "speed")
    for other in concurrent:
        if (abs(other.timestamp - claim.timestamp) <= overlap_window_ms
                and distance(other.position, claim.position) <= overlap_m):
            return Plausibility(False, "overlap")
    return Plausibility(True)
