"""Geocast wire types and per-origin rate limiting."""

from __future__ import annotations

import math
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass

from .. import crypto_core as cc
from ..crypto_core import GeoStamp, Reader, SignedMessage

REGION_FMT = "<Bdddd"
REGION_LEN = struct.calcsize(REGION_FMT)
HEADER_LEN = REGION_LEN + 8


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    KIND = 1

    def contains(self, p) -> bool:
        return self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax

    @property
    def center(self) -> tuple[float, float]:
        return ((self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2)

    def to_bytes(self) -> bytes:
        return struct.pack(REGION_FMT, self.KIND, self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    radius: float

    KIND = 2

    def contains(self, p) -> bool:
        return math.hypot(p[0] - self.cx, p[1] - self.cy) <= self.radius

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    def to_bytes(self) -> bytes:
        return struct.pack(REGION_FMT, self.KIND, self.cx, self.cy, self.radius, 0.0)


Region = Rect | Disc


def region_from_bytes(data: bytes) -> Region:
    kind, a, b, c, d = struct.unpack(REGION_FMT, data[:REGION_LEN])
    if kind == Rect.KIND:
        return Rect(a, b, c, d)
    if kind == Disc.KIND:
        return Disc(a, b, c)
    raise ValueError("unknown region kind")


def geocast_header(region: Region, seq: int) -> bytes:
    return region.to_bytes() + struct.pack("<Q", seq)


@dataclass(frozen=True)
class HopSignature:
    credential: cc.Credential
    geo_stamp: GeoStamp
    signature: bytes

    def to_bytes(self) -> bytes:
        return cc.blob16(self.credential.to_bytes()) + self.geo_stamp.to_bytes() + cc.blob16(self.signature)

    @classmethod
    def read(cls, r: Reader) -> "HopSignature":
        cred = cc.decode_credential(r.blob16())
        geo = GeoStamp.read(r)
        return cls(cred, geo, r.blob16())


@dataclass(frozen=True)
class GeocastMessage:
    """Origin-signed message (payload = region ∥ seq ∥ data) plus stacked relay signatures."""

    origin: SignedMessage
    hops: tuple[HopSignature, ...] = ()

    @property
    def region(self) -> Region:
        return region_from_bytes(self.origin.payload)

    @property
    def sequence_number(self) -> int:
        return struct.unpack("<Q", self.origin.payload[REGION_LEN:HEADER_LEN])[0]

    @property
    def data(self) -> bytes:
        return self.origin.payload[HEADER_LEN:]

    @property
    def origin_fingerprint(self) -> bytes:
        return cc.fingerprint(self.origin.credential)

    def bytes_with_hops(self, n: int) -> bytes:
        hops = self.hops[:n]
        return self.origin.to_bytes() + struct.pack("<H", len(hops)) + b"".join(h.to_bytes() for h in hops)

    def to_bytes(self) -> bytes:
        return self.bytes_with_hops(len(self.hops))

    @classmethod
    def from_bytes(cls, data: bytes) -> "GeocastMessage":
        r = Reader(data)
        origin = SignedMessage.read(r)
        hops = tuple(HopSignature.read(r) for _ in range(r.u16()))
        if not r.done():
            raise cc.CryptoError("malformed encoding")
        return cls(origin, hops)

    def hop_signing_bytes(self, geo_stamp: GeoStamp, n: int | None = None) -> bytes:
        """Received bytes (first ``n`` hops) followed by the forwarder's geo-stamp."""
        n = len(self.hops) if n is None else n
        return cc.timestamped(self.bytes_with_hops(n) + geo_stamp.to_bytes(), geo_stamp.timestamp)

    def with_hop(self, hop: HopSignature) -> "GeocastMessage":
        return GeocastMessage(self.origin, self.hops + (hop,))

    def newest_hop_valid(self) -> bool:
        if not self.hops:
            return True
        hop = self.hops[-1]
        material = self.hop_signing_bytes(hop.geo_stamp, len(self.hops) - 1)
        return cc.verify(hop.credential.public_key, material, hop.signature)


class SlidingWindowLimiter:
    """At most ``limit`` accepted events per key in any window of ``window_ms``."""

    def __init__(self, limit: int = 10, window_ms: float = 1000.0):
        self.limit = limit
        self.window_ms = window_ms
        self._accepted: dict[bytes, deque] = {}

    def allow(self, key, now: float) -> bool:
        q = self._accepted.setdefault(key, deque())
        while q and q[0] <= now - self.window_ms:
            q.popleft()
        if len(q) >= self.limit:
            return False
        q.append(now)
        return True


class LruCache:
    """Bounded insertion-ordered set with move-to-end on hit."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._d: OrderedDict = OrderedDict()

    def __contains__(self, key) -> bool:
        return key in self._d

    def __len__(self) -> int:
        return len(self._d)

    def touch(self, key, value=None) -> bool:
        """Record ``key``; returns True if it was already present."""
        if key in self._d:
            self._d.move_to_end(key)
            return True
        self._d[key] = value
        if len(self._d) > self.capacity:
            self._d.popitem(last=False)
        return False
