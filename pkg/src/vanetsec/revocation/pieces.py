"""CRL dissemination as individually signed, erasure-coded pieces."""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass

import numpy as np

from .. import crypto_core as cc
from ..authority import Crl
from ..errors import RevocationError
from .erasure import CauchyCode, bytes_to_symbols, data_piece_count, symbols_to_bytes

DEFAULT_PIECE_BYTES = 512
DEFAULT_REDUNDANCY = 1.5
DEFAULT_RATE_BPS = 2000


@dataclass(frozen=True)
class CrlPiece:
    serial: int
    index: int
    total: int
    payload: bytes
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return struct.pack("<IHHH", self.serial, self.index, self.total, len(self.payload)) + self.payload

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "CrlPiece":
        r = cc.Reader(data)
        serial, index, total, n = r.unpack("<IHHH")
        payload = r.take(n)
        return cls(serial, index, total, payload, r.rest())

    def verify(self, issuer_public_key: bytes) -> bool:
        return cc.verify(issuer_public_key, self.tbs_bytes(), self.signature)

    @property
    def wire_size(self) -> int:
        return 10 + len(self.payload) + len(self.signature)


def total_piece_count(k: int, redundancy: float) -> int:
    return math.ceil(redundancy * k - 1e-9)


def encode_crl_pieces(crl: Crl, signing_key: bytes, piece_payload_bytes: int = DEFAULT_PIECE_BYTES,
                      redundancy_factor: float = DEFAULT_REDUNDANCY) -> list[CrlPiece]:
    """Split a signed CRL into ``ceil(r * k)`` signed pieces, any k of which suffice.

    The coded object is ``[u32 crl_len][crl bytes]`` zero-padded to k pieces.
    """
    if piece_payload_bytes % 2 or piece_payload_bytes <= 0:
        raise RevocationError("piece payload size must be a positive even number")
    if redundancy_factor < 1:
        raise RevocationError("redundancy factor must be >= 1")
    body = crl.to_bytes()
    obj = struct.pack("<I", len(body)) + body
    k = math.ceil(len(obj) / piece_payload_bytes)
    n = total_piece_count(k, redundancy_factor)
    if n > 0xFFFF:
        raise RevocationError("CRL too large for 16-bit piece indices")
    obj += b"\x00" * (k * piece_payload_bytes - len(obj))
    data = bytes_to_symbols(obj).reshape(k, piece_payload_bytes // 2)
    coded = CauchyCode(k, n).encode(data)
    pieces = []
    for i in range(n):
        unsigned = CrlPiece(crl.serial, i, n, symbols_to_bytes(coded[i]))
        pieces.append(CrlPiece(crl.serial, i, n, unsigned.payload, cc.sign(signing_key, unsigned.tbs_bytes())))
    return pieces


@dataclass(frozen=True)
class Pending:
    have: int
    need: int

    @property
    def progress(self) -> float:
        return self.have / self.need


class CrlReassembler:
    """Collects verified pieces of the newest CRL serial and decodes once k are held."""

    def __init__(self, issuer_id: str, issuer_public_key: bytes,
                 redundancy_factor: float = DEFAULT_REDUNDANCY):
        self.issuer_id = issuer_id
        self.issuer_public_key = issuer_public_key
        self.redundancy = redundancy_factor
        self.serial = -1
        self.total = 0
        self.k = 0
        self.pieces: dict[int, CrlPiece] = {}
        self.rejected = 0
        self._crl: Crl | None = None

    def add(self, piece: CrlPiece) -> bool:
        """Returns True when the piece was new and valid."""
        if not piece.verify(self.issuer_public_key):
            self.rejected += 1
            return False
        if piece.serial < self.serial:
            return False
        if piece.serial > self.serial:
            self.serial, self.total = piece.serial, piece.total
            self.k = data_piece_count(piece.total, self.redundancy)
            self.pieces = {}
            self._crl = None
        if piece.total != self.total or piece.index >= self.total or piece.index in self.pieces:
            return False
        self.pieces[piece.index] = piece
        return True

    @property
    def complete(self) -> bool:
        return self.k > 0 and len(self.pieces) >= self.k

    def status(self) -> Crl | Pending:
        if not self.complete:
            return Pending(len(self.pieces), max(self.k, 1))
        if self._crl is None:
            self._crl = self._decode()
        return self._crl

    def _decode(self) -> Crl:
        chosen = self._choose()
        code = CauchyCode(self.k, self.total)
        symbols = {i: bytes_to_symbols(p.payload) for i, p in chosen.items()}
        data = code.decode(symbols)
        obj = symbols_to_bytes(data.reshape(-1))
        (length,) = struct.unpack("<I", obj[:4])
        crl = Crl.from_bytes(obj[4:4 + length], self.issuer_id)
        if not crl.verify(self.issuer_public_key):
            raise RevocationError("reassembled CRL signature invalid")
        return crl

    def _choose(self) -> dict[int, CrlPiece]:
        # prefer systematic pieces: fewer unknowns to solve for
        data = [i for i in self.pieces if i < self.k]
        parity = sorted(i for i in self.pieces if i >= self.k)
        idx = data + parity[: self.k - len(data)]
        return {i: self.pieces[i] for i in idx}

    def bitmap(self) -> bytes:
        return bitmap_from_indices(self.pieces, self.total)


def reassemble(pieces, issuer_id: str, issuer_public_key: bytes,
               redundancy_factor: float = DEFAULT_REDUNDANCY) -> Crl | Pending:
    r = CrlReassembler(issuer_id, issuer_public_key, redundancy_factor)
    for p in pieces:
        r.add(p)
    return r.status()


def bitmap_from_indices(indices, total: int) -> bytes:
    bits = np.zeros(max(total, 1), dtype=bool)
    idx = list(indices)
    if idx:
        bits[idx] = True
    return np.packbits(bits, bitorder="little").tobytes()


def indices_from_bitmap(bitmap: bytes, total: int) -> set[int]:
    bits = np.unpackbits(np.frombuffer(bitmap, dtype=np.uint8), bitorder="little")[:total]
    return set(int(i) for i in np.nonzero(bits)[0])


def v2v_crl_relay(responder_pieces: dict[int, CrlPiece], requester_bitmap: bytes, total: int,
                  max_pieces: int | None = None) -> list[CrlPiece]:
    """Pieces the responder holds that the requester's bitmap says it lacks."""
    have = indices_from_bitmap(requester_bitmap, total)
    out = [responder_pieces[i] for i in sorted(responder_pieces) if i not in have]
    return out if max_pieces is None else out[:max_pieces]


class RsuBroadcaster:
    """Round-robin piece emission at a fixed bit rate.

    Slot ``s`` (starting at ``epoch``) carries piece ``(offset + s) mod n``.  A
    random offset per RSU gives independent schedules; a shared offset and epoch
    make neighbouring RSUs continue one global cycle.
    """

    def __init__(self, pieces: list[CrlPiece], rate_bps: float = DEFAULT_RATE_BPS,
                 offset: int = 0, epoch: float = 0.0):
        if not pieces:
            raise RevocationError("nothing to broadcast")
        self.pieces = pieces
        self.rate_bps = rate_bps
        self.offset = offset % len(pieces)
        self.epoch = epoch
        self.cadence_ms = max(p.wire_size for p in pieces) * 8 / rate_bps * 1000.0

    def slot_time(self, slot: int) -> float:
        return self.epoch + slot * self.cadence_ms

    def piece_at(self, slot: int) -> CrlPiece:
        return self.pieces[(self.offset + slot) % len(self.pieces)]

    def next_slot(self, now: float) -> int:
        return max(0, math.ceil((now - self.epoch) / self.cadence_ms - 1e-9))


def rsu_broadcast_schedule(pieces: list[CrlPiece], rate_bps: float = DEFAULT_RATE_BPS,
                           now: float = 0.0, count: int | None = None, offset: int | None = None,
                           rng: random.Random | None = None) -> list[tuple[float, CrlPiece]]:
    """The next ``count`` (time, piece) emissions of one RSU starting at ``now``."""
    if offset is None:
        offset = (rng or random.Random()).randrange(len(pieces))
    b = RsuBroadcaster(pieces, rate_bps, offset, epoch=now)
    count = len(pieces) if count is None else count
    return [(b.slot_time(s), b.piece_at(s)) for s in range(count)]
