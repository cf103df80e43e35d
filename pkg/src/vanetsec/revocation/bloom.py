"""Bloom-filter compressed CRLs.

Index ``i`` of a fingerprint is ``(h1 + i*h2) mod m`` where h1 and h2 are the
first two little-endian 64-bit words of SHA-256(fingerprint) (h2 forced odd).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .. import crypto_core as cc


@dataclass(frozen=True)
class BloomCrl:
    serial: int
    m: int
    k: int
    bits: bytes
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return struct.pack("<IIB", self.serial, self.m, self.k) + self.bits

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "BloomCrl":
        r = cc.Reader(data)
        serial, m, k = r.unpack("<IIB")
        bits = r.take((m + 7) // 8)
        return cls(serial, m, k, bits, r.rest())

    def verify(self, issuer_public_key: bytes) -> bool:
        return cc.verify(issuer_public_key, self.tbs_bytes(), self.signature)

    def __contains__(self, fingerprint: bytes) -> bool:
        return bloom_query(self, fingerprint)

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())


def bloom_parameters(n: int, p: float) -> tuple[int, int]:
    """Optimal (m, k) for n members at false-positive rate p."""
    if n <= 0:
        return 8, 1
    m = math.ceil(-n * math.log(p) / (math.log(2) ** 2))
    k = max(1, round(m / n * math.log(2)))
    return m, k


def expected_fp_rate(n: int, m: int, k: int) -> float:
    return (1.0 - math.exp(-k * n / m)) ** k


def _hash_pair(fingerprint: bytes) -> tuple[int, int]:
    d = hashlib.sha256(fingerprint).digest()
    h1, h2 = struct.unpack("<QQ", d[:16])
    return h1, h2 | 1


def bloom_indices(fingerprint: bytes, m: int, k: int) -> list[int]:
    h1, h2 = _hash_pair(fingerprint)
    return [(h1 + i * h2) % m for i in range(k)]


def _index_matrix(fingerprints, m: int, k: int) -> np.ndarray:
    pairs = [_hash_pair(fp) for fp in fingerprints]
    if not pairs:
        return np.zeros((0, k), dtype=np.int64)
    # reduce before multiplying so int64 arithmetic stays exact
    h1 = np.array([a % m for a, _ in pairs], dtype=np.int64)
    h2 = np.array([b % m for _, b in pairs], dtype=np.int64)
    i = np.arange(k, dtype=np.int64)
    return (h1[:, None] + i[None, :] * h2[:, None]) % m


def bloom_build(fingerprints, target_fp_rate: float = 0.001, serial: int = 0) -> BloomCrl:
    fingerprints = list(fingerprints)
    m, k = bloom_parameters(len(fingerprints), target_fp_rate)
    bits = np.zeros(m, dtype=bool)
    bits[_index_matrix(fingerprints, m, k).ravel()] = True
    packed = np.packbits(bits, bitorder="little").tobytes()
    return BloomCrl(serial, m, k, packed)


def bloom_query(bloom: BloomCrl, fingerprint: bytes) -> bool:
    bits = bloom.bits
    for idx in bloom_indices(fingerprint, bloom.m, bloom.k):
        if not bits[idx >> 3] >> (idx & 7) & 1:
            return False
    return True


def bloom_query_many(bloom: BloomCrl, fingerprints) -> np.ndarray:
    """Vectorised membership test; returns a boolean array."""
    fingerprints = list(fingerprints)
    if not fingerprints:
        return np.zeros(0, dtype=bool)
    bits = np.unpackbits(np.frombuffer(bloom.bits, dtype=np.uint8), bitorder="little")
    return bits[_index_matrix(fingerprints, bloom.m, bloom.k)].astype(bool).all(axis=1)


def sign_bloom(bloom: BloomCrl, private_key: bytes) -> BloomCrl:
    return BloomCrl(bloom.serial, bloom.m, bloom.k, bloom.bits, cc.sign(private_key, bloom.tbs_bytes()))
