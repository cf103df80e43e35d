"""Systematic Reed-Solomon (Cauchy) erasure code over GF(2^16).

Pieces 0..k-1 carry the data verbatim; piece k+j carries
``sum_i C[j, i] * data_i`` with ``C[j, i] = 1 / ((k + j) XOR i)``.  Every square
submatrix of a Cauchy matrix is invertible, so any k distinct pieces recover
the data.  A 16-bit field allows up to 65536 pieces, enough for CRLs of
hundreds of kilobytes at 512-byte piece granularity.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import RevocationError

PRIM_POLY = 0x1100B  # x^16 + x^12 + x^3 + x + 1
ORDER = 65535

EXP = np.zeros(2 * ORDER, dtype=np.int64)
LOG = np.zeros(ORDER + 1, dtype=np.int64)


def _build_tables():
    x = 1
    exp = [0] * ORDER
    for i in range(ORDER):
        exp[i] = x
        x <<= 1
        if x & 0x10000:
            x ^= PRIM_POLY
    EXP[:ORDER] = exp
    EXP[ORDER:] = exp
    LOG[np.array(exp)] = np.arange(ORDER)


_build_tables()


def gf_mul(a, b):
    """Elementwise product of integer arrays (or scalars) in GF(2^16)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    out = EXP[LOG[a] + LOG[b]]
    return np.where((a == 0) | (b == 0), 0, out)


def gf_inv(a):
    a = np.asarray(a, dtype=np.int64)
    if np.any(a == 0):
        raise ZeroDivisionError("zero has no inverse in GF(2^16)")
    return EXP[ORDER - LOG[a]]


def data_piece_count(total: int, redundancy: float) -> int:
    """Invert ``total = ceil(redundancy * k)``; raises when no k matches."""
    k = max(1, int(total / redundancy))
    for cand in (k - 1, k, k + 1):
        if cand >= 1 and math.ceil(redundancy * cand - 1e-9) == total:
            return cand
    raise RevocationError(f"no data-piece count gives {total} pieces at redundancy {redundancy}")


class CauchyCode:
    def __init__(self, k: int, n: int):
        if not 1 <= k <= n <= ORDER + 1:
            raise RevocationError(f"invalid code parameters k={k} n={n}")
        self.k, self.n = k, n

    def coefficients(self, rows) -> np.ndarray:
        """Parity coefficient rows for piece indices ``rows`` (each >= k)."""
        x = np.asarray(rows, dtype=np.int64)[:, None]
        y = np.arange(self.k, dtype=np.int64)[None, :]
        return gf_inv(x ^ y)

    def encode(self, data: np.ndarray) -> np.ndarray:
        """``data`` is (k, S) symbols; returns all (n, S) pieces."""
        data = np.asarray(data, dtype=np.int64)
        if data.shape[0] != self.k:
            raise RevocationError("data must have k rows")
        out = np.zeros((self.n, data.shape[1]), dtype=np.int64)
        out[:self.k] = data
        if self.n == self.k:
            return out
        coef = self.coefficients(range(self.k, self.n))
        log_data = LOG[data]
        zero = data == 0
        for j in range(self.n - self.k):
            logc = LOG[coef[j]][:, None]
            prod = np.where(zero, 0, EXP[logc + log_data])
            out[self.k + j] = np.bitwise_xor.reduce(prod, axis=0)
        return out

    def decode(self, pieces: dict[int, np.ndarray]) -> np.ndarray:
        """Recover the (k, S) data from any k distinct pieces."""
        if len(pieces) < self.k:
            raise RevocationError("not enough pieces")
        width = len(next(iter(pieces.values())))
        data = np.zeros((self.k, width), dtype=np.int64)
        missing = [i for i in range(self.k) if i not in pieces]
        for i in range(self.k):
            if i in pieces:
                data[i] = pieces[i]
        if not missing:
            return data
        parity_rows = sorted(i for i in pieces if i >= self.k)[:len(missing)]
        coef = self.coefficients(parity_rows)
        known = [i for i in range(self.k) if i in pieces]
        rhs = np.array([pieces[j] for j in parity_rows], dtype=np.int64)
        if known:
            log_known = LOG[data[known]]
            zero = data[known] == 0
            for r in range(len(parity_rows)):
                logc = LOG[coef[r, known]][:, None]
                prod = np.where(zero, 0, EXP[logc + log_known])
                rhs[r] ^= np.bitwise_xor.reduce(prod, axis=0)
        solved = solve(coef[:, missing], rhs)
        data[missing] = solved
        return data


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gauss-Jordan elimination over GF(2^16): returns x with a @ x = b."""
    e = a.shape[0]
    aug = np.concatenate([np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)], axis=1)
    for col in range(e):
        nz = np.nonzero(aug[col:, col])[0]
        if len(nz) == 0:
            raise RevocationError("singular system")
        piv = col + nz[0]
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] = gf_mul(aug[col], gf_inv(aug[col, col]))
        factors = aug[:, col].copy()
        factors[col] = 0
        rows = np.nonzero(factors)[0]
        if len(rows):
            aug[rows] ^= gf_mul(factors[rows, None], aug[col][None, :])
    return aug[:, e:]


def bytes_to_symbols(data: bytes) -> np.ndarray:
    if len(data) % 2:
        raise RevocationError("symbol stream must have even length")
    return np.frombuffer(data, dtype="<u2").astype(np.int64)


def symbols_to_bytes(symbols: np.ndarray) -> bytes:
    return np.asarray(symbols, dtype="<u2").tobytes()
