"""Signatures over credentials and geo-stamps, with canonical byte encodings.

Keys are opaque byte strings whose first byte names the scheme:

* ``0x01`` Ed25519 (the production scheme),
* ``0x02`` keyed-hash test double: the "signature" is an HMAC-SHA256 tag under
  the private secret.  Verification looks the secret up in a process-local
  registry filled by :func:`generate_keypair`, so it only works for keys minted
  in the same process.  It exists to keep large simulations fast.

All multi-byte integers and floats are little-endian and fixed width.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import CryptoError

SCHEME_ED25519 = 0x01
SCHEME_HMAC = 0x02
SCHEMES = {"ed25519": SCHEME_ED25519, "hmac": SCHEME_HMAC}

FINGERPRINT_LEN = 16

ROLES = ("private-vehicle", "public-vehicle", "special-vehicle", "rsu", "rsu-internet")
ROLE_CODES = {name: i for i, name in enumerate(ROLES)}

_hmac_registry: dict[bytes, bytes] = {}


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)


def _seed_bytes(seed) -> bytes:
    if isinstance(seed, (bytes, bytearray)):
        material = bytes(seed)
    elif isinstance(seed, int):
        material = seed.to_bytes(16, "little", signed=True)
    else:
        material = str(seed).encode()
    return hashlib.sha256(b"vanetsec-keygen\x00" + material).digest()


def generate_keypair(rng_seed=None, scheme: str = "ed25519") -> KeyPair:
    """Derive a key pair from ``rng_seed`` (fresh OS randomness when None)."""
    secret = os.urandom(32) if rng_seed is None else _seed_bytes(rng_seed)
    if scheme == "ed25519":
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(bytes([SCHEME_ED25519]) + pub, bytes([SCHEME_ED25519]) + secret)
    if scheme == "hmac":
        pub = bytes([SCHEME_HMAC]) + hashlib.sha256(b"vanetsec-hmac-pub\x00" + secret).digest()
        _hmac_registry[pub] = secret
        return KeyPair(pub, bytes([SCHEME_HMAC]) + secret)
    raise CryptoError(f"unknown signature scheme {scheme!r}")


def keypair_from_private(private_key: bytes) -> KeyPair:
    """Rebuild a key pair from its private half (used when loading keystores)."""
    if len(private_key) != 33:
        raise CryptoError("invalid key material")
    tag, secret = private_key[0], bytes(private_key[1:])
    if tag == SCHEME_ED25519:
        pub = _ed_private(secret).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(bytes([SCHEME_ED25519]) + pub, bytes(private_key))
    if tag == SCHEME_HMAC:
        pub = bytes([SCHEME_HMAC]) + hashlib.sha256(b"vanetsec-hmac-pub\x00" + secret).digest()
        _hmac_registry[pub] = secret
        return KeyPair(pub, bytes(private_key))
    raise CryptoError("invalid key material")


def scheme_of(key: bytes) -> str:
    if key and key[0] == SCHEME_ED25519:
        return "ed25519"
    if key and key[0] == SCHEME_HMAC:
        return "hmac"
    raise CryptoError("invalid key material")


@lru_cache(maxsize=4096)
def _ed_private(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


@lru_cache(maxsize=16384)
def _ed_public(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)


def sign(private_key: bytes, message: bytes) -> bytes:
    if not isinstance(private_key, (bytes, bytearray)) or len(private_key) != 33:
        raise CryptoError("invalid key material")
    tag, secret = private_key[0], bytes(private_key[1:])
    if tag == SCHEME_ED25519:
        return _ed_private(secret).sign(bytes(message))
    if tag == SCHEME_HMAC:
        return hmac.new(secret, bytes(message), hashlib.sha256).digest()
    raise CryptoError("invalid key material")


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Return True iff ``signature`` was made over ``message`` by the paired key."""
    try:
        if len(public_key) != 33:
            return False
        tag = public_key[0]
        if tag == SCHEME_ED25519:
            if len(signature) != 64:
                return False
            _ed_public(bytes(public_key[1:])).verify(bytes(signature), bytes(message))
            return True
        if tag == SCHEME_HMAC:
            secret = _hmac_registry.get(bytes(public_key))
            if secret is None or len(signature) != 32:
                return False
            expected = hmac.new(secret, bytes(message), hashlib.sha256).digest()
            return hmac.compare_digest(expected, bytes(signature))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return False


def timestamped(message: bytes, timestamp_ms: float) -> bytes:
    """Bytes an HSM actually signs: the message followed by its clock reading."""
    return bytes(message) + struct.pack("<d", timestamp_ms)


def hash16(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(struct.pack("<I", len(p)))
        h.update(p)
    return h.digest()[:FINGERPRINT_LEN]


# --- canonical encoding helpers ----------------------------------------------


class Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = bytes(data)
        self.pos = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CryptoError("malformed encoding")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u16(self) -> int:
        return self.unpack("<H")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64(self) -> int:
        return self.unpack("<Q")[0]

    def i64(self) -> int:
        return self.unpack("<q")[0]

    def f64(self) -> float:
        return self.unpack("<d")[0]

    def blob16(self) -> bytes:
        return self.take(self.u16())

    def rest(self) -> bytes:
        return self.take(len(self.data) - self.pos)

    def done(self) -> bool:
        return self.pos == len(self.data)


def blob16(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise CryptoError("field too long")
    return struct.pack("<H", len(b)) + bytes(b)


# --- credentials ---------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    """Long-term certificate binding a node's key to its role attributes."""

    subject_key: bytes
    issuer_id: str
    attributes: tuple[str, ...]
    start: int
    end: int
    issuer_signature: bytes = b""
    subject_id: str = ""

    KIND = b"C"

    def tbs_bytes(self) -> bytes:
        attrs = bytes(ROLE_CODES[a] for a in self.attributes)
        return (
            self.KIND
            + blob16(self.issuer_id.encode())
            + blob16(self.subject_id.encode())
            + blob16(self.subject_key)
            + struct.pack("<B", len(attrs)) + attrs
            + struct.pack("<qq", self.start, self.end)
        )

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + blob16(self.issuer_signature)

    @property
    def public_key(self) -> bytes:
        return self.subject_key

    @property
    def ca_id(self) -> str:
        return self.issuer_id

    @property
    def signature(self) -> bytes:
        return self.issuer_signature

    @classmethod
    def read(cls, r: Reader) -> "Certificate":
        if r.take(1) != cls.KIND:
            raise CryptoError("malformed encoding")
        issuer = r.blob16().decode()
        subject_id = r.blob16().decode()
        key = r.blob16()
        n = r.u8()
        try:
            attrs = tuple(ROLES[c] for c in r.take(n))
        except IndexError:
            raise CryptoError("malformed encoding") from None
        start, end = r.unpack("<qq")
        return cls(key, issuer, attrs, start, end, r.blob16(), subject_id)


@dataclass(frozen=True)
class Pseudonym:
    """Short-term certificate: CA id, lifetime, public key, CA signature.  Nothing else."""

    ca_id: str
    start: int
    end: int
    public_key: bytes
    ca_signature: bytes = b""

    KIND = b"P"

    def tbs_bytes(self) -> bytes:
        return (
            self.KIND
            + blob16(self.ca_id.encode())
            + struct.pack("<qq", self.start, self.end)
            + blob16(self.public_key)
        )

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + blob16(self.ca_signature)

    @property
    def signature(self) -> bytes:
        return self.ca_signature

    @classmethod
    def read(cls, r: Reader) -> "Pseudonym":
        if r.take(1) != cls.KIND:
            raise CryptoError("malformed encoding")
        ca_id = r.blob16().decode()
        start, end = r.unpack("<qq")
        key = r.blob16()
        return cls(ca_id, start, end, key, r.blob16())


Credential = Certificate | Pseudonym


def decode_credential(data: bytes) -> Credential:
    r = Reader(data)
    cred = read_credential(r)
    if not r.done():
        raise CryptoError("malformed encoding")
    return cred


def read_credential(r: Reader) -> Credential:
    kind = r.data[r.pos:r.pos + 1]
    if kind == Certificate.KIND:
        return Certificate.read(r)
    if kind == Pseudonym.KIND:
        return Pseudonym.read(r)
    raise CryptoError("malformed encoding")


def fingerprint(cred: Credential) -> bytes:
    """16-byte revocation identifier of a certificate or pseudonym."""
    fp = cred.__dict__.get("_fp")
    if fp is None:
        fp = hashlib.sha256(cred.to_bytes()).digest()[:FINGERPRINT_LEN]
        object.__setattr__(cred, "_fp", fp)  # credentials are frozen; memoise on the instance
    return fp


def verify_certificate(cred: Credential, issuer_public_key: bytes, now: float) -> bool:
    """Issuer signature valid and ``now`` inside the inclusive lifetime."""
    if not cred.start <= now <= cred.end:
        return False
    return verify(issuer_public_key, cred.tbs_bytes(), cred.signature)


# --- messages ------------------------------------------------------------------


@dataclass(frozen=True)
class GeoStamp:
    timestamp: float
    x: float
    y: float

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def to_bytes(self) -> bytes:
        return struct.pack("<ddd", self.timestamp, self.x, self.y)

    @classmethod
    def read(cls, r: Reader) -> "GeoStamp":
        return cls(*r.unpack("<ddd"))


def signing_bytes(payload: bytes, geo_stamp: GeoStamp) -> bytes:
    """payload ∥ geo-stamp in canonical order; this is what a sender signs."""
    return struct.pack("<I", len(payload)) + bytes(payload) + geo_stamp.to_bytes()


@dataclass(frozen=True)
class SignedMessage:
    payload: bytes
    geo_stamp: GeoStamp
    signature: bytes
    credential: Credential

    @property
    def attached_pseudonym(self) -> Credential:
        return self.credential

    def signed_bytes(self) -> bytes:
        return timestamped(signing_bytes(self.payload, self.geo_stamp), self.geo_stamp.timestamp)

    def to_bytes(self) -> bytes:
        cred = self.credential.to_bytes()
        return (
            signing_bytes(self.payload, self.geo_stamp)
            + blob16(self.signature)
            + blob16(cred)
        )

    @classmethod
    def read(cls, r: Reader) -> "SignedMessage":
        payload = r.take(r.u32())
        geo = GeoStamp.read(r)
        sig = r.blob16()
        cred = decode_credential(r.blob16())
        return cls(payload, geo, sig, cred)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignedMessage":
        r = Reader(data)
        msg = cls.read(r)
        if not r.done():
            raise CryptoError("malformed encoding")
        return msg


def verify_signed_message(msg: SignedMessage) -> bool:
    """Signature check only; credential trust is the caller's business."""
    return verify(msg.credential.public_key, msg.signed_bytes(), msg.signature)


# --- hybrid encryption (pseudonym-set delivery) -----------------------------


@dataclass(frozen=True)
class EncryptionKeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)


def encryption_keypair(seed: bytes) -> EncryptionKeyPair:
    sk = X25519PrivateKey.from_private_bytes(hashlib.sha256(b"vanetsec-x25519\x00" + seed).digest())
    pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    raw = sk.private_bytes_raw()
    return EncryptionKeyPair(pub, raw)


def _kdf(shared: bytes, eph_pub: bytes, recipient: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=b"vanetsec-seal" + eph_pub + recipient).derive(shared)


def encrypt(recipient_public_key: bytes, plaintext: bytes, seed: bytes | None = None) -> bytes:
    """X25519 + AES-GCM.  Output: [32 ephemeral pub][12 nonce][ciphertext+tag].

    With ``seed`` the ephemeral key and nonce are derived deterministically, which
    simulations need for byte-identical replays.
    """
    if seed is None:
        eph = X25519PrivateKey.generate()
        nonce = os.urandom(12)
    else:
        d = hashlib.sha256(b"vanetsec-eph\x00" + seed + recipient_public_key).digest()
        eph = X25519PrivateKey.from_private_bytes(d)
        nonce = hashlib.sha256(b"nonce" + d).digest()[:12]
    try:
        peer = X25519PublicKey.from_public_bytes(recipient_public_key)
    except ValueError:
        raise CryptoError("invalid key material") from None
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    key = _kdf(eph.exchange(peer), eph_pub, recipient_public_key)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def decrypt(keypair: EncryptionKeyPair, blob: bytes) -> bytes:
    if len(blob) < 32 + 12 + 16:
        raise CryptoError("decryption failed")
    eph_pub, nonce, ct = blob[:32], blob[32:44], blob[44:]
    try:
        sk = X25519PrivateKey.from_private_bytes(keypair.private_key)
        key = _kdf(sk.exchange(X25519PublicKey.from_public_bytes(eph_pub)), eph_pub,
                   keypair.public_key)
        return AESGCM(key).decrypt(nonce, ct, None)
    except (InvalidTag, ValueError):
        raise CryptoError("decryption failed") from None
