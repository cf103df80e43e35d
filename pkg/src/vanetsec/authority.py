"""Regional certification authority.

Covers the credential lifecycle from registration to revocation. Issued
pseudonyms stay resolvable to their owner, and LEAVE eviction reports feed
revocation. The two root keys sign device-management commands for HSMs.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

from . import crypto_core as cc
from .crypto_core import Certificate, Pseudonym
from .errors import AuthorityError, CryptoError
from .hsm import CommandKind, HsmCommand

log = logging.getLogger(__name__)

YEAR_MS = 365 * 24 * 3600 * 1000
DEFAULT_LONG_TERM_MS = 5 * YEAR_MS
DEFAULT_TAU_MS = 60_000
DEFAULT_SET_SIZE = 100
PROOF_WINDOW_MS = 60_000


@dataclass(frozen=True)
class AuthProof:
    """Long-term-key signature over a refill request, as produced by an HSM."""

    signature: bytes
    timestamp: float


def refill_request_bytes(long_term_id: str, public_keys, encryption_key: bytes = b"") -> bytes:
    h = hashlib.sha256()
    for pk in public_keys:
        h.update(cc.blob16(pk))
    return b"REFILL" + cc.blob16(long_term_id.encode()) + h.digest() + cc.blob16(encryption_key)


@dataclass
class PseudonymSet:
    pseudonyms: list[Pseudonym]
    set_index: int
    owner_long_term_id: str | None = None  # CA-side only, never serialised

    def to_bytes(self) -> bytes:
        out = struct.pack("<II", self.set_index, len(self.pseudonyms))
        return out + b"".join(cc.blob16(p.to_bytes()) for p in self.pseudonyms)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PseudonymSet":
        r = cc.Reader(data)
        index, n = r.unpack("<II")
        pseudonyms = []
        for _ in range(n):
            cred = cc.decode_credential(r.blob16())
            if not isinstance(cred, Pseudonym):
                raise CryptoError("malformed encoding")
            pseudonyms.append(cred)
        return cls(pseudonyms, index)

    @property
    def start(self) -> int:
        return self.pseudonyms[0].start

    @property
    def end(self) -> int:
        return self.pseudonyms[-1].end


@dataclass(frozen=True)
class Crl:
    issuer_id: str
    serial: int
    issued_at: int
    entries: tuple[bytes, ...]
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return struct.pack("<IqI", self.serial, self.issued_at, len(self.entries)) + b"".join(self.entries)

    def signed_material(self) -> bytes:
        # issuer id is bound by the signature but not carried on the wire
        return cc.blob16(self.issuer_id.encode()) + self.tbs_bytes()

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes, issuer_id: str) -> "Crl":
        r = cc.Reader(data)
        serial, issued_at, n = r.unpack("<IqI")
        entries = tuple(r.take(cc.FINGERPRINT_LEN) for _ in range(n))
        return cls(issuer_id, serial, issued_at, entries, r.rest())

    def verify(self, issuer_public_key: bytes) -> bool:
        if list(self.entries) != sorted(set(self.entries)):
            return False
        return cc.verify(issuer_public_key, self.signed_material(), self.signature)


@dataclass(frozen=True)
class AuthorizationToken:
    ca_id: str
    purpose: str
    issued_at: int
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return b"AUTHZ" + cc.blob16(self.ca_id.encode()) + cc.blob16(self.purpose.encode()) + struct.pack("<q", self.issued_at)


@dataclass(frozen=True)
class EvictionEvent:
    """One LEAVE execution: a target voted off by a quorum of evaluators."""

    target: bytes
    evaluators: tuple[bytes, ...]
    time_ms: float

    @property
    def event_id(self) -> bytes:
        second = int(round(self.time_ms / 1000.0))
        return cc.hash16(self.target, *sorted(self.evaluators), struct.pack("<q", second))

    def tbs_bytes(self) -> bytes:
        return (
            b"LEAVE" + self.target
            + struct.pack("<H", len(self.evaluators)) + b"".join(sorted(self.evaluators))
            + struct.pack("<d", self.time_ms)
        )


@dataclass(frozen=True)
class EvictionReport:
    event: EvictionEvent
    credential: cc.Credential
    signature: bytes
    timestamp: float

    def verify(self, issuer_public_key: bytes) -> bool:
        if not cc.verify_certificate(self.credential, issuer_public_key, self.timestamp):
            return False
        return cc.verify(self.credential.public_key,
                         cc.timestamped(self.event.tbs_bytes(), self.timestamp), self.signature)


@dataclass
class RegistryEntry:
    certificate: Certificate
    attributes: tuple[str, ...]
    encryption_key: bytes = b""


@dataclass
class EvictionRecord:
    event_id: bytes
    long_term_id: str
    count: int
    time_ms: float
    triggered_revocation: bool = False


class CertificationAuthority:
    def __init__(self, ca_id: str, region_id: str | None = None, seed=None,
                 scheme: str = "ed25519", tau_ms: int = DEFAULT_TAU_MS,
                 eviction_threshold: int = 3, leave_quorum: int = 3,
                 long_term_ms: int = DEFAULT_LONG_TERM_MS):
        self.ca_id = ca_id
        self.region_id = region_id or ca_id
        self.scheme = scheme
        self.tau_ms = int(tau_ms)
        self.eviction_threshold = eviction_threshold
        self.leave_quorum = leave_quorum
        self.long_term_ms = long_term_ms
        base = seed if seed is not None else ca_id
        self.ca_keypair = cc.generate_keypair(("ca", base), scheme)
        self.root_keypairs = {i: cc.generate_keypair(("root", base, i, 0), scheme) for i in (1, 2)}
        self._root_generation = {1: 0, 2: 0}
        self._seed = base
        self.registry: dict[str, RegistryEntry] = {}
        self.pseudonym_log: dict[bytes, tuple[str, int]] = {}
        self.issued: dict[bytes, int] = {}  # fingerprint -> lifetime end
        self.cert_owner: dict[bytes, str] = {}
        self.revoked: dict[bytes, int] = {}
        self.eviction_reports: dict[str, int] = {}
        self.eviction_log: list[EvictionRecord] = []
        self._seen_events: set[bytes] = set()
        self.cross_certs: dict[str, bytes] = {}
        self.foreign_revoked: dict[str, set[bytes]] = {}
        self.crl_serial = 0
        self._next_start: dict[str, int] = {}
        self._set_counter: dict[str, int] = {}
        self._seal_counter = 0

    @property
    def public_key(self) -> bytes:
        return self.ca_keypair.public_key

    def root_public_key(self, index: int) -> bytes:
        return self.root_keypairs[index].public_key

    def _sign(self, data: bytes) -> bytes:
        return cc.sign(self.ca_keypair.private_key, data)

    # -- registration and issuance -------------------------------------------

    def register_node(self, long_term_id: str, public_key: bytes, attributes, now: float,
                      encryption_key: bytes = b"") -> Certificate:
        if long_term_id in self.registry:
            raise AuthorityError("already registered")
        attributes = tuple(attributes)
        for a in attributes:
            if a not in cc.ROLE_CODES:
                raise AuthorityError(f"unknown attribute {a!r}")
        start = int(now)
        unsigned = Certificate(public_key, self.ca_id, attributes, start, start + self.long_term_ms,
                               subject_id=long_term_id)
        cert = _with_sig(unsigned, self._sign(unsigned.tbs_bytes()))
        self.registry[long_term_id] = RegistryEntry(cert, attributes, encryption_key)
        fp = cc.fingerprint(cert)
        self.issued[fp] = cert.end
        self.cert_owner[fp] = long_term_id
        return cert

    def _check_proof(self, public_key: bytes, request: bytes, proof: AuthProof, now: float):
        if proof is None or abs(now - proof.timestamp) > PROOF_WINDOW_MS:
            raise AuthorityError("authentication failed")
        if not cc.verify(public_key, cc.timestamped(request, proof.timestamp), proof.signature):
            raise AuthorityError("authentication failed")

    def _mint(self, owner: str, public_keys, now: float) -> PseudonymSet:
        start = max(int(now), self._next_start.get(owner, 0))
        out = []
        for j, pk in enumerate(public_keys):
            s = start + j * self.tau_ms
            unsigned = Pseudonym(self.ca_id, s, s + self.tau_ms, bytes(pk))
            p = Pseudonym(self.ca_id, s, s + self.tau_ms, bytes(pk), self._sign(unsigned.tbs_bytes()))
            fp = cc.fingerprint(p)
            self.pseudonym_log[fp] = (owner, int(now))
            self.issued[fp] = p.end
            out.append(p)
        if out:
            self._next_start[owner] = out[-1].end
        index = self._set_counter.get(owner, 0)
        self._set_counter[owner] = index + 1
        return PseudonymSet(out, index, owner)

    def is_identity_revoked(self, long_term_id: str) -> bool:
        entry = self.registry.get(long_term_id)
        return entry is not None and cc.fingerprint(entry.certificate) in self.revoked

    def issue_pseudonym_set(self, long_term_id: str, auth_proof: AuthProof, public_keys,
                            now: float) -> PseudonymSet:
        entry = self.registry.get(long_term_id)
        if entry is None or self.is_identity_revoked(long_term_id):
            raise AuthorityError("not authorized")
        request = refill_request_bytes(long_term_id, public_keys)
        self._check_proof(entry.certificate.subject_key, request, auth_proof, now)
        return self._mint(long_term_id, public_keys, now)

    def seal(self, pset: PseudonymSet, encryption_key: bytes) -> bytes:
        """Encrypt a set for its requester (deterministic per CA and call order)."""
        self._seal_counter += 1
        seed = cc._seed_bytes(("seal", self._seed, self._seal_counter))
        return cc.encrypt(encryption_key, pset.to_bytes(), seed=seed)

    def issue_pseudonym_set_sealed(self, long_term_id: str, auth_proof: AuthProof, public_keys,
                                   now: float) -> bytes:
        pset = self.issue_pseudonym_set(long_term_id, auth_proof, public_keys, now)
        return self.seal(pset, self.registry[long_term_id].encryption_key)

    def issue_foreigner_pseudonyms(self, foreign_cert_chain, auth_proof: AuthProof, public_keys,
                                   now: float, encryption_key: bytes = b"") -> PseudonymSet:
        chain = foreign_cert_chain if isinstance(foreign_cert_chain, (list, tuple)) else [foreign_cert_chain]
        cert = chain[0]
        home_key = self.cross_certs.get(cert.issuer_id)
        if home_key is None:
            raise AuthorityError("no cross-certification")
        if not cc.verify_certificate(cert, home_key, now):
            raise AuthorityError("not authorized")
        if cc.fingerprint(cert) in self.foreign_revoked.get(cert.issuer_id, ()):
            raise AuthorityError("not authorized")
        request = refill_request_bytes(cert.subject_id, public_keys, encryption_key)
        self._check_proof(cert.subject_key, request, auth_proof, now)
        owner = f"{cert.issuer_id}/{cert.subject_id}"
        return self._mint(owner, public_keys, now)

    def issue_foreigner_pseudonyms_sealed(self, foreign_cert_chain, auth_proof, public_keys,
                                          now: float, encryption_key: bytes) -> bytes:
        pset = self.issue_foreigner_pseudonyms(foreign_cert_chain, auth_proof, public_keys, now,
                                               encryption_key)
        return self.seal(pset, encryption_key)

    def cross_certify(self, other: "CertificationAuthority") -> None:
        """Mutual cross-certification between two regional CAs."""
        self.cross_certs[other.ca_id] = other.public_key
        other.cross_certs[self.ca_id] = self.public_key

    def import_crl(self, crl: Crl) -> bool:
        key = self.cross_certs.get(crl.issuer_id)
        if key is None or not crl.verify(key):
            return False
        self.foreign_revoked[crl.issuer_id] = set(crl.entries)
        return True

    # -- resolution ----------------------------------------------------------

    def issue_authorization(self, purpose: str, now: float) -> AuthorizationToken:
        unsigned = AuthorizationToken(self.ca_id, purpose, int(now))
        return AuthorizationToken(self.ca_id, purpose, int(now), self._sign(unsigned.tbs_bytes()))

    def resolve_pseudonym(self, pseudonym_fingerprint: bytes,
                          authorization: AuthorizationToken | None) -> str:
        if authorization is None or authorization.ca_id != self.ca_id or not cc.verify(
                self.public_key, authorization.tbs_bytes(), authorization.signature):
            raise AuthorityError("forbidden")
        entry = self.pseudonym_log.get(bytes(pseudonym_fingerprint))
        if entry is None:
            raise AuthorityError("not issued here")
        return entry[0]

    def export_pseudonym_log(self) -> str:
        return "".join(f"{fp.hex()},{owner},{t}\n" for fp, (owner, t) in self.pseudonym_log.items())

    # -- revocation ----------------------------------------------------------

    def revoke(self, fingerprint: bytes, reason: str = "", now: float = 0) -> frozenset:
        fingerprint = bytes(fingerprint)
        end = self.issued.get(fingerprint)
        if end is None:
            raise AuthorityError("not issued here")
        self.revoked[fingerprint] = end
        log.info("%s revoked %s (%s)", self.ca_id, fingerprint.hex(), reason or "unspecified")
        return frozenset(self.revoked)

    def revoke_identity(self, long_term_id: str, reason: str = "", now: float = 0) -> list[bytes]:
        """Revoke a node's long-term certificate and every pseudonym issued to it."""
        fps = [fp for fp, (owner, _) in self.pseudonym_log.items() if owner == long_term_id]
        fps += [fp for fp, owner in self.cert_owner.items() if owner == long_term_id]
        for fp in fps:
            self.revoke(fp, reason, now)
        return fps

    def load_revocations(self, entries: dict[bytes, int]) -> None:
        """Bulk-import revoked fingerprints (with lifetime ends) issued elsewhere,
        e.g. to size a CRL for dissemination experiments."""
        for fp, end in entries.items():
            fp = bytes(fp)
            self.issued.setdefault(fp, int(end))
            self.revoked[fp] = int(end)

    def build_crl(self, now: float) -> Crl:
        """Signed CRL of every revoked credential still inside its lifetime."""
        entries = tuple(sorted(fp for fp, end in self.revoked.items() if end >= now))
        self.crl_serial += 1
        unsigned = Crl(self.ca_id, self.crl_serial, int(now), entries)
        return Crl(self.ca_id, self.crl_serial, int(now), entries, self._sign(unsigned.signed_material()))

    def compress_crl(self, crl: Crl, target_fp_rate: float = 0.001):
        from .revocation.bloom import bloom_build, sign_bloom

        bloom = bloom_build(crl.entries, target_fp_rate, serial=crl.serial)
        return sign_bloom(bloom, self.ca_keypair.private_key)

    def trusted_key(self, ca_id: str) -> bytes | None:
        if ca_id == self.ca_id:
            return self.public_key
        return self.cross_certs.get(ca_id)

    def owner_of(self, fingerprint: bytes) -> str | None:
        entry = self.pseudonym_log.get(fingerprint)
        if entry is not None:
            return entry[0]
        return self.cert_owner.get(fingerprint)

    def record_eviction_report(self, reports, threshold: int | None = None,
                               now: float | None = None) -> list[bytes] | None:
        """Account one LEAVE eviction event.

        ``reports`` are the evaluators' signed reports for a single event.  The
        event counts once (by event id) if at least ``leave_quorum`` distinct,
        valid evaluator pseudonyms vouch for it.  Returns the revoked
        fingerprints when this event pushes the target over the threshold.
        """
        threshold = self.eviction_threshold if threshold is None else threshold
        reports = list(reports)
        if not reports:
            return None
        event = reports[0].event
        eid = event.event_id
        if eid in self._seen_events:
            return None
        signers = set()
        for rep in reports:
            if rep.event.event_id != eid:
                continue
            key = self.trusted_key(rep.credential.ca_id)
            if key is None or not rep.verify(key):
                continue
            fp = cc.fingerprint(rep.credential)
            if fp in self.revoked or fp not in event.evaluators:
                continue
            signers.add(fp)
        if len(signers) < max(1, self.leave_quorum):
            return None
        self._seen_events.add(eid)
        owner = self.owner_of(event.target)
        if owner is None:
            return None
        count = self.eviction_reports.get(owner, 0) + 1
        self.eviction_reports[owner] = count
        record = EvictionRecord(eid, owner, count, event.time_ms if now is None else now)
        self.eviction_log.append(record)
        if count >= threshold and not self._identity_fully_revoked(owner):
            record.triggered_revocation = True
            return self.revoke_identity(owner, "leave-threshold", record.time_ms)
        return None

    def _identity_fully_revoked(self, owner: str) -> bool:
        fps = [fp for fp, (o, _) in self.pseudonym_log.items() if o == owner]
        return bool(fps) and all(fp in self.revoked for fp in fps)

    # -- HSM device management -----------------------------------------------

    def issue_hsm_command(self, kind, target_hsm_id: int, payload: bytes = b"",
                          signing_root: int = 1) -> HsmCommand:
        kind = CommandKind(kind) if not isinstance(kind, str) else CommandKind[kind.upper()]
        return HsmCommand.signed(kind, target_hsm_id, payload, signing_root,
                                 self.root_keypairs[signing_root].private_key)

    def replace_root(self, index: int) -> bytes:
        """Mint a successor for a compromised root key; returns the new public key."""
        self._root_generation[index] += 1
        kp = cc.generate_keypair(("root", self._seed, index, self._root_generation[index]), self.scheme)
        self.root_keypairs[index] = kp
        return kp.public_key

    # -- persistence (CLI keystore) --------------------------------------------

    def to_dict(self) -> dict:
        return {
            "ca_id": self.ca_id,
            "region_id": self.region_id,
            "scheme": self.scheme,
            "tau_ms": self.tau_ms,
            "eviction_threshold": self.eviction_threshold,
            "leave_quorum": self.leave_quorum,
            "long_term_ms": self.long_term_ms,
            "seed": str(self._seed),
            "ca_private": self.ca_keypair.private_key.hex(),
            "roots": {str(i): kp.private_key.hex() for i, kp in self.root_keypairs.items()},
            "root_generation": {str(k): v for k, v in self._root_generation.items()},
            "registry": {
                k: {"cert": e.certificate.to_bytes().hex(), "enc": e.encryption_key.hex()}
                for k, e in self.registry.items()
            },
            "pseudonym_log": [[fp.hex(), o, t] for fp, (o, t) in self.pseudonym_log.items()],
            "issued": [[fp.hex(), end] for fp, end in self.issued.items()],
            "cert_owner": [[fp.hex(), o] for fp, o in self.cert_owner.items()],
            "revoked": [[fp.hex(), end] for fp, end in self.revoked.items()],
            "eviction_reports": dict(self.eviction_reports),
            "seen_events": sorted(e.hex() for e in self._seen_events),
            "cross_certs": {k: v.hex() for k, v in self.cross_certs.items()},
            "crl_serial": self.crl_serial,
            "next_start": dict(self._next_start),
            "set_counter": dict(self._set_counter),
            "seal_counter": self._seal_counter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertificationAuthority":
        ca = cls.__new__(cls)
        ca.ca_id = d["ca_id"]
        ca.region_id = d["region_id"]
        ca.scheme = d["scheme"]
        ca.tau_ms = d["tau_ms"]
        ca.eviction_threshold = d["eviction_threshold"]
        ca.leave_quorum = d["leave_quorum"]
        ca.long_term_ms = d["long_term_ms"]
        ca._seed = d["seed"]
        ca.ca_keypair = cc.keypair_from_private(bytes.fromhex(d["ca_private"]))
        ca.root_keypairs = {int(i): cc.keypair_from_private(bytes.fromhex(h)) for i, h in d["roots"].items()}
        ca._root_generation = {int(k): v for k, v in d["root_generation"].items()}
        ca.registry = {}
        for k, e in d["registry"].items():
            cert = cc.decode_credential(bytes.fromhex(e["cert"]))
            ca.registry[k] = RegistryEntry(cert, cert.attributes, bytes.fromhex(e["enc"]))
        ca.pseudonym_log = {bytes.fromhex(fp): (o, t) for fp, o, t in d["pseudonym_log"]}
        ca.issued = {bytes.fromhex(fp): end for fp, end in d["issued"]}
        ca.cert_owner = {bytes.fromhex(fp): o for fp, o in d["cert_owner"]}
        ca.revoked = {bytes.fromhex(fp): end for fp, end in d["revoked"]}
        ca.eviction_reports = dict(d["eviction_reports"])
        ca.eviction_log = []
        ca._seen_events = {bytes.fromhex(e) for e in d["seen_events"]}
        ca.cross_certs = {k: bytes.fromhex(v) for k, v in d["cross_certs"].items()}
        ca.foreign_revoked = {}
        ca.crl_serial = d["crl_serial"]
        ca._next_start = dict(d["next_start"])
        ca._set_counter = dict(d["set_counter"])
        ca._seal_counter = d["seal_counter"]
        return ca


def _with_sig(cert: Certificate, sig: bytes) -> Certificate:
    return Certificate(cert.subject_key, cert.issuer_id, cert.attributes, cert.start, cert.end,
                       sig, subject_id=cert.subject_id)
