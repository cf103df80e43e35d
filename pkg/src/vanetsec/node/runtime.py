"""Vehicle and RSU runtime.

A node is a single-threaded actor. Callers pass ``now`` as the node's local
clock reading; the HSM clock is stepped forward to it before signing.
"""

from __future__ import annotations

import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field

from .. import crypto_core as cc
from ..authority import (
    AuthProof,
    CertificationAuthority,
    Crl,
    EvictionEvent,
    EvictionReport,
    PseudonymSet,
    refill_request_bytes,
)
from ..crypto_core import GeoStamp, SignedMessage
from ..errors import HsmError, NodeError
from ..hsm import Hsm
from ..revocation.bloom import BloomCrl, bloom_query
from ..revocation.pieces import DEFAULT_REDUNDANCY, CrlPiece, CrlReassembler, Pending
from .beacon import BeaconPayload, distance, neighbor_check, position_plausibility
from .geocast import (
    GeocastMessage,
    HopSignature,
    LruCache,
    Region,
    SlidingWindowLimiter,
    geocast_header,
)
from .pool import PseudonymPool

log = logging.getLogger(__name__)

CERTIFICATE_ROLES = ("rsu", "rsu-internet")


@dataclass
class NodeParams:
    beacon_hz: float = 10.0
    fresh_ms: float = 100.0
    epsilon_m: float = 450.0
    range_m: float = 1000.0
    v_max_mps: float = 70.0
    overlap_m: float = 1.0
    overlap_window_ms: float = 50.0
    staleness_factor: float = 3.0
    seen_cache_size: int = 4096
    rate_limit_per_s: int = 10
    geocast_max_age_ms: float = 10_000.0
    mds_window_ms: float = 2000.0
    refill_fraction: float = 0.2
    set_size: int = 100

    def __post_init__(self):
        if not 1.0 <= self.beacon_hz <= 10.0:
            raise ValueError("beacon frequency must lie in [1, 10] Hz")

    @property
    def beacon_period_ms(self) -> float:
        return 1000.0 / self.beacon_hz

    @property
    def staleness_ms(self) -> float:
        return self.staleness_factor * self.beacon_period_ms


@dataclass
class NeighborEntry:
    position: tuple[float, float]
    speed: float
    heading: float
    last_geo_stamp: GeoStamp
    last_seen_ms: float
    authenticated: bool
    role: str = "private-vehicle"


class NeighborTable:
    def __init__(self, staleness_ms: float):
        self.staleness_ms = staleness_ms
        self.entries: dict[bytes, NeighborEntry] = {}

    def __contains__(self, fp) -> bool:
        return fp in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, fp) -> NeighborEntry | None:
        return self.entries.get(fp)

    def put(self, fp: bytes, entry: NeighborEntry) -> None:
        self.entries[fp] = entry

    def remove(self, fp) -> None:
        self.entries.pop(fp, None)

    def prune(self, now: float) -> None:
        cutoff = now - self.staleness_ms
        for fp in [f for f, e in self.entries.items() if e.last_seen_ms < cutoff]:
            del self.entries[fp]

    def authenticated(self, now: float) -> list[tuple[bytes, NeighborEntry]]:
        self.prune(now)
        return [(fp, e) for fp, e in self.entries.items() if e.authenticated]


@dataclass
class CrlView:
    explicit: dict[str, Crl] = field(default_factory=dict)
    compressed: dict[str, BloomCrl] = field(default_factory=dict)
    _listed: set = field(default_factory=set)
    _bloom_cache: dict = field(default_factory=dict)

    def serial(self, issuer_id: str, compressed: bool) -> int:
        held = (self.compressed if compressed else self.explicit).get(issuer_id)
        return -1 if held is None else held.serial

    def set_explicit(self, crl: Crl) -> None:
        self.explicit[crl.issuer_id] = crl
        self._listed = set().union(*(c.entries for c in self.explicit.values()))

    def set_compressed(self, issuer_id: str, bloom: BloomCrl) -> None:
        self.compressed[issuer_id] = bloom
        self._bloom_cache.clear()

    def lookup(self, fp: bytes) -> str | None:
        """"explicit", "bloom" or None."""
        if fp in self._listed:
            return "explicit"
        if self.compressed:
            hit = self._bloom_cache.get(fp)
            if hit is None:
                hit = any(bloom_query(b, fp) for b in self.compressed.values())
                self._bloom_cache[fp] = hit
            if hit:
                return "bloom"
        return None


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.accepted


@dataclass(frozen=True)
class Decision:
    """Outcome of a geocast step: next_hop | distribute | rebroadcast | suppress | drop."""

    action: str
    message: GeocastMessage | None = None
    next_hop: bytes | None = None
    reason: str | None = None


@dataclass(frozen=True)
class SignRecord:
    credential_fingerprint: bytes
    pool_fingerprint: bytes | None
    time_ms: float


class Node:
    def __init__(self, node_id: str, role: str, hsm: Hsm, certificate: cc.Certificate,
                 trusted_keys: dict[str, bytes], params: NodeParams | None = None,
                 rng: random.Random | None = None, home_ca_id: str | None = None):
        if role not in cc.ROLE_CODES:
            raise NodeError(f"unknown role {role!r}")
        self.node_id = node_id
        self.role = role
        self.hsm = hsm
        self.certificate = certificate
        self.trusted_keys = dict(trusted_keys)
        self.params = params or NodeParams()
        self.rng = rng or random.Random(node_id)
        self.home_ca_id = home_ca_id or certificate.issuer_id
        self.pool = PseudonymPool()
        self.neighbor_table = NeighborTable(self.params.staleness_ms)
        self.seen_cache = LruCache(self.params.seen_cache_size)
        self.local_blacklist: set[bytes] = set()
        self.crl_view = CrlView()
        self.rate_ledger = SlidingWindowLimiter(self.params.rate_limit_per_s, 1000.0)
        self.position = (0.0, 0.0)
        self.speed = 0.0
        self.heading = 0.0
        self.link_id = self.rng.getrandbits(48)
        self.stats: Counter = Counter()
        self.sign_log: list[SignRecord] | None = None  # set to a list to audit signatures
        self._seq = 0
        self._cred_ok: dict[bytes, bool] = {}
        self._mds: dict[bytes, deque] = {}
        self.reassemblers: dict[str, CrlReassembler] = {}

    @classmethod
    def provision(cls, node_id: str, role: str, ca: CertificationAuthority, device_id: int,
                  now: float = 0.0, seed=None, scheme: str | None = None,
                  params: NodeParams | None = None, trusted_keys=None,
                  hsm_params: dict | None = None) -> "Node":
        """Manufacture an HSM, register the node with its home CA."""
        scheme = scheme or ca.scheme
        hsm = Hsm(device_id, seed=seed, scheme=scheme)
        hsm.init_device(hsm_params, ca.root_public_key(1), ca.root_public_key(2))
        hsm.clock_tick(now)
        cert = ca.register_node(node_id, hsm.long_term_public_key, [role], now,
                                encryption_key=hsm.encryption_public_key)
        keys = {ca.ca_id: ca.public_key, **ca.cross_certs, **(trusted_keys or {})}
        rng = random.Random(cc._seed_bytes(("node", node_id, seed)))
        return cls(node_id, role, hsm, cert, keys, params, rng, ca.ca_id)

    # -- identity and signing --------------------------------------------------

    @property
    def uses_certificate(self) -> bool:
        return self.role in CERTIFICATE_ROLES

    @property
    def local_time(self) -> float:
        return self.hsm.clock_ms

    @property
    def credential(self) -> cc.Credential | None:
        return self.certificate if self.uses_certificate else self.pool.active

    @property
    def fingerprint(self) -> bytes | None:
        cred = self.credential
        return None if cred is None else cc.fingerprint(cred)

    def _sync(self, now: float | None) -> float:
        if now is not None and now > self.hsm.clock_ms:
            self.hsm.clock_tick(now - self.hsm.clock_ms)
        return self.hsm.clock_ms

    def _ensure_active(self, now: float) -> None:
        if self.pool.empty:
            raise NodeError("no credentials")
        active = self.pool.active
        if active is None or not active.start <= now <= active.end:
            self.change_pseudonym("interval", now)

    def sign_payload(self, payload: bytes, now: float | None = None) -> SignedMessage:
        now = self._sync(now)
        if self.uses_certificate:
            geo = GeoStamp(now, *self.position)
            sig, ts = self.hsm.hsm_sign("long_term", cc.signing_bytes(payload, geo))
            return self._record(SignedMessage(payload, geo, sig, self.certificate), ts)
        self._ensure_active(now)
        for attempt in range(2):
            geo = GeoStamp(now, *self.position)
            try:
                sig, ts = self.hsm.hsm_sign("active", cc.signing_bytes(payload, geo))
            except HsmError as exc:
                if str(exc) != "pseudonym expired" or attempt:
                    raise NodeError(str(exc)) from None
                self.change_pseudonym("interval", now)
                continue
            return self._record(SignedMessage(payload, geo, sig, self.pool.active), ts)
        raise NodeError("pseudonym expired")  # pragma: no cover

    def _record(self, msg: SignedMessage, ts: float) -> SignedMessage:
        if ts != msg.geo_stamp.timestamp:
            raise NodeError("clock moved during signing")
        if self.sign_log is not None:
            active = self.hsm.active_public_key()
            pool_fp = self.pool.active_fingerprint
            if not self.uses_certificate and (self.pool.active is None or active != self.pool.active.public_key):
                pool_fp = None  # pool and HSM disagree; surfaces in audits
            self.sign_log.append(SignRecord(cc.fingerprint(msg.credential), pool_fp, ts))
        return msg

    def assemble_beacon(self, now: float | None = None) -> SignedMessage:
        payload = BeaconPayload(self.position[0], self.position[1], self.speed, self.heading, self.role)
        return self.sign_payload(payload.to_bytes(), now)

    # -- pseudonym lifecycle -----------------------------------------------------

    def change_pseudonym(self, trigger: str = "interval", now: float | None = None) -> bytes:
        """Activate the next usable pseudonym; returns its fingerprint."""
        if trigger not in ("interval", "mix_zone_entry", "refill"):
            raise NodeError(f"unknown trigger {trigger!r}")
        if self.uses_certificate:
            raise NodeError("infrastructure nodes do not use pseudonyms")
        now = self._sync(now)
        choice = self.pool.next_valid(now)
        if choice is None:
            self.stats["pool_exhausted"] += 1
            log.warning("%s: pool exhausted", self.node_id)
            raise NodeError("pool exhausted")
        from_next, j = choice
        if from_next:
            self.pool.promote()
        p = self.pool.current_set.pseudonyms[j]
        self.hsm.activate_slot(self.hsm.slot_index(p.public_key), (p.start, p.end))
        self.pool.active_index = j
        self.pool.last_change_ms = now
        self.link_id = self.rng.getrandbits(48)
        self.stats["pseudonym_changes"] += 1
        return cc.fingerprint(p)

    def maybe_change_pseudonym(self, now: float | None = None) -> bool:
        """Interval policy: switch once the active pseudonym's lifetime has run out."""
        now = self._sync(now)
        active = self.pool.active
        if self.uses_certificate or self.pool.empty or (active is not None and now < active.end):
            return False
        try:
            self.change_pseudonym("interval", now)
        except NodeError:
            return False
        return True

    def needs_refill(self, now: float | None = None, region_ca_id: str | None = None) -> bool:
        if self.uses_certificate:
            return False
        now = self._sync(now)
        if self.pool.empty:
            return True
        if region_ca_id is not None and self.pool.current_set.pseudonyms[0].ca_id != region_ca_id:
            return True
        return self.pool.next_set is None and self.pool.remaining_fraction(now) <= self.params.refill_fraction

    def pseudonym_refill(self, ca: CertificationAuthority, now: float | None = None,
                         connected: bool = True) -> bool:
        """Fetch a new set from ``ca``; a foreign CA yields an immediate region switch."""
        if not connected:
            self.stats["refill_deferred"] += 1
            return False
        now = self._sync(now)
        keys = self.hsm.generate_short_term_keys(self.params.set_size)
        if ca.ca_id == self.home_ca_id:
            req = refill_request_bytes(self.node_id, keys)
            sig, ts = self.hsm.hsm_sign("long_term", req)
            blob = ca.issue_pseudonym_set_sealed(self.node_id, AuthProof(sig, ts), keys, now)
        else:
            enc = self.hsm.encryption_public_key
            req = refill_request_bytes(self.certificate.subject_id, keys, enc)
            sig, ts = self.hsm.hsm_sign("long_term", req)
            blob = ca.issue_foreigner_pseudonyms_sealed([self.certificate], AuthProof(sig, ts), keys, now, enc)
        pset = PseudonymSet.from_bytes(self.hsm.hsm_decrypt(blob))
        self.trusted_keys.setdefault(ca.ca_id, ca.public_key)
        for p in pset.pseudonyms:
            if not cc.verify(self.trusted_keys[p.ca_id], p.tbs_bytes(), p.signature):
                raise NodeError("refill returned an invalid pseudonym")
        self.stats["refills"] += 1
        switching = not self.pool.empty and self.pool.current_set.pseudonyms[0].ca_id != ca.ca_id
        if switching or self.pool.empty:
            self.pool.install(pset, replace=True)
            self.change_pseudonym("refill", now)
        else:
            self.pool.install(pset)
        return True

    # -- reception ---------------------------------------------------------------

    def _credential_reason(self, cred: cc.Credential, at: float) -> str | None:
        if isinstance(cred, cc.Certificate) and "private-vehicle" in cred.attributes:
            return "invalid_credential"  # private vehicles never sign with long-term keys
        key = self.trusted_keys.get(cred.ca_id)
        if key is None:
            return "untrusted_ca"
        if not cred.start <= at <= cred.end:
            return "expired_credential"
        fp = cc.fingerprint(cred)
        ok = self._cred_ok.get(fp)
        if ok is None:
            ok = self._cred_ok[fp] = cc.verify(key, cred.tbs_bytes(), cred.signature)
        if not ok:
            return "invalid_credential"
        hit = self.crl_view.lookup(fp)
        if hit is not None:
            if hit == "bloom":
                self.stats["bloom_rejections"] += 1
            return "revoked"
        if fp in self.local_blacklist:
            return "blacklisted"
        return None

    def _reject(self, reason: str) -> Verdict:
        self.stats[f"reject:{reason}"] += 1
        return Verdict(False, reason)

    def verify_beacon(self, msg, now: float | None = None) -> Verdict:
        """Checks in order: credential, revocation, signature, freshness, distance.

        The credential lifetime is checked at the signed geo-stamp time;
        freshness then bounds how far that lies from ``now``.
        """
        now = self._sync(now)
        try:
            if isinstance(msg, (bytes, bytearray)):
                msg = SignedMessage.from_bytes(bytes(msg))
            payload = BeaconPayload.from_bytes(msg.payload)
        except (cc.CryptoError, ValueError, UnicodeDecodeError):
            return self._reject("malformed")
        reason = self._credential_reason(msg.credential, msg.geo_stamp.timestamp)
        if reason:
            return self._reject(reason)
        if not cc.verify_signed_message(msg):
            return self._reject("bad_signature")
        if now - msg.geo_stamp.timestamp > self.params.fresh_ms:
            return self._reject("stale")
        if not neighbor_check(msg.geo_stamp, self.position, now, self.params.range_m, self.params.epsilon_m):
            return self._reject("not_neighbor")
        fp = cc.fingerprint(msg.credential)
        prior = self.neighbor_table.get(fp)
        self._mds_observe(fp, msg.geo_stamp, prior, now)
        self.neighbor_table.put(fp, NeighborEntry(msg.geo_stamp.position, payload.speed, payload.heading,
                                                  msg.geo_stamp, now, True, payload.role))
        self.stats["accepted"] += 1
        return Verdict(True)

    # -- misbehaviour detection and LEAVE ------------------------------------------

    def _mds_observe(self, fp, stamp: GeoStamp, prior: NeighborEntry | None, now: float):
        concurrent = [e.last_geo_stamp for f, e in self.neighbor_table.entries.items() if f != fp]
        # same range tolerance as the neighbor check
        res = position_plausibility(stamp, prior.last_geo_stamp if prior else None, self.position,
                                    self.params.range_m + self.params.epsilon_m, self.params.v_max_mps, concurrent,
                                    self.params.overlap_m, self.params.overlap_window_ms)
        self._mds.setdefault(fp, deque()).append((now, res.reason))

    def mds_flags(self, now: float | None = None) -> set[bytes]:
        """Authenticated neighbors seen implausible inside the sliding window."""
        now = self._sync(now)
        cutoff = now - self.params.mds_window_ms
        flagged = set()
        for fp in list(self._mds):
            q = self._mds[fp]
            while q and q[0][0] < cutoff:
                q.popleft()
            if not q:
                del self._mds[fp]
            elif any(r for _, r in q):
                flagged.add(fp)
        live = {fp for fp, _ in self.neighbor_table.authenticated(now)}
        return flagged & live

    def apply_eviction(self, event: EvictionEvent, now: float | None = None) -> EvictionReport | None:
        """Blacklist the target; evaluators also return a signed report for the CA."""
        now = self._sync(now)
        self.local_blacklist.add(event.target)
        self.neighbor_table.remove(event.target)
        if self.uses_certificate or self.fingerprint not in event.evaluators:
            return None
        sig, ts = self.hsm.hsm_sign("active", event.tbs_bytes())
        return EvictionReport(event, self.pool.active, sig, ts)

    # -- revocation ------------------------------------------------------------------

    def apply_crl(self, crl: Crl | BloomCrl, issuer_id: str | None = None) -> str:
        """Returns "applied", "stale" or "rejected"."""
        compressed = isinstance(crl, BloomCrl)
        issuer = issuer_id or (self.home_ca_id if compressed else crl.issuer_id)
        key = self.trusted_keys.get(issuer)
        if key is None or not crl.verify(key):
            self.stats["crl_rejected"] += 1
            return "rejected"
        if crl.serial < self.crl_view.serial(issuer, compressed):
            return "stale"
        if compressed:
            self.crl_view.set_compressed(issuer, crl)
        else:
            self.crl_view.set_explicit(crl)
        for fp in list(self.neighbor_table.entries):
            if self.crl_view.lookup(fp):
                self.neighbor_table.remove(fp)
        return "applied"

    def receive_crl_piece(self, piece: CrlPiece, issuer_id: str | None = None,
                          redundancy: float = DEFAULT_REDUNDANCY) -> Crl | Pending | None:
        """Collect a broadcast piece; the CRL is applied once k pieces are held.

        Returns None for a piece that was invalid or not new.
        """
        issuer = issuer_id or self.home_ca_id
        key = self.trusted_keys.get(issuer)
        if key is None:
            return None
        r = self.reassemblers.get(issuer)
        if r is None:
            r = self.reassemblers[issuer] = CrlReassembler(issuer, key, redundancy)
        if piece.serial <= self.crl_view.serial(issuer, False) or not r.add(piece):
            return None
        status = r.status()
        if isinstance(status, Crl):
            self.apply_crl(status)
        return status

    # -- geocast -----------------------------------------------------------------

    def geocast_originate(self, payload: bytes, region: Region, now: float | None = None) -> GeocastMessage:
        self._seq += 1
        return GeocastMessage(self.sign_payload(geocast_header(region, self._seq) + payload, now))

    def _geocast_reason(self, msg: GeocastMessage, now: float) -> str | None:
        o = msg.origin
        reason = self._credential_reason(o.credential, o.geo_stamp.timestamp)
        if reason:
            return reason
        if not cc.verify_signed_message(o):
            return "bad_signature"
        if now - o.geo_stamp.timestamp > self.params.geocast_max_age_ms:
            return "stale"
        if msg.hops:
            hop = msg.hops[-1]
            reason = self._credential_reason(hop.credential, hop.geo_stamp.timestamp)
            if reason:
                return reason
            if not msg.newest_hop_valid():
                return "bad_signature"
        return None

    def _hop_sign(self, msg: GeocastMessage, now: float) -> GeocastMessage:
        # the HSM appends its clock, which equals geo.timestamp after _sync
        geo = GeoStamp(now, *self.position)
        selector = "long_term" if self.uses_certificate else "active"
        if not self.uses_certificate:
            self._ensure_active(now)
        sig, _ = self.hsm.hsm_sign(selector, msg.to_bytes() + geo.to_bytes())
        return msg.with_hop(HopSignature(self.credential, geo, sig))

    def geocast_forward(self, msg: GeocastMessage, now: float | None = None,
                        exclude=(), retry: bool = False) -> Decision:
        """Greedy step toward the region center.

        ``retry`` re-resolves the next hop after a missed-neighbor callback
        without charging the rate budget again.
        """
        now = self._sync(now)
        reason = self._geocast_reason(msg, now)
        if reason:
            self.stats["geocast_drop:bad_signature"] += 1
            return Decision("drop", reason="bad_signature")
        region = msg.region
        if region.contains(self.position):
            return Decision("distribute", msg)
        if not retry and not self.rate_ledger.allow(msg.origin_fingerprint, now):
            self.stats["geocast_drop:rate_limited"] += 1
            return Decision("drop", reason="rate_limited")
        center = region.center
        own = distance(self.position, center)
        best = None
        for fp, e in self.neighbor_table.authenticated(now):
            if fp in exclude:
                continue
            d = distance(e.position, center)
            if d < own and (best is None or (d, fp) < best):
                best = (d, fp)
        if best is None:
            self.stats["geocast_drop:local_maximum"] += 1
            return Decision("drop", reason="local_maximum")
        return Decision("next_hop", self._hop_sign(msg, now), next_hop=best[1])

    def on_missed_neighbor(self, fp: bytes) -> None:
        """Link layer reports the next hop vanished (typically a pseudonym change)."""
        self.neighbor_table.remove(fp)
        self.stats["missed_neighbor"] += 1

    def geocast_distribute(self, msg: GeocastMessage, now: float | None = None) -> Decision:
        now = self._sync(now)
        if self._geocast_reason(msg, now):
            return Decision("drop", reason="bad_signature")
        key = (msg.origin_fingerprint, msg.sequence_number)
        if self.seen_cache.touch(key, now):
            self.stats["geocast_suppressed"] += 1
            return Decision("suppress")
        if not self.rate_ledger.allow(msg.origin_fingerprint, now):
            self.stats["geocast_drop:rate_limited"] += 1
            return Decision("drop", reason="rate_limited")
        self.stats["geocast_rebroadcast"] += 1
        if not msg.hops and msg.origin_fingerprint == self.fingerprint:
            return Decision("rebroadcast", msg)
        return Decision("rebroadcast", self._hop_sign(msg, now))
