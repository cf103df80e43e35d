"""Emulated hardware security module.

The HSM owns every private key of a node.  Callers only ever see public keys,
signatures (each carrying the HSM clock reading), plaintexts of messages
addressed to the device, and the signed kill acknowledgement.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from . import crypto_core as cc
from .errors import HsmError

log = logging.getLogger(__name__)

KILL_ACK_TAG = b"KILLACK"
LANES = ("safety", "infotainment")


class CommandKind(IntEnum):
    KILL = 1
    REVOKE_ROOT_K1 = 2
    REVOKE_ROOT_K2 = 3
    LOAD_ROOT = 4
    UPDATE_LONG_TERM_KEY = 5
    CLOCK_SYNC = 6


@dataclass(frozen=True)
class HsmCommand:
    kind: CommandKind
    device_id: int
    payload: bytes
    root_index: int
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return (
            struct.pack("<BQI", int(self.kind), self.device_id, len(self.payload))
            + self.payload
            + struct.pack("<B", self.root_index)
        )

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "HsmCommand":
        r = cc.Reader(data)
        kind, device_id, n = r.unpack("<BQI")
        payload = r.take(n)
        root_index = r.u8()
        try:
            kind = CommandKind(kind)
        except ValueError:
            raise HsmError("unauthenticated command") from None
        return cls(kind, device_id, payload, root_index, r.rest())

    @classmethod
    def signed(cls, kind, device_id: int, payload: bytes, root_index: int,
               root_private_key: bytes) -> "HsmCommand":
        unsigned = cls(CommandKind(kind), device_id, payload, root_index)
        return cls(unsigned.kind, device_id, payload, root_index,
                   cc.sign(root_private_key, unsigned.tbs_bytes()))


def load_root_payload(index: int, public_key: bytes) -> bytes:
    return struct.pack("<B", index) + public_key


def parse_kill_ack(ack: bytes, long_term_public_key: bytes):
    """Return ``(device_id, clock_ms)`` for a genuine ACK, else None."""
    head = 8 + len(KILL_ACK_TAG) + 8
    if len(ack) <= head or ack[8:8 + len(KILL_ACK_TAG)] != KILL_ACK_TAG:
        return None
    body, sig = ack[:head], ack[head:]
    if not cc.verify(long_term_public_key, body, sig):
        return None
    device_id = struct.unpack("<Q", body[:8])[0]
    clock = struct.unpack("<d", body[-8:])[0]
    return device_id, clock


@dataclass
class _Slot:
    public_key: bytes
    private_key: bytes | None = field(repr=False)
    lane: str
    lifetime: tuple[int, int] | None = None


class Hsm:
    """One emulated device.  Single-threaded: the owning node serialises calls."""

    def __init__(self, device_id: int, seed=None, scheme: str = "ed25519"):
        self.device_id = device_id
        self.scheme = scheme
        self._seed = cc._seed_bytes(("hsm", device_id, seed) if seed is not None else device_id)
        self._keygen_counter = 0
        self.initialized = False
        self.killed = False
        self.clock_ms = 0.0
        self.drift_rate = 0.0
        self.root_pub_keys: dict[int, bytes | None] = {}
        self._long_term: cc.KeyPair | None = None
        self._enc: cc.EncryptionKeyPair | None = None
        self._slots: list[_Slot] = []
        self.active: dict[str, int] = {}
        self.retired: set[int] = set()
        self.outputs_log: list[bytes] | None = None  # set to a list to record every output

    # -- helpers -------------------------------------------------------------

    def _emit(self, *items):
        if self.outputs_log is not None:
            for item in items:
                if isinstance(item, (bytes, bytearray)):
                    self.outputs_log.append(bytes(item))
                elif isinstance(item, (list, tuple)):
                    self._emit(*item)
        return items[0] if len(items) == 1 else items

    def _alive(self):
        if self.killed or not self.initialized:
            raise HsmError("device dead" if self.killed else "not initialized")

    def _next_seed(self, label: bytes) -> bytes:
        self._keygen_counter += 1
        return hashlib.sha256(self._seed + label + self._keygen_counter.to_bytes(8, "little")).digest()

    def _set_long_term(self, kp: cc.KeyPair):
        self._long_term = kp
        self._enc = cc.encryption_keypair(kp.private_key)

    def _erase(self):
        self._long_term = None
        self._enc = None
        self._slots = []
        self.root_pub_keys = {}
        self.active = {}
        self.retired = set()
        self.killed = True

    def tamper(self) -> None:
        """Physical intrusion: erase everything at once, with no ACK."""
        if not self.killed:
            self._erase()
            log.info("hsm %d erased after tamper", self.device_id)

    # -- lifecycle -----------------------------------------------------------

    def init_device(self, params: dict | None, root_pub_k1: bytes, root_pub_k2: bytes,
                    long_term_keypair: cc.KeyPair | None = None) -> "Hsm":
        if self.initialized or self.killed:
            raise HsmError("already initialized")
        if root_pub_k1 == root_pub_k2:
            raise HsmError("root keys must be distinct")
        params = params or {}
        self.drift_rate = float(params.get("drift_rate", 0.0))
        self.root_pub_keys = {1: bytes(root_pub_k1), 2: bytes(root_pub_k2)}
        if long_term_keypair is None:
            long_term_keypair = cc.generate_keypair(self._next_seed(b"lt"), self.scheme)
        self._set_long_term(long_term_keypair)
        self.clock_ms = 0.0
        self.initialized = True
        return self

    @property
    def long_term_public_key(self) -> bytes:
        self._alive()
        return self._emit(self._long_term.public_key)

    @property
    def encryption_public_key(self) -> bytes:
        self._alive()
        return self._emit(self._enc.public_key)

    def stored_private_keys(self) -> list[bytes]:
        """Test hook: every private secret currently held (never called by nodes)."""
        keys = [s.private_key for s in self._slots if s.private_key]
        if self._long_term:
            keys += [self._long_term.private_key, self._enc.private_key]
        return keys

    # -- short-term keys -----------------------------------------------------

    def generate_short_term_keys(self, count: int, lane: str = "safety") -> list[bytes]:
        self._alive()
        if lane not in LANES:
            raise HsmError(f"unknown lane {lane!r}")
        out = []
        for _ in range(count):
            kp = cc.generate_keypair(self._next_seed(b"st"), self.scheme)
            self._slots.append(_Slot(kp.public_key, kp.private_key, lane))
            out.append(kp.public_key)
        return self._emit(out)

    def slot_index(self, public_key: bytes) -> int:
        for i, s in enumerate(self._slots):
            if s.public_key == public_key:
                return i
        raise HsmError("no such slot")

    def activate_slot(self, index: int, lifetime: tuple[int, int]) -> None:
        """Make ``index`` the active slot of its lane.

        Monotone policy: the previously active slot and every lower index in the
        same lane are retired and their private keys wiped.
        """
        self._alive()
        if not 0 <= index < len(self._slots):
            raise HsmError("no such slot")
        if index in self.retired:
            raise HsmError("slot retired")
        slot = self._slots[index]
        if self.active.get(slot.lane) == index:
            slot.lifetime = tuple(lifetime)
            return
        for j, other in enumerate(self._slots[:index]):
            if other.lane == slot.lane and j not in self.retired:
                self.retired.add(j)
                other.private_key = None
        prev = self.active.get(slot.lane)
        if prev is not None and prev not in self.retired:
            self.retired.add(prev)
            self._slots[prev].private_key = None
        slot.lifetime = tuple(lifetime)
        self.active[slot.lane] = index

    def active_public_key(self, lane: str = "safety") -> bytes | None:
        idx = self.active.get(lane)
        return None if idx is None else self._slots[idx].public_key

    def hsm_sign(self, selector: str, message: bytes, lane: str = "safety") -> tuple[bytes, float]:
        """Sign ``message ∥ clock``; returns the signature and the clock reading used."""
        self._alive()
        ts = self.clock_ms
        if selector == "long_term":
            key = self._long_term.private_key
        elif selector == "active":
            idx = self.active.get(lane)
            if idx is None:
                raise HsmError("no active pseudonym")
            slot = self._slots[idx]
            start, end = slot.lifetime
            if not start <= ts <= end:
                raise HsmError("pseudonym expired")
            key = slot.private_key
        else:
            raise HsmError(f"unknown selector {selector!r}")
        sig = cc.sign(key, cc.timestamped(message, ts))
        self._emit(sig)
        return sig, ts

    def hsm_decrypt(self, ciphertext: bytes) -> bytes:
        self._alive()
        try:
            return self._emit(cc.decrypt(self._enc, ciphertext))
        except Exception:
            raise HsmError("decryption failed") from None

    # -- clock ---------------------------------------------------------------

    def clock_tick(self, delta_ms: float) -> None:
        if self.killed or delta_ms <= 0:
            return
        self.clock_ms += delta_ms * (1.0 + self.drift_rate)

    # -- device management ---------------------------------------------------

    def tamper(self) -> None:
        """Physical intrusion: wipe everything, no acknowledgement."""
        self._erase()

    def process_command(self, cmd) -> bytes | None:
        """Apply a root-signed command.

        Returns the signed ACK for a kill, the new long-term public key for a
        key update, None otherwise.  A dead device stays silent.
        """
        if self.killed:
            return None
        self._alive()
        if isinstance(cmd, (bytes, bytearray)):
            cmd = HsmCommand.from_bytes(bytes(cmd))
        if cmd.device_id != self.device_id:
            raise HsmError("wrong device")
        if cmd.root_index not in (1, 2):
            raise HsmError("unauthenticated command")
        root = self.root_pub_keys.get(cmd.root_index)
        if root is None:
            raise HsmError("root revoked")
        if not cc.verify(root, cmd.tbs_bytes(), cmd.signature):
            raise HsmError("unauthenticated command")

        kind = cmd.kind
        if kind == CommandKind.KILL:
            body = struct.pack("<Q", self.device_id) + KILL_ACK_TAG + struct.pack("<d", self.clock_ms)
            ack = body + cc.sign(self._long_term.private_key, body)
            self._emit(ack)
            self._erase()
            log.info("hsm %d killed", self.device_id)
            return ack
        if kind in (CommandKind.REVOKE_ROOT_K1, CommandKind.REVOKE_ROOT_K2):
            target = 1 if kind == CommandKind.REVOKE_ROOT_K1 else 2
            other = 3 - target
            if cmd.root_index != target or self.root_pub_keys[other] is None:
                raise HsmError("forbidden")
            self.root_pub_keys[target] = None
            return None
        if kind == CommandKind.LOAD_ROOT:
            if len(cmd.payload) < 2:
                raise HsmError("forbidden")
            index, key = cmd.payload[0], bytes(cmd.payload[1:])
            if index not in (1, 2) or self.root_pub_keys[index] is not None:
                raise HsmError("forbidden")
            if cmd.root_index != 3 - index or key == self.root_pub_keys[3 - index]:
                raise HsmError("forbidden")
            self.root_pub_keys[index] = key
            return None
        if kind == CommandKind.UPDATE_LONG_TERM_KEY:
            seed = hashlib.sha256(self._long_term.private_key + cmd.payload).digest()
            self._set_long_term(cc.generate_keypair(seed, self.scheme))
            return self._emit(self._long_term.public_key)
        if kind == CommandKind.CLOCK_SYNC:
            if len(cmd.payload) != 8:
                raise HsmError("forbidden")
            target = struct.unpack("<d", cmd.payload)[0]
            if target > self.clock_ms:
                self.clock_ms = target
            return None
        raise HsmError("unauthenticated command")

    def state_signature(self) -> tuple:
        """Hashable summary of the security-relevant state (used for model checking)."""
        return (
            self.killed,
            tuple(sorted((k, v) for k, v in self.root_pub_keys.items())),
            tuple(sorted(self.active.items())),
            frozenset(self.retired),
            self._long_term.public_key if self._long_term else None,
        )
