"""HSM revocation transport: kill via RSU, ACK timeout, RDS fallback."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..hsm import parse_kill_ack

RDS_LATENCY_MS = 1000.0
RDS_CAPACITY_BPS = 1187.5


class KillState(str, Enum):
    SENT_VIA_RSU = "sent_via_rsu"
    AWAITING_ACK = "awaiting_ack"
    ACK_RECEIVED = "ack_received"
    RDS_FALLBACK = "rds_fallback"
    FAILED = "failed"


TERMINAL = {KillState.ACK_RECEIVED, KillState.FAILED}


@dataclass
class KillSession:
    target_device_id: int
    command: bytes
    long_term_public_key: bytes
    timeout_ms: float = 10_000.0
    rds_repeat_limit: int = 3
    state: KillState | None = None
    deadline: float = float("inf")
    rds_sent: int = 0
    started_at: float | None = None
    acked_at: float | None = None
    history: list[tuple[float, KillState]] = field(default_factory=list)

    def _enter(self, state: KillState, now: float):
        self.state = state
        self.history.append((now, state))

    def start(self, now: float, rsu_id) -> list[tuple]:
        """Dispatch the command through ``rsu_id`` and arm the ACK timer."""
        self.started_at = now
        self._enter(KillState.SENT_VIA_RSU, now)
        self._enter(KillState.AWAITING_ACK, now)
        self.deadline = now + self.timeout_ms
        return [("send_rsu", rsu_id, self.command)]

    def on_ack(self, ack: bytes, now: float) -> bool:
        if self.state not in (KillState.AWAITING_ACK, KillState.RDS_FALLBACK):
            return False
        parsed = parse_kill_ack(ack, self.long_term_public_key)
        if parsed is None or parsed[0] != self.target_device_id:
            return False  # forged or foreign ACK: timer keeps running
        self.acked_at = now
        self._enter(KillState.ACK_RECEIVED, now)
        self.deadline = float("inf")
        return True

    def on_tick(self, now: float) -> list[tuple]:
        if self.state in TERMINAL or self.state is None or now < self.deadline:
            return []
        if self.state == KillState.AWAITING_ACK or self.rds_sent < self.rds_repeat_limit:
            if self.state != KillState.RDS_FALLBACK:
                self._enter(KillState.RDS_FALLBACK, now)
            self.rds_sent += 1
            self.deadline = now + self.timeout_ms
            return [("broadcast_rds", self.command)]
        self._enter(KillState.FAILED, now)
        self.deadline = float("inf")
        return []


def rhsm_run(session: KillSession, now: float, events) -> list[tuple]:
    """Feed ``events`` (("start", rsu_id) | ("ack", bytes) | ("tick",)) to a session.

    Returns the transport actions the CA must perform.
    """
    actions = []
    for ev in events:
        if ev[0] == "start":
            actions += session.start(now, ev[1])
        elif ev[0] == "ack":
            session.on_ack(ev[1], now)
        elif ev[0] == "tick":
            actions += session.on_tick(now)
        else:
            raise ValueError(f"unknown event {ev[0]!r}")
    return actions


class RdsChannel:
    """Region-wide lossless broadcast: fixed latency plus serialisation at RDS capacity."""

    def __init__(self, latency_ms: float = RDS_LATENCY_MS, capacity_bps: float = RDS_CAPACITY_BPS):
        self.latency_ms = latency_ms
        self.capacity_bps = capacity_bps
        self.busy_until = 0.0

    def transmit(self, now: float, nbytes: int) -> float:
        """Queue ``nbytes``; returns the delivery time."""
        start = max(now, self.busy_until)
        self.busy_until = start + nbytes * 8 / self.capacity_bps * 1000.0
        return self.busy_until + self.latency_ms
