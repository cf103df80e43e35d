"""LEAVE: local eviction by a quorum of evaluating neighbors."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping

from ..authority import EvictionEvent


def mds_leave_round(accusations: Mapping[bytes, Iterable[bytes]], quorum: int = 3,
                    now: float = 0.0) -> list[EvictionEvent]:
    """Tally one voting round.

    ``accusations`` maps each evaluator's pseudonym fingerprint to the
    neighbor fingerprints its MDS currently flags.  A target accused by at
    least ``quorum`` distinct evaluators (self-accusation ignored) yields one
    eviction event; otherwise nothing happens.
    """
    votes: dict[bytes, set[bytes]] = defaultdict(set)
    for evaluator, targets in accusations.items():
        for t in targets:
            if t != evaluator:
                votes[t].add(evaluator)
    return [EvictionEvent(t, tuple(sorted(ev)), now)
            for t, ev in sorted(votes.items()) if len(ev) >= max(1, quorum)]
