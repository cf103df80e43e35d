"""On-board pseudonym pool (public halves only; private keys stay in the HSM)."""

from __future__ import annotations

from dataclasses import dataclass

from ..authority import PseudonymSet
from ..crypto_core import Pseudonym, fingerprint


@dataclass
class PseudonymPool:
    current_set: PseudonymSet | None = None
    next_set: PseudonymSet | None = None
    active_index: int | None = None
    last_change_ms: float | None = None

    @property
    def empty(self) -> bool:
        return self.current_set is None or not self.current_set.pseudonyms

    @property
    def active(self) -> Pseudonym | None:
        if self.current_set is None or self.active_index is None:
            return None
        return self.current_set.pseudonyms[self.active_index]

    @property
    def active_fingerprint(self) -> bytes | None:
        p = self.active
        return None if p is None else fingerprint(p)

    def install(self, pset: PseudonymSet, replace: bool = False) -> None:
        """Queue ``pset`` as the next set, or make it current right away."""
        if replace or self.current_set is None:
            self.current_set, self.next_set, self.active_index = pset, None, None
        else:
            self.next_set = pset

    def next_valid(self, now: float) -> tuple[bool, int] | None:
        """(from_next_set, index) of the first unused pseudonym valid at ``now``."""
        if self.current_set is not None:
            first = 0 if self.active_index is None else self.active_index + 1
            for j in range(first, len(self.current_set.pseudonyms)):
                p = self.current_set.pseudonyms[j]
                if p.start <= now <= p.end:
                    return False, j
        if self.next_set is not None:
            for j, p in enumerate(self.next_set.pseudonyms):
                if p.start <= now <= p.end:
                    return True, j
        return None

    def promote(self) -> None:
        self.current_set, self.next_set, self.active_index = self.next_set, None, None

    def remaining_fraction(self, now: float) -> float:
        if self.empty:
            return 0.0
        s = self.current_set
        span = s.end - s.start
        return max(0.0, (s.end - now) / span) if span > 0 else 0.0
