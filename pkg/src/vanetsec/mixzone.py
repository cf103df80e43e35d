"""Location privacy analytics for mix zones.

An observer sees pseudonyms enter and leave a zone and must guess which
entering pseudonym became which exiting one.  Uncertainty is measured as the
Shannon entropy of the posterior over complete matchings (bijections).
"""

from __future__ import annotations

import hashlib
import itertools
import math
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from shapely.geometry import Point, Polygon

from . import crypto_core as cc

EXACT_LIMIT = 10
DEFAULT_BIN_MS = 100
DEFAULT_LEAK = 0.05
DEFAULT_MC_SAMPLES = 20_000
INDEPENDENCE_CAVEAT = "journey entropy sums per-zone entropies assuming zones are independent"
_TOL = 1e-9
_CHUNK = 200_000


@dataclass(frozen=True)
class Port:
    name: str
    x: float
    y: float


@dataclass(frozen=True)
class TraverseDistribution:
    """Discrete traverse-time prior: ``probs[b]`` is the mass of durations in
    ``(b*bin_ms, (b+1)*bin_ms]``, with bin 0 also covering tiny positive durations."""

    probs: tuple[float, ...]
    bin_ms: int = DEFAULT_BIN_MS

    def __post_init__(self):
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > _TOL:
            raise ValueError("traverse distribution must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, max_ms: float, bin_ms: int = DEFAULT_BIN_MS) -> "TraverseDistribution":
        n = max(1, math.ceil(max_ms / bin_ms))
        return cls(tuple([1.0 / n] * n), bin_ms)

    def pmf(self, duration_ms: float) -> float:
        if duration_ms <= 0:
            return 0.0
        b = max(0, math.ceil(duration_ms / self.bin_ms) - 1)
        return self.probs[b] if b < len(self.probs) else 0.0


@dataclass
class MixZone:
    zone_id: str
    geometry: Polygon
    ports: list[Port]
    transition: np.ndarray
    traverse: dict[tuple[int, int], TraverseDistribution] | TraverseDistribution
    kind: str = "unmonitored"
    leak_probability: float = DEFAULT_LEAK

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        n = len(self.ports)
        if self.transition.shape != (n, n):
            raise ValueError("transition prior must be square over the ports")
        if (self.transition < 0).any() or np.abs(self.transition.sum(axis=1) - 1).max(initial=0) > _TOL:
            raise ValueError("transition prior rows must be nonnegative and sum to 1")
        if self.kind not in ("unmonitored", "cryptographic"):
            raise ValueError(f"unknown zone kind {self.kind!r}")
        self._port_index = {p.name: i for i, p in enumerate(self.ports)}

    @classmethod
    def symmetric(cls, zone_id: str, n_ports: int = 4, size_m: float = 100.0,
                  max_traverse_ms: float = 10_000.0, kind: str = "unmonitored",
                  center=(0.0, 0.0), leak_probability: float = DEFAULT_LEAK) -> "MixZone":
        """Square zone, ports evenly spread on its boundary, uniform priors."""
        cx, cy = center
        h = size_m / 2
        poly = Polygon([(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)])
        ring = poly.exterior
        ports = [Port(f"p{i}", *ring.interpolate((i + 0.5) / n_ports, normalized=True).coords[0])
                 for i in range(n_ports)]
        return cls(zone_id, poly, ports, np.full((n_ports, n_ports), 1.0 / n_ports),
                   TraverseDistribution.uniform(max_traverse_ms), kind, leak_probability)

    def port_index(self, port) -> int:
        if isinstance(port, int):
            return port
        return self._port_index[port]

    def traverse_prior(self, i: int, j: int) -> TraverseDistribution | None:
        if isinstance(self.traverse, TraverseDistribution):
            return self.traverse
        return self.traverse.get((i, j))

    def contains(self, position) -> bool:
        return self.geometry.covers(Point(position))

    def nearest_port(self, position) -> str:
        return min(self.ports, key=lambda p: math.hypot(p.x - position[0], p.y - position[1])).name

    def pair_weight(self, port_in, t_in: float, port_out, t_out: float) -> float:
        i, j = self.port_index(port_in), self.port_index(port_out)
        prior = self.traverse_prior(i, j)
        if prior is None:
            return 0.0
        return float(self.transition[i, j]) * prior.pmf(t_out - t_in)

    def to_dict(self) -> dict:
        if isinstance(self.traverse, TraverseDistribution):
            traverse = {"*": list(self.traverse.probs)}
            bin_ms = self.traverse.bin_ms
        else:
            traverse = {f"{i},{j}": list(d.probs) for (i, j), d in self.traverse.items()}
            bin_ms = next(iter(self.traverse.values())).bin_ms if self.traverse else DEFAULT_BIN_MS
        return {
            "zone_id": self.zone_id,
            "geometry": [list(c) for c in self.geometry.exterior.coords[:-1]],
            "ports": [{"name": p.name, "x": p.x, "y": p.y} for p in self.ports],
            "transition": self.transition.tolist(),
            "traverse": traverse,
            "bin_ms": bin_ms,
            "kind": self.kind,
            "leak_probability": self.leak_probability,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixZone":
        if "max_traverse_ms" in d and "transition" not in d:
            return cls.symmetric(d["zone_id"], d.get("n_ports", 4), d.get("size_m", 100.0),
                                 d["max_traverse_ms"], d.get("kind", "unmonitored"),
                                 tuple(d.get("center", (0.0, 0.0))), d.get("leak_probability", DEFAULT_LEAK))
        bin_ms = d.get("bin_ms", DEFAULT_BIN_MS)
        tr = d["traverse"]
        if set(tr) == {"*"}:
            traverse = TraverseDistribution(tuple(tr["*"]), bin_ms)
        else:
            traverse = {tuple(int(x) for x in k.split(",")): TraverseDistribution(tuple(v), bin_ms)
                        for k, v in tr.items()}
        return cls(d["zone_id"], Polygon(d["geometry"]),
                   [Port(p["name"], p["x"], p["y"]) for p in d["ports"]],
                   np.array(d["transition"]), traverse, d.get("kind", "unmonitored"),
                   d.get("leak_probability", DEFAULT_LEAK))


@dataclass(frozen=True)
class MixEvent:
    direction: str  # "enter" | "exit"
    fingerprint: bytes
    port: str
    time_ms: float

    def __post_init__(self):
        if self.direction not in ("enter", "exit"):
            raise ValueError("direction must be enter or exit")


VIRTUAL = b""  # fingerprint of padding events


@dataclass
class MatchingDistribution:
    """Posterior over bijections.  Row ``s`` of ``matchings`` maps entering
    vehicle ``i`` to exit ``matchings[s, i]``."""

    enters: list[MixEvent]
    exits: list[MixEvent]
    matchings: np.ndarray
    probabilities: np.ndarray
    method: str = "exact"
    samples: int = 0
    entropy_estimate: float | None = None
    entropy_ci: tuple[float, float] | None = None
    bin_ms: int = DEFAULT_BIN_MS

    @property
    def n(self) -> int:
        return len(self.enters)

    @property
    def entropy_bits(self) -> float:
        return tracking_entropy(self)

    def marginal(self) -> np.ndarray:
        """P(enter i leaves as exit j)."""
        n = self.n
        out = np.zeros((n, n))
        for i in range(n):
            out[i] = np.bincount(self.matchings[:, i], weights=self.probabilities, minlength=n)
        return out

    def marginal_entropies(self) -> list[float]:
        return [_entropy(row) for row in self.marginal()]

    def as_mappings(self) -> list[tuple[dict[bytes, bytes], float]]:
        out = []
        for row, p in zip(self.matchings, self.probabilities):
            out.append(({self.enters[i].fingerprint: self.exits[j].fingerprint for i, j in enumerate(row)}, float(p)))
        return out


def _entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return max(0.0, float(-(p * np.log2(p)).sum())) if p.size else 0.0


def _pad(enters: list[MixEvent], exits: list[MixEvent]):
    gap = len(enters) - len(exits)
    if gap > 0:
        exits = exits + [MixEvent("exit", VIRTUAL, "", math.inf)] * gap
    elif gap < 0:
        enters = enters + [MixEvent("enter", VIRTUAL, "", -math.inf)] * -gap
    return enters, exits


def weight_matrix(enters: Sequence[MixEvent], exits: Sequence[MixEvent], zone: MixZone) -> np.ndarray:
    n = len(enters)
    w = np.zeros((n, n))
    for i, a in enumerate(enters):
        for j, b in enumerate(exits):
            if a.fingerprint == VIRTUAL and b.fingerprint == VIRTUAL:
                continue
            if a.fingerprint == VIRTUAL or b.fingerprint == VIRTUAL:
                w[i, j] = zone.leak_probability
            else:
                w[i, j] = zone.pair_weight(a.port, a.time_ms, b.port, b.time_ms)
    return w


def enumerate_matchings(enter_events: Iterable[MixEvent], exit_events: Iterable[MixEvent], zone: MixZone,
                        mc_samples: int = DEFAULT_MC_SAMPLES, rng: random.Random | None = None,
                        exact_limit: int = EXACT_LIMIT) -> MatchingDistribution:
    """Posterior over matchings; exact up to ``exact_limit`` vehicles, sampled beyond."""
    enters, exits = _pad(list(enter_events), list(exit_events))
    n = len(enters)
    bin_ms = getattr(zone.traverse, "bin_ms", DEFAULT_BIN_MS)
    if n == 0:
        return MatchingDistribution([], [], np.zeros((1, 0), dtype=np.int16), np.ones(1), bin_ms=bin_ms)
    w = weight_matrix(enters, exits, zone)
    if n > exact_limit:
        return _sample_matchings(enters, exits, w, mc_samples, rng or random.Random(0), bin_ms)
    rows, probs = [], []
    for chunk in _chunks(itertools.permutations(range(n)), _CHUNK):
        perms = np.array(chunk, dtype=np.int16)
        weights = w[np.arange(n), perms].prod(axis=1)
        keep = weights > 0
        rows.append(perms[keep])
        probs.append(weights[keep])
    matchings = np.concatenate(rows)
    weights = np.concatenate(probs)
    total = weights.sum()
    if total <= 0:
        raise ValueError("no feasible matching")
    return MatchingDistribution(enters, exits, matchings, weights / total, "exact", bin_ms=bin_ms)


def _chunks(it, size):
    while True:
        block = list(itertools.islice(it, size))
        if not block:
            return
        yield block


def _sample_matchings(enters, exits, w, samples, rng, bin_ms, bootstrap: int = 200):
    """Sequential importance sampling of bijections.

    Row i picks among unused exits proportionally to ``w``; the importance
    weight of a draw is the product of the row masses it chose from.  Entropy
    is ``log2 Z - E_p[log2 W]`` with both terms estimated from the draws.
    """
    n = len(enters)
    perms = np.empty((samples, n), dtype=np.int16)
    log_iw = np.full(samples, -np.inf)
    log_w = np.zeros(samples)
    for s in range(samples):
        free = list(range(n))
        lw = liw = 0.0
        ok = True
        for i in range(n):
            cand = [w[i, j] for j in free]
            mass = sum(cand)
            if mass <= 0:
                ok = False
                break
            r = rng.random() * mass
            k = 0
            while k < len(cand) - 1 and r >= cand[k]:
                r -= cand[k]
                k += 1
            j = free.pop(k)
            perms[s, i] = j
            lw += math.log2(w[i, j])
            liw += math.log2(mass)
        if ok:
            log_w[s], log_iw[s] = lw, liw
    valid = np.isfinite(log_iw)
    if not valid.any():
        raise ValueError("no feasible matching")
    perms, log_iw, log_w = perms[valid], log_iw[valid], log_w[valid]

    def estimate(idx):
        li = log_iw[idx]
        m = li.max()
        iw = np.exp2(li - m)
        log_z = m + math.log2(iw.mean())
        return float(log_z - (iw * log_w[idx]).sum() / iw.sum()), iw

    h, iw = estimate(np.arange(len(perms)))
    boot_rng = np.random.default_rng(rng.getrandbits(32))
    boots = sorted(estimate(boot_rng.integers(0, len(perms), len(perms)))[0] for _ in range(bootstrap))
    ci = (float(boots[int(0.025 * bootstrap)]), float(boots[int(0.975 * bootstrap) - 1]))
    uniq, inverse = np.unique(perms, axis=0, return_inverse=True)
    probs = np.bincount(inverse.reshape(-1), weights=iw)
    return MatchingDistribution(enters, exits, uniq, probs / probs.sum(), "mc", samples,
                                h, ci, bin_ms=bin_ms)


def tracking_entropy(distribution: MatchingDistribution) -> float:
    """Shannon entropy in bits over complete matchings."""
    if distribution.method == "mc" and distribution.entropy_estimate is not None:
        return distribution.entropy_estimate
    return _entropy(distribution.probabilities)


def _guess_key(dist: MatchingDistribution, row) -> tuple:
    return tuple(dist.exits[j].fingerprint for j in row)


def best_guess(dist: MatchingDistribution) -> tuple[np.ndarray, float]:
    """Maximum-probability matching; ties go to the lexicographically
    smallest tuple of exit fingerprints (in entering order)."""
    p = dist.probabilities
    top = p.max()
    tied = np.nonzero(p >= top * (1 - 1e-12))[0]
    idx = min(tied, key=lambda s: _guess_key(dist, dist.matchings[s]))
    return dist.matchings[idx], float(p[idx])


def adversary_best_guess_success(distribution: MatchingDistribution, ground_truth) -> tuple[float, bool]:
    """``ground_truth`` is a sequence of exit indices or a dict enter fp → exit fp."""
    row, mass = best_guess(distribution)
    if isinstance(ground_truth, dict):
        guess = {distribution.enters[i].fingerprint: distribution.exits[j].fingerprint
                 for i, j in enumerate(row) if distribution.enters[i].fingerprint != VIRTUAL}
        truth = {k: v for k, v in ground_truth.items() if k != VIRTUAL}
        return mass, guess == truth
    return mass, tuple(int(j) for j in row) == tuple(ground_truth)


# -- cryptographic mix zones --------------------------------------------------------


class ZoneKeyServer:
    """RSU side of a cryptographic mix zone: hands the zone key to entrants
    holding a valid pseudonym."""

    def __init__(self, zone: MixZone, seed=None):
        if zone.kind != "cryptographic":
            raise ValueError("zone is not cryptographic")
        self.zone = zone
        self.key = hashlib.sha256(cc._seed_bytes(("zone-key", zone.zone_id, seed))).digest()

    def grant(self, credential, trusted_keys: dict[str, bytes], now: float) -> bytes | None:
        key = trusted_keys.get(credential.ca_id)
        if key is None or not cc.verify_certificate(credential, key, now):
            return None
        return self.key


def seal_zone_frame(zone_key: bytes, wire: bytes, nonce: bytes | None = None) -> bytes:
    nonce = nonce if nonce is not None else os.urandom(12)
    return b"Z" + nonce + AESGCM(zone_key).encrypt(nonce, wire, b"mixzone")


def open_zone_frame(zone_key: bytes | None, frame: bytes) -> bytes | None:
    if zone_key is None or not frame.startswith(b"Z") or len(frame) < 13:
        return None
    try:
        return AESGCM(zone_key).decrypt(frame[1:13], frame[13:], b"mixzone")
    except Exception:
        return None


@dataclass
class ObserverView:
    events: list[MixEvent]
    visible_inside: int
    opaque_inside: int
    visible_outside: int


def cryptographic_mixzone_filter(frames, zone: MixZone, boundary_m: float = 50.0) -> ObserverView:
    """What an eavesdropper learns from ``frames`` = [(time_ms, position, wire bytes)].

    Frames it cannot parse as signed messages stay opaque.  From the readable
    ones it reconstructs boundary observations: a pseudonym whose track ends
    near the zone entered it; one whose track starts near the zone exited it.
    """
    tracks: dict[bytes, list[tuple[float, tuple[float, float]]]] = {}
    visible_inside = opaque_inside = visible_outside = 0
    for t, pos, wire in frames:
        inside = zone.contains(pos)
        try:
            msg = cc.SignedMessage.from_bytes(wire)
        except Exception:
            opaque_inside += inside
            continue
        if inside:
            visible_inside += 1
        else:
            visible_outside += 1
        tracks.setdefault(cc.fingerprint(msg.credential), []).append((t, msg.geo_stamp.position))
    events = []
    for fp, pts in tracks.items():
        pts.sort()
        first, last = pts[0], pts[-1]
        if zone.geometry.distance(Point(last[1])) <= boundary_m and not zone.contains(last[1]):
            events.append(MixEvent("enter", fp, zone.nearest_port(last[1]), last[0]))
        if zone.geometry.distance(Point(first[1])) <= boundary_m and not zone.contains(first[1]):
            events.append(MixEvent("exit", fp, zone.nearest_port(first[1]), first[0]))
    events.sort(key=lambda e: (e.time_ms, e.direction, e.fingerprint))
    return ObserverView(events, visible_inside, opaque_inside, visible_outside)


# -- policy evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class ZoneVisit:
    zone_id: str
    enter_ms: float
    exit_ms: float
    enter_port: str
    exit_port: str


@dataclass
class JourneyTrace:
    vehicle_id: str
    start_ms: float
    end_ms: float
    visits: list[ZoneVisit] = field(default_factory=list)
    change_phase_ms: float = 0.0


POLICIES = ("change-every-tau", "change-in-zone", "combined")


@dataclass
class PolicyReport:
    policy: str
    per_vehicle: dict[str, float]
    per_vehicle_marginal: dict[str, float]
    caveat: str = INDEPENDENCE_CAVEAT

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_vehicle.values()))) if self.per_vehicle else 0.0

    @property
    def minimum(self) -> float:
        return min(self.per_vehicle.values(), default=0.0)


def _changes_in(visit: ZoneVisit, trace: JourneyTrace, policy: str, tau_ms: float) -> bool:
    if policy in ("change-in-zone", "combined"):
        return True
    first = trace.start_ms + trace.change_phase_ms
    k = math.ceil((visit.enter_ms - first) / tau_ms)
    return first + k * tau_ms <= visit.exit_ms


def _fp(*parts) -> bytes:
    return cc.hash16(*(str(p).encode() for p in parts))


def policy_eval(policy: str, traces: Sequence[JourneyTrace], zones: dict[str, MixZone],
                tau_ms: float = 60_000.0, rng: random.Random | None = None) -> PolicyReport:
    """Cumulative per-vehicle entropy under a pseudonym-change policy.

    Only vehicles that change pseudonym while inside a zone mix; within a zone
    those whose visits overlap in time form one anonymity batch.  Changes
    outside zones are seen by a continuous observer and contribute nothing.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    by_zone: dict[str, list[tuple[JourneyTrace, ZoneVisit]]] = {}
    for tr in traces:
        for v in tr.visits:
            if _changes_in(v, tr, policy, tau_ms):
                by_zone.setdefault(v.zone_id, []).append((tr, v))
    total = {tr.vehicle_id: 0.0 for tr in traces}
    marginal = dict(total)
    for zone_id, visits in sorted(by_zone.items()):
        zone = zones[zone_id]
        visits.sort(key=lambda tv: (tv[1].enter_ms, tv[0].vehicle_id))
        batch, horizon = [], -math.inf
        for tv in visits + [None]:
            if tv is None or (batch and tv[1].enter_ms > horizon):
                enters = [MixEvent("enter", _fp("in", t.vehicle_id, v.enter_ms), v.enter_port, v.enter_ms)
                          for t, v in batch]
                exits = [MixEvent("exit", _fp("out", t.vehicle_id, v.exit_ms), v.exit_port, v.exit_ms)
                         for t, v in batch]
                dist = enumerate_matchings(enters, exits, zone, rng=rng)
                h = tracking_entropy(dist)
                for (t, _), hm in zip(batch, dist.marginal_entropies()):
                    total[t.vehicle_id] += h
                    marginal[t.vehicle_id] += hm
                batch, horizon = [], -math.inf
            if tv is not None:
                batch.append(tv)
                horizon = max(horizon, tv[1].exit_ms)
    return PolicyReport(policy, total, marginal)


# -- event logs and reports -----------------------------------------------------------


def parse_event_log(text: str) -> dict[str, list[MixEvent]]:
    """``zone_id,direction,fingerprint_hex,port,time_ms`` per line; '#' comments."""
    out: dict[str, list[MixEvent]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        zone_id, direction, fp_hex, port, t = parts
        try:
            out.setdefault(zone_id, []).append(MixEvent(direction, bytes.fromhex(fp_hex), port, float(t)))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


@dataclass(frozen=True)
class ZoneReport:
    zone_id: str
    n: int
    entropy_bits: float
    best_guess_mass: float
    method: str
    samples: int
    marginal_entropy_bits: float
    bin_ms: int

    def to_line(self) -> str:
        return (f"zone_id={self.zone_id} n={self.n} entropy_bits={self.entropy_bits:.6f} "
                f"best_guess_mass={self.best_guess_mass:.6f} method={self.method} samples={self.samples} "
                f"marginal_entropy_bits={self.marginal_entropy_bits:.6f} bin_ms={self.bin_ms}")


def zone_report(zone: MixZone, events: Sequence[MixEvent], rng: random.Random | None = None) -> ZoneReport:
    enters = sorted((e for e in events if e.direction == "enter"), key=lambda e: (e.time_ms, e.fingerprint))
    exits = sorted((e for e in events if e.direction == "exit"), key=lambda e: (e.time_ms, e.fingerprint))
    dist = enumerate_matchings(enters, exits, zone, rng=rng)
    _, mass = best_guess(dist)
    marg = dist.marginal_entropies()
    return ZoneReport(zone.zone_id, dist.n, tracking_entropy(dist), mass, dist.method, dist.samples,
                      float(np.mean(marg)) if marg else 0.0, dist.bin_ms)
