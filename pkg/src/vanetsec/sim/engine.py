"""Deterministic discrete-event simulator.

Events are ordered by (time, insertion counter).  Every random draw comes
from a stream derived from the scenario seed, and no output depends on set
or hash ordering, so a scenario and seed fully determine the trace.

Single-hop receptions are processed inside the emitting event at their exact
arrival time (emission + distance / c); only multi-hop and timer-driven
actions are queued.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from collections import Counter
from dataclasses import dataclass, field

from .. import crypto_core as cc
from ..authority import CertificationAuthority
from ..errors import AuthorityError, HsmError, InvariantViolation, NodeError
from ..hsm import CommandKind
from ..mixzone import (
    MixZone,
    ZoneKeyServer,
    adversary_best_guess_success,
    cryptographic_mixzone_filter,
    enumerate_matchings,
    open_zone_frame,
    seal_zone_frame,
    tracking_entropy,
)
from ..node import Disc, Node, NodeParams, Rect, mds_leave_round
from ..node.beacon import C_M_PER_MS
from ..revocation import KillSession, RdsChannel, RsuBroadcaster, encode_crl_pieces, v2v_crl_relay
from ..revocation.erasure import data_piece_count
from .scenario import Scenario
from .world import Frame, Jammer, Radio, Route, StaticRoute, in_rect

NODE_KINDS = ("vehicle", "forger", "flooder", "colluder")


@dataclass
class Actor:
    actor_id: str
    kind: str
    route: Route
    node: Node | None = None
    listens: tuple[str, ...] = ()
    clock_offset_ms: float = 0.0
    bounds: tuple | None = None  # physical presence limit for adversaries
    config: dict = field(default_factory=dict)
    alive: bool = True
    last_refill_try: float = -math.inf
    pending_ack: bytes | None = None
    drop_next_ack: bool = False
    ack_retries: int = 0
    zone_keys: dict = field(default_factory=dict)
    inside_zones: set = field(default_factory=set)
    fp_history: list = field(default_factory=list)
    crl_done_ms: float | None = None
    jump_sign: int = 1
    replays: int = 0

    def local(self, t: float) -> float:
        return t + self.clock_offset_ms

    def position(self, t: float):
        return self.route.state(t)[0]

    def active(self, t: float) -> bool:
        return self.alive and self.route.active(t)


@dataclass
class SimResult:
    trace: list[str]
    metrics: dict

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)

    def metrics_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in sorted(self.metrics.items()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v) or math.isnan(v):
            return str(v)
        return f"{v:.6f}"
    return str(v)


def _stream(seed: int, label: str) -> random.Random:
    return random.Random(cc._seed_bytes(("sim", seed, label)))


def _region(spec: dict):
    if "rect" in spec:
        return Rect(*spec["rect"])
    return Disc(*spec["disc"])


class Simulator:
    def __init__(self, scenario: Scenario, record_wire: bool = False):
        self.scenario = s = scenario
        self.seed = s.seed
        self.duration = s.duration_ms
        self.queue: list = []
        self._counter = itertools.count()
        self.now = 0.0
        self.trace: list[str] = []
        self.metrics: Counter = Counter()
        self.values: dict = {}
        self.record_wire = record_wire
        self.wire_log: list[tuple[str, str, bytes]] = []  # (actor, kind, bytes) when recording
        self.rng_mob = _stream(self.seed, "mobility")
        self.rng_adv = _stream(self.seed, "adversary")
        self.rng_crl = _stream(self.seed, "crl")
        self.rng_zone = _stream(self.seed, "zone")
        radio = s["radio"]
        self.radio = Radio(radio.get("range_m", 1000.0), radio.get("loss", 0.0), _stream(self.seed, "radio"))
        node_cfg = dict(s["node"])
        node_cfg.setdefault("range_m", self.radio.range_m)
        self.node_params = NodeParams(**node_cfg)
        self.ca_cfg = s["ca"]
        self.crl_cfg = s["crl"]
        self.trace_cfg = s["trace"]
        self.rds = RdsChannel()
        self.actors: dict[str, Actor] = {}
        self._device_ids = itertools.count(1)
        self._fp_owner: dict[bytes, str] = {}
        self.observations: list[tuple[float, tuple, bytes]] = []
        self.kill_sessions: list[tuple[Actor, KillSession]] = []
        self.geocasts: list[dict] = []
        self.flood_rx: dict[str, list[float]] = {}
        self._setup()

    # -- infrastructure ---------------------------------------------------------

    def at(self, t: float, fn, *args) -> None:
        if t < self.now:
            raise InvariantViolation(f"event scheduled in the past ({t} < {self.now})")
        heapq.heappush(self.queue, (t, next(self._counter), fn, args))

    def log(self, t: float, actor: str, kind: str, details: str = "") -> None:
        self.trace.append(f"{t:.6f},{actor},{kind},{details}")

    def ca_at(self, pos) -> CertificationAuthority:
        for r in self.scenario["regions"]:
            if in_rect(pos, r["bounds"]):
                return self.cas[r["ca_id"]]
        return self.cas[self.scenario["regions"][0]["ca_id"]]

    def _check_bounds(self, actor: Actor, pos) -> None:
        if actor.bounds is not None and not in_rect(pos, actor.bounds):
            raise InvariantViolation(f"{actor.actor_id} acted outside its region")

    def _new_node(self, actor_id: str, role: str, home: CertificationAuthority) -> Node:
        node = Node.provision(actor_id, role, home, next(self._device_ids), now=0.0,
                              seed=("scenario", self.seed), params=self.node_params,
                              trusted_keys={c.ca_id: c.public_key for c in self.cas.values()})
        return node

    def _add(self, actor: Actor) -> Actor:
        if actor.actor_id in self.actors:
            raise InvariantViolation(f"duplicate actor id {actor.actor_id}")
        self.actors[actor.actor_id] = actor
        return actor

    # -- setup ----------------------------------------------------------------------

    def _setup(self) -> None:
        s = self.scenario
        self.cas = {}
        for r in s["regions"]:
            ca_id = r["ca_id"]
            self.cas[ca_id] = CertificationAuthority(
                ca_id, seed=("scenario", self.seed, ca_id), scheme=s["scheme"],
                tau_ms=self.ca_cfg["tau_ms"], eviction_threshold=self.ca_cfg["eviction_threshold"],
                leave_quorum=self.ca_cfg["leave_quorum"])
        if s["cross_certify"]:
            for a, b in itertools.combinations(sorted(self.cas), 2):
                self.cas[a].cross_certify(self.cas[b])
        self.zones = [MixZone.symmetric(z["zone_id"], z.get("n_ports", 4), z["size_m"],
                                        z.get("max_traverse_ms", 60_000.0), z.get("kind", "unmonitored"),
                                        tuple(z["center"]), z.get("leak_probability", 0.05))
                      for z in s["mix_zones"]]
        self.zone_boundary = {z["zone_id"]: z.get("boundary_m", 50.0) for z in s["mix_zones"]}
        self.zone_servers = {z.zone_id: ZoneKeyServer(z, seed=self.seed)
                             for z in self.zones if z.kind == "cryptographic"}
        self._setup_rsus()
        self._setup_vehicles()
        self._setup_adversaries()
        self._setup_crl()
        for g in s["geocasts"]:
            self.at(g["at_ms"], self._geocast_originate, g)
        for k in s["kills"]:
            self.at(k["at_ms"], self._kill_start, k)
        if any(a.kind in NODE_KINDS for a in self.actors.values()):
            period = self.ca_cfg["leave_period_ms"]
            self.at(period, self._leave_round)

    def _setup_rsus(self) -> None:
        s = self.scenario
        specs = list(s["rsus"])
        line = s.get("rsu_line")
        if line:
            (x0, y0), (x1, y1) = line["from"], line["to"]
            length = math.dist((x0, y0), (x1, y1))
            n = int(math.floor(length / line["spacing_m"] + 1e-9)) + 1
            for i in range(n):
                f = 0.0 if length == 0 else min(1.0, i * line["spacing_m"] / length)
                specs.append({"id": f"{line.get('prefix', 'rsu')}{i}",
                              "position": [x0 + f * (x1 - x0), y0 + f * (y1 - y0)]})
        for i, spec in enumerate(specs):
            rid = spec.get("id", f"rsu{i}")
            pos = tuple(spec["position"])
            home = self.cas[spec["home"]] if "home" in spec else self.ca_at(pos)
            node = self._new_node(rid, spec.get("role", "rsu"), home)
            node.position = pos
            self._add(Actor(rid, "rsu", StaticRoute(pos), node))

    def _setup_vehicles(self) -> None:
        s = self.scenario
        err_ms = s["radio"].get("clock_error_us", 0.0) / 1000.0
        for gi, g in enumerate(s["vehicles"]):
            points = g["route"] if "route" in g else s["roads"][g.get("road", 0)]
            prefix = g.get("id_prefix", f"v{gi}_" if len(s["vehicles"]) > 1 else "v")
            for k in range(g.get("count", 1)):
                speed = g.get("speed_mps", 13.9)
                if isinstance(speed, list):
                    speed = self.rng_mob.uniform(*speed)
                spawn = g.get("spawn_ms", 0.0) + k * g.get("spawn_interval_ms", 0.0)
                route = Route(points, speed, spawn, k * g.get("spacing_m", 0.0))
                home = self.cas[g["home"]] if "home" in g else self.ca_at(route.points[0])
                aid = f"{prefix}{k}"
                node = self._new_node(aid, g.get("role", "private-vehicle"), home)
                offset = g.get("clock_offset_ms", self.rng_mob.uniform(0.0, err_ms) if err_ms else 0.0)
                actor = self._add(Actor(aid, "vehicle", route, node,
                                        ("beacon", "zone", "crl_piece", "geocast", "hsm_command"), offset))
                self.at(spawn, self._spawn, actor)

    def _setup_adversaries(self) -> None:
        for i, cfg in enumerate(self.scenario["adversaries"]):
            kind = cfg["kind"]
            aid = cfg.get("id", f"{kind}{i}")
            if kind == "passive_observer":
                self._add(Actor(aid, "observer", StaticRoute((0.0, 0.0)), config=cfg))
            elif kind == "relay_pair":
                for end in ("a", "b"):
                    if end == "b" and not cfg.get("bidirectional", True):
                        continue
                    pos = tuple(cfg[end])
                    self._add(Actor(f"{aid}.{end}", "relay", StaticRoute(pos), listens=("beacon",),
                                    bounds=(pos[0], pos[1], pos[0], pos[1]),
                                    config={**cfg, "far": tuple(cfg["b" if end == "a" else "a"])}))
            elif kind == "internal_forger":
                speed = cfg.get("speed_mps", 13.9)
                if isinstance(speed, list):
                    speed = self.rng_adv.uniform(*speed)
                route = Route(cfg["route"], speed, cfg.get("spawn_ms", 0.0))
                xs = [p[0] for p in route.points]
                ys = [p[1] for p in route.points]
                home = self.cas[cfg["home"]] if "home" in cfg else self.ca_at(route.points[0])
                actor = self._add(Actor(aid, "forger", route, self._new_node(aid, "private-vehicle", home),
                                        ("beacon", "geocast", "crl_piece"),
                                        bounds=(min(xs), min(ys), max(xs), max(ys)), config=cfg))
                self.at(route.spawn_ms, self._spawn, actor)
            elif kind == "replayer":
                pos = tuple(cfg["position"])
                self._add(Actor(aid, "replayer", StaticRoute(pos), listens=("beacon",),
                                bounds=(pos[0], pos[1], pos[0], pos[1]), config=cfg))
            elif kind == "jammer":
                self.radio.jammers.append(Jammer(aid, tuple(cfg["region"]), cfg.get("duty_cycle", 1.0),
                                                 cfg.get("period_ms", 100.0), cfg.get("start_ms", 0.0),
                                                 cfg.get("stop_ms", math.inf)))
            elif kind == "flooder":
                pos = tuple(cfg["position"])
                home = self.cas[cfg["home"]] if "home" in cfg else self.ca_at(pos)
                actor = self._add(Actor(aid, "flooder", StaticRoute(pos), self._new_node(aid, "private-vehicle", home),
                                        ("beacon",), bounds=(pos[0], pos[1], pos[0], pos[1]), config=cfg))
                self.at(0.0, self._spawn, actor)
                self.at(cfg.get("start_ms", 0.0), self._flood, actor)
            elif kind == "colluder_group":
                pos = tuple(cfg["position"])
                home = self.cas[cfg["home"]] if "home" in cfg else self.ca_at(pos)
                for m in range(cfg["members"]):
                    mid = f"{aid}.{m}"
                    p = (pos[0] + 5.0 * m, pos[1])
                    actor = self._add(Actor(mid, "colluder", StaticRoute(p), self._new_node(mid, "private-vehicle", home),
                                            ("beacon",), bounds=(pos[0], pos[1], pos[0] + 5.0 * m, pos[1]),
                                            config=cfg))
                    self.at(0.0, self._spawn, actor)

    def _setup_crl(self) -> None:
        c = self.crl_cfg
        if not c["enabled"]:
            return
        ca = self.cas[self.scenario["regions"][0]["ca_id"]]
        n = c["preload_revoked"]
        if c["size_bytes"]:
            header = len(ca.build_crl(0).to_bytes())
            n = max(n, math.ceil(max(0, c["size_bytes"] - header) / cc.FINGERPRINT_LEN))
        ca.crl_serial = 0
        fake = {bytes(self.rng_crl.getrandbits(8) for _ in range(16)): 2 ** 62 for _ in range(n)}
        ca.load_revocations(fake)
        crl = ca.build_crl(c["start_ms"])
        self.crl = crl
        self.values["crl_bytes"] = len(crl.to_bytes())
        if c["compressed"]:
            bloom = ca.compress_crl(crl, c["fp_rate"])
            self.values["bloom_bytes"] = bloom.size_bytes
            self.at(c["start_ms"], self._push_bloom, ca, bloom)
        pieces = encode_crl_pieces(crl, ca.ca_keypair.private_key, c["piece_bytes"], c["redundancy"])
        self.crl_issuer = ca.ca_id
        vehicles = [a for a in self.actors.values() if a.kind == "vehicle"]
        for a in vehicles[: c["seed_vehicles"]]:
            a.config["crl_seed"] = pieces
        self.values["crl_pieces_total"] = len(pieces)
        self.values["crl_pieces_needed"] = data_piece_count(len(pieces), c["redundancy"])
        rsus = [a for a in self.actors.values() if a.kind == "rsu"]
        for rsu in rsus:
            offset = 0 if c["offset_mode"] == "synchronized" else self.rng_crl.randrange(len(pieces))
            b = RsuBroadcaster(pieces, c["rate_bps"], offset, c["start_ms"])
            self.at(b.slot_time(0), self._rsu_piece, rsu, b, 0, ca.ca_id)
        self.values["crl_cadence_ms"] = RsuBroadcaster(pieces, c["rate_bps"]).cadence_ms
        if c["v2v"]:
            self.at(c["start_ms"] + c["v2v_period_ms"], self._v2v_round, ca.ca_id)

    # -- run ------------------------------------------------------------------------

    def run(self) -> SimResult:
        while self.queue:
            t, _, fn, args = heapq.heappop(self.queue)
            if t > self.duration:
                break
            if t < self.now:
                raise InvariantViolation("event consumed out of order")
            self.now = t
            fn(*args)
        self.now = self.duration
        self._finish()
        return SimResult(self.trace, self._collect())

    # -- vehicles and nodes -----------------------------------------------------

    def _listeners(self, t: float, kind: str, exclude: Actor | None = None):
        return [(a, a.position(t)) for a in self.actors.values()
                if a is not exclude and kind in a.listens and a.active(t)]

    def _spawn(self, actor: Actor) -> None:
        t = self.now
        pos = actor.position(t)
        node = actor.node
        node.position = pos
        ca = self.ca_at(pos)
        try:
            node.pseudonym_refill(ca, actor.local(t))
        except (AuthorityError, NodeError, HsmError) as exc:
            self.log(t, actor.actor_id, "refill_denied", str(exc))
            return
        self._note_fp(actor, t)
        for piece in actor.config.pop("crl_seed", ()):
            self._receive(actor, Frame("crl_piece", "preload", b"", 0, (piece, self.crl_issuer)), t)
        self.log(t, actor.actor_id, "spawn", f"x={pos[0]:.1f} y={pos[1]:.1f} ca={ca.ca_id}")
        if actor.kind in ("vehicle", "forger", "colluder"):
            period = self.node_params.beacon_period_ms
            self.at(t + self.rng_mob.uniform(0.0, period), self._beacon, actor)

    def _note_fp(self, actor: Actor, t: float) -> None:
        fp = actor.node.fingerprint
        if fp is not None and (not actor.fp_history or actor.fp_history[-1][1] != fp):
            actor.fp_history.append((t, fp))
            self._fp_owner[fp] = actor.actor_id

    def _housekeeping(self, actor: Actor, t: float, pos) -> None:
        node = actor.node
        local = actor.local(t)
        if node.maybe_change_pseudonym(local):
            self._note_fp(actor, t)
            self.log(t, actor.actor_id, "pseudonym_change", f"fp={node.fingerprint.hex()}")
        region_ca = self.ca_at(pos)
        if node.needs_refill(local, region_ca.ca_id) and t - actor.last_refill_try >= self.ca_cfg["refill_retry_ms"]:
            actor.last_refill_try = t
            rsus = [a for a in self.actors.values() if a.kind == "rsu"]
            connected = not rsus or any(math.dist(pos, r.position(t)) <= self.radio.range_m for r in rsus)
            remaining = node.pool.remaining_fraction(local)
            try:
                ok = node.pseudonym_refill(region_ca, local, connected)
            except (AuthorityError, NodeError) as exc:
                self.metrics["refill_denied"] += 1
                self.log(t, actor.actor_id, "refill_denied", str(exc))
                ok = False
            if ok:
                self.metrics["refill_early" if remaining > 0 else "refill_late"] += 1
                self._note_fp(actor, t)
                self.log(t, actor.actor_id, "refill", f"ca={region_ca.ca_id} next_set={int(node.pool.next_set is not None)}")
            elif not connected:
                self.log(t, actor.actor_id, "refill_deferred")
        for zone in self.zones:
            inside = zone.contains(pos)
            if inside and zone.zone_id not in actor.inside_zones:
                actor.inside_zones.add(zone.zone_id)
                if node.pool.next_valid(local) is not None:
                    node.change_pseudonym("mix_zone_entry", local)
                    self._note_fp(actor, t)
                    self.log(t, actor.actor_id, "pseudonym_change", f"fp={node.fingerprint.hex()} trigger=zone")
                else:
                    self.metrics["zone_change_unavailable"] += 1
                server = self.zone_servers.get(zone.zone_id)
                if server is not None and node.credential is not None:
                    key = server.grant(node.credential, node.trusted_keys, local)
                    if key is not None:
                        actor.zone_keys[zone.zone_id] = key
                self.log(t, actor.actor_id, "zone_enter", zone.zone_id)
            elif not inside and zone.zone_id in actor.inside_zones:
                actor.inside_zones.discard(zone.zone_id)
                actor.zone_keys.pop(zone.zone_id, None)
                self.log(t, actor.actor_id, "zone_exit", zone.zone_id)
        if actor.pending_ack is not None:
            self._send_ack(actor, t)

    def _beacon(self, actor: Actor) -> None:
        t = self.now
        if not actor.active(t):
            if actor.alive:
                self.log(t, actor.actor_id, "despawn")
            return
        pos, speed, heading = actor.route.state(t)
        node = actor.node
        node.position, node.speed, node.heading = pos, speed, heading
        self._housekeeping(actor, t, pos)
        if actor.kind == "forger":
            self._check_bounds(actor, pos)
            jump = actor.config.get("jump_m", 200.0)
            node.position = (pos[0] + actor.jump_sign * jump, pos[1])
            actor.jump_sign = -actor.jump_sign
        try:
            msg = node.assemble_beacon(actor.local(t))
        except HsmError as exc:
            actor.alive = str(exc) != "device dead"
            self.metrics["beacon_fail"] += 1
            self.log(t, actor.actor_id, "beacon_fail", str(exc))
            if actor.alive:
                self.at(t + self.node_params.beacon_period_ms, self._beacon, actor)
            return
        except NodeError as exc:
            self.metrics["beacon_fail"] += 1
            self.log(t, actor.actor_id, "beacon_fail", str(exc))
            self.at(t + self.node_params.beacon_period_ms, self._beacon, actor)
            return
        self._note_fp(actor, t)
        wire = msg.to_bytes()
        frame = Frame("beacon", actor.actor_id, wire, node.link_id, msg)
        sealed_zone = next((z for z in actor.inside_zones if z in actor.zone_keys), None)
        if sealed_zone is not None:
            nonce = self.rng_zone.getrandbits(96).to_bytes(12, "little")
            frame = Frame("zone", actor.actor_id, seal_zone_frame(actor.zone_keys[sealed_zone], wire, nonce),
                          node.link_id, (sealed_zone, msg))
        if self.record_wire and node.role == "private-vehicle":
            self.wire_log.append((actor.actor_id, frame.kind, frame.wire))
        self.metrics["beacons_tx"] += 1
        if self.trace_cfg.get("beacon_tx", True):
            self.log(t, actor.actor_id, "beacon_tx",
                     f"fp={cc.fingerprint(msg.credential).hex()} link={node.link_id:012x} kind={frame.kind}")
        self._broadcast(actor, pos, t, frame)
        self.at(t + self.node_params.beacon_period_ms, self._beacon, actor)

    def _broadcast(self, sender: Actor, pos, t: float, frame: Frame, range_m: float | None = None) -> None:
        if frame.kind in ("beacon", "zone"):
            self._observe(pos, t, frame)
        listeners = self._listeners(t, "beacon" if frame.kind == "zone" else frame.kind, sender)
        for listener, arrival in self.radio.deliveries(pos, t, listeners, range_m):
            if arrival is None:
                self.metrics["jammed_drops"] += 1
                continue
            self._receive(listener, frame, arrival)

    def _observe(self, pos, t: float, frame: Frame) -> None:
        for obs in self.actors.values():
            if obs.kind == "observer" and any(in_rect(pos, r) for r in obs.config["coverage"]):
                if not self.radio.jammed(pos, t):
                    self.observations.append((t, pos, frame.wire))
                return

    def _receive(self, actor: Actor, frame: Frame, t: float) -> None:
        if actor.kind == "relay":
            return self._relay_capture(actor, frame, t)
        if actor.kind == "replayer":
            return self._replay_capture(actor, frame, t)
        node = actor.node
        if frame.kind in ("beacon", "zone"):
            msg = frame.obj
            if frame.kind == "zone":
                zone_id, msg = frame.obj
                if open_zone_frame(actor.zone_keys.get(zone_id), frame.wire) is None:
                    self.metrics["zone_opaque_rx"] += 1
                    return
                self.metrics["zone_decrypted_rx"] += 1
            node.position = actor.position(t) if actor.kind != "forger" else node.position
            verdict = node.verify_beacon(msg, actor.local(t))
            self.metrics[f"beacon_{'accepted' if verdict else 'reject:' + verdict.reason}"] += 1
            if frame.relayed:
                self.metrics["relay_rx"] += 1
                self.metrics["relay_accepted"] += int(verdict.accepted)
            if frame.replayed:
                self.metrics["replay_rx"] += 1
                self.metrics["replay_accepted"] += int(verdict.accepted)
            if not verdict:
                fp = cc.fingerprint(msg.credential)
                if verdict.reason == "revoked" and node.crl_view.lookup(fp) == "bloom" and not any(
                        fp in ca.revoked for ca in self.cas.values()):
                    self.metrics["bloom_false_positives"] += 1
                self.log(t, actor.actor_id, "beacon_reject", f"reason={verdict.reason} from={fp.hex()}")
            elif self.trace_cfg.get("beacon_rx"):
                self.log(t, actor.actor_id, "beacon_rx", f"from={cc.fingerprint(msg.credential).hex()}")
        elif frame.kind == "crl_piece":
            piece, issuer = frame.obj
            status = node.receive_crl_piece(piece, issuer, self.crl_cfg["redundancy"])
            if status is not None and not hasattr(status, "have") and actor.crl_done_ms is None:
                actor.crl_done_ms = t
                self.log(t, actor.actor_id, "crl_complete", f"serial={status.serial} entries={len(status.entries)}")
        elif frame.kind == "geocast":
            self._geocast_rx(actor, frame.obj, t, "broadcast")
        elif frame.kind == "hsm_command":
            self._hsm_command_rx(actor, frame.obj, t)

    # -- adversaries ------------------------------------------------------------------

    def _relay_capture(self, actor: Actor, frame: Frame, t: float) -> None:
        if frame.relayed or frame.replayed:
            return
        far = actor.config["far"]
        out = Frame(frame.kind, actor.actor_id, frame.wire, frame.link_id, frame.obj, relayed=True)
        self.at(t + actor.config["delay_ms"], self._reemit, actor, far, out, actor.config.get("range_m"))

    def _replay_capture(self, actor: Actor, frame: Frame, t: float) -> None:
        limit = actor.config.get("max_replays", 10_000)
        if frame.relayed or frame.replayed or frame.kind != "beacon" or actor.replays >= limit:
            return
        actor.replays += 1
        out = Frame(frame.kind, actor.actor_id, frame.wire, frame.link_id,
                    cc.SignedMessage.from_bytes(frame.wire), replayed=True)
        self.at(t + actor.config["delay_ms"], self._reemit, actor, actor.position(t), out,
                actor.config.get("range_m"))

    def _reemit(self, actor: Actor, pos, frame: Frame, range_m) -> None:
        t = self.now
        if actor.kind == "replayer":
            self._check_bounds(actor, pos)
        self.metrics[f"{actor.kind}_frames"] += 1
        self.log(t, actor.actor_id, f"{actor.kind}_emit", f"x={pos[0]:.1f} y={pos[1]:.1f}")
        listeners = self._listeners(t, frame.kind)
        listeners = [(a, p) for a, p in listeners if a.kind not in ("relay", "replayer")]
        for listener, arrival in self.radio.deliveries(pos, t, listeners, range_m):
            if arrival is None:
                self.metrics["jammed_drops"] += 1
                continue
            self._receive(listener, frame, arrival)

    def _flood(self, actor: Actor) -> None:
        t = self.now
        cfg = actor.config
        if t >= cfg.get("stop_ms", self.duration):
            return
        pos = actor.position(t)
        self._check_bounds(actor, pos)
        node = actor.node
        node.position = pos
        try:
            msg = node.geocast_originate(b"flood", _region(cfg["region"]), actor.local(t))
        except NodeError as exc:
            self.log(t, actor.actor_id, "flood_fail", str(exc))
            return
        self.metrics["flood_originated"] += 1
        self._broadcast(actor, pos, t, Frame("geocast", actor.actor_id, msg.to_bytes(), node.link_id, msg))
        self.at(t + 1000.0 / cfg["rate_per_s"], self._flood, actor)

    # -- LEAVE ------------------------------------------------------------------------

    def _leave_round(self) -> None:
        t = self.now
        quorum = self.ca_cfg["leave_quorum"]
        accusations = {}
        members = [a for a in self.actors.values() if a.kind in NODE_KINDS and a.active(t) and a.node.fingerprint]
        for a in members:
            local = a.local(t)
            if a.kind == "forger":
                continue
            flags = a.node.mds_flags(local)
            if a.kind == "colluder":
                victim = self.actors.get(a.config["victim"])
                if victim is not None and victim.active(t):
                    vfp = victim.node.fingerprint
                    if vfp in {fp for fp, _ in a.node.neighbor_table.authenticated(local)}:
                        flags = flags | {vfp}
            accusations[a.node.fingerprint] = sorted(flags)
        for event in mds_leave_round(accusations, quorum, t):
            target_id = self._fp_owner.get(event.target, "?")
            target = self.actors.get(target_id)
            self.metrics["eviction_events"] += 1
            if target is None or target.kind not in ("forger",):
                self.metrics["honest_evictions"] += 1
            self.log(t, "leave", "evict", f"target={event.target.hex()} owner={target_id} evaluators={len(event.evaluators)}")
            evaluator_pos = [a.position(t) for a in members if a.node.fingerprint in event.evaluators]
            reports = []
            blacklisted_by = 0
            for a in members:
                if a.kind == "forger" and a.node.fingerprint == event.target:
                    continue
                p = a.position(t)
                if a.node.fingerprint in event.evaluators or any(math.dist(p, q) <= self.radio.range_m for q in evaluator_pos):
                    rep = a.node.apply_eviction(event, a.local(t))
                    blacklisted_by += 1
                    if rep is not None:
                        reports.append(rep)
            if target is not None and target.kind == "forger" and "first_blacklist_ms" not in self.values:
                self.values["first_blacklist_ms"] = t
                self.values["first_blacklist_latency_ms"] = t - target.route.spawn_ms
                self.values["first_blacklist_count"] = blacklisted_by
            ca = self.ca_at(target.position(t)) if target is not None else self.cas[self.scenario["regions"][0]["ca_id"]]
            revoked = ca.record_eviction_report(reports, now=t)
            owner = ca.owner_of(event.target)
            if owner is not None:
                self.log(t, ca.ca_id, "eviction_recorded", f"owner={owner} count={ca.eviction_reports.get(owner, 0)}")
            if revoked:
                self.metrics["ca_revocations"] += 1
                self.values.setdefault("ca_revoked_ms", t)
                self.values.setdefault("ca_revoked_after_events", ca.eviction_reports.get(owner, 0))
                self.log(t, ca.ca_id, "ca_revoke", f"owner={owner} credentials={len(revoked)}")
                self.at(t + self.ca_cfg["crl_push_latency_ms"], self._push_crl, ca)
        self.at(t + self.ca_cfg["leave_period_ms"], self._leave_round)

    def _push_crl(self, ca: CertificationAuthority) -> None:
        t = self.now
        crl = ca.build_crl(t)
        bloom = ca.compress_crl(crl, self.crl_cfg["fp_rate"]) if self.crl_cfg["compressed"] else None
        for a in self.actors.values():
            if a.node is not None and a.alive:
                a.node.apply_crl(crl)
                if bloom is not None:
                    a.node.apply_crl(bloom, ca.ca_id)
        self.log(t, ca.ca_id, "crl_push", f"serial={crl.serial} entries={len(crl.entries)}")

    def _push_bloom(self, ca, bloom) -> None:
        for a in self.actors.values():
            if a.node is not None:
                a.node.apply_crl(bloom, ca.ca_id)
        self.log(self.now, ca.ca_id, "bloom_push", f"serial={bloom.serial} bytes={bloom.size_bytes}")

    # -- CRL dissemination ----------------------------------------------------------------

    def _rsu_piece(self, rsu: Actor, b: RsuBroadcaster, slot: int, issuer: str) -> None:
        t = self.now
        piece = b.piece_at(slot)
        self.metrics["crl_pieces_tx"] += 1
        self._broadcast(rsu, rsu.position(t), t, Frame("crl_piece", rsu.actor_id, piece.to_bytes(), 0, (piece, issuer)))
        nxt = b.slot_time(slot + 1)
        if nxt <= self.duration:
            self.at(nxt, self._rsu_piece, rsu, b, slot + 1, issuer)

    def _v2v_round(self, issuer: str) -> None:
        t = self.now
        vehicles = [a for a in self.actors.values() if a.kind == "vehicle" and a.active(t)]
        for a, b in itertools.combinations(vehicles, 2):
            if math.dist(a.position(t), b.position(t)) > self.radio.range_m:
                continue
            for src, dst in ((a, b), (b, a)):
                rs, rd = src.node.reassemblers.get(issuer), dst.node.reassemblers.get(issuer)
                if rs is None or not rs.pieces or (rd is not None and rd.complete):
                    continue
                total = rs.total
                bitmap = rd.bitmap() if rd is not None and rd.serial == rs.serial else bytes((total + 7) // 8)
                sent = v2v_crl_relay(rs.pieces, bitmap, total, self.crl_cfg["v2v_max_pieces"])
                for piece in sent:
                    self._receive(dst, Frame("crl_piece", src.actor_id, piece.to_bytes(), 0, (piece, issuer)), t)
                self.metrics["v2v_pieces"] += len(sent)
        self.at(t + self.crl_cfg["v2v_period_ms"], self._v2v_round, issuer)

    # -- geocast ------------------------------------------------------------------------

    def _geocast_originate(self, g: dict) -> None:
        t = self.now
        actor = self.actors.get(g["origin"])
        if actor is None or not actor.active(t):
            self.log(t, g["origin"], "geocast_fail", "origin inactive")
            return
        region = _region(g["region"])
        pos = actor.position(t)
        actor.node.position = pos
        try:
            msg = actor.node.geocast_originate(g.get("payload", "hazard").encode(), region, actor.local(t))
        except NodeError as exc:
            self.log(t, actor.actor_id, "geocast_fail", str(exc))
            return
        in_region = sorted(a.actor_id for a in self.actors.values()
                           if a.kind == "vehicle" and a.active(t) and region.contains(a.position(t)))
        record = {"key": (msg.origin_fingerprint, msg.sequence_number), "in_region": in_region,
                  "rebroadcasts": Counter(), "hops": 0, "nonmonotonic": 0}
        self.geocasts.append(record)
        self.log(t, actor.actor_id, "geocast_originate", f"seq={msg.sequence_number} in_region={len(in_region)}")
        if region.contains(pos):
            self._geocast_rx(actor, msg, t, "unicast")
        else:
            self._geocast_forward_step(actor, msg, t)

    def _geocast_record(self, msg):
        key = (msg.origin_fingerprint, msg.sequence_number)
        for r in self.geocasts:
            if r["key"] == key:
                return r
        return None

    def _geocast_rx(self, actor: Actor, msg, t: float, via: str) -> None:
        node = actor.node
        pos = actor.position(t)
        node.position = pos
        local = actor.local(t)
        if msg.region.contains(pos):
            d = node.geocast_distribute(msg, local)
            flood = self._fp_owner.get(msg.origin_fingerprint, "")
            is_flood = flood in self.actors and self.actors[flood].kind == "flooder"
            if is_flood and d.action != "suppress":
                self.metrics["flood_first_rx"] += 1
            if d.action == "rebroadcast":
                rec = self._geocast_record(msg)
                if rec is not None:
                    rec["rebroadcasts"][actor.actor_id] += 1
                if is_flood:
                    self.metrics["flood_rebroadcast"] += 1
                    self.flood_rx.setdefault(actor.actor_id, []).append(t)
                self.metrics["geocast_rebroadcast"] += 1
                self.log(t, actor.actor_id, "geocast_rebroadcast", f"seq={msg.sequence_number}")
                self._broadcast(actor, pos, t, Frame("geocast", actor.actor_id, d.message.to_bytes(), node.link_id, d.message))
            elif d.action == "drop":
                self.metrics[f"geocast_drop:{d.reason}"] += 1
                if is_flood and d.reason == "rate_limited":
                    self.metrics["flood_rate_limited"] += 1
                self.log(t, actor.actor_id, "geocast_drop", f"reason={d.reason} seq={msg.sequence_number}")
        elif via == "unicast":
            self._geocast_forward_step(actor, msg, t)

    def _geocast_forward_step(self, actor: Actor, msg, t: float, exclude=(), retry: bool = False) -> None:
        node = actor.node
        pos = actor.position(t)
        node.position = pos
        d = node.geocast_forward(msg, actor.local(t), exclude, retry)
        if d.action == "distribute":
            return self._geocast_rx(actor, msg, t, "unicast")
        if d.action == "drop":
            self.metrics[f"geocast_drop:{d.reason}"] += 1
            self.log(t, actor.actor_id, "geocast_drop", f"reason={d.reason} seq={msg.sequence_number}")
            return
        nxt = next((a for a in self.actors.values()
                    if a.node is not None and a.active(t) and a.node.fingerprint == d.next_hop
                    and math.dist(pos, a.position(t)) <= self.radio.range_m), None)
        if nxt is None:
            node.on_missed_neighbor(d.next_hop)
            self.log(t, actor.actor_id, "geocast_missed_neighbor", d.next_hop.hex())
            return self._geocast_forward_step(actor, msg, t, tuple(exclude) + (d.next_hop,), True)
        center = msg.region.center
        mine, theirs = math.dist(pos, center), math.dist(nxt.position(t), center)
        rec = self._geocast_record(msg)
        if rec is not None:
            rec["hops"] += 1
            rec["nonmonotonic"] += int(theirs >= mine)
        self.metrics["geocast_forwards"] += 1
        self.log(t, actor.actor_id, "geocast_forward", f"to={nxt.actor_id} d_self={mine:.1f} d_next={theirs:.1f}")
        self.at(t + math.dist(pos, nxt.position(t)) / C_M_PER_MS, self._geocast_rx_event, nxt, d.message)

    def _geocast_rx_event(self, actor: Actor, msg) -> None:
        if actor.active(self.now):
            self._geocast_rx(actor, msg, self.now, "unicast")

    # -- HSM revocation ---------------------------------------------------------------------

    def _nearest_rsu(self, pos, t):
        rsus = [a for a in self.actors.values() if a.kind == "rsu"]
        return min(rsus, key=lambda r: (math.dist(pos, r.position(t)), r.actor_id), default=None)

    def _kill_start(self, k: dict) -> None:
        t = self.now
        target = self.actors[k["target"]]
        ca = self.cas[target.node.home_ca_id]
        cmd = ca.issue_hsm_command(CommandKind.KILL, target.node.hsm.device_id)
        session = KillSession(target.node.hsm.device_id, cmd.to_bytes(), target.node.certificate.public_key,
                              k.get("timeout_ms", 10_000.0))
        target.drop_next_ack = k.get("ack_lost", False)
        self.kill_sessions.append((target, session))
        rsu = self._nearest_rsu(target.position(t), t)
        self.log(t, ca.ca_id, "kill_start", f"target={target.actor_id} via={rsu.actor_id if rsu else '-'}")
        self._kill_actions(target, session, session.start(t, rsu.actor_id if rsu else None))

    def _kill_actions(self, target: Actor, session: KillSession, actions) -> None:
        t = self.now
        for action in actions:
            if action[0] == "send_rsu":
                rsu = self.actors.get(action[1]) if action[1] else None
                if rsu is not None and target.active(t):
                    d = math.dist(rsu.position(t), target.position(t))
                    if d <= self.radio.range_m and not self.radio.jammed(target.position(t), t):
                        self.at(t + d / C_M_PER_MS, self._hsm_command_event, target, action[2])
                        continue
                self.log(t, "rhsm", "rsu_miss", target.actor_id)
            elif action[0] == "broadcast_rds":
                when = self.rds.transmit(t, len(action[1]))
                self.log(t, "rhsm", "rds_broadcast", f"target={target.actor_id} deliver_at={when:.3f}")
                self.at(when, self._hsm_command_event, target, action[1])
        if session.deadline != math.inf:
            self.at(session.deadline, self._kill_tick, target, session)

    def _kill_tick(self, target: Actor, session: KillSession) -> None:
        if self.now < session.deadline:
            return
        before = session.state
        actions = session.on_tick(self.now)
        if session.state != before:
            self.log(self.now, "rhsm", "kill_state", f"target={target.actor_id} state={session.state.value}")
        self._kill_actions(target, session, actions)

    def _hsm_command_event(self, actor: Actor, command: bytes) -> None:
        self._hsm_command_rx(actor, command, self.now)

    def _hsm_command_rx(self, actor: Actor, command: bytes, t: float) -> None:
        try:
            ack = actor.node.hsm.process_command(command)
        except HsmError as exc:
            self.log(t, actor.actor_id, "hsm_command_rejected", str(exc))
            return
        if ack is None or not actor.node.hsm.killed:
            return
        actor.alive = False
        actor.pending_ack = ack
        self.log(t, actor.actor_id, "hsm_killed")
        self._send_ack(actor, t)

    def _send_ack(self, actor: Actor, t: float) -> None:
        rsu = self._nearest_rsu(actor.position(t), t)
        if rsu is not None and math.dist(rsu.position(t), actor.position(t)) <= self.radio.range_m:
            if actor.drop_next_ack:
                actor.drop_next_ack = False
                self.log(t, actor.actor_id, "ack_lost")
            else:
                ack, actor.pending_ack = actor.pending_ack, None
                self.at(t + math.dist(rsu.position(t), actor.position(t)) / C_M_PER_MS, self._ack_arrival, actor, ack)
                return
        if actor.ack_retries < 30:
            actor.ack_retries += 1
            self.at(t + 1000.0, self._ack_retry, actor)

    def _ack_retry(self, actor: Actor) -> None:
        if actor.pending_ack is not None:
            self._send_ack(actor, self.now)

    def _ack_arrival(self, actor: Actor, ack: bytes) -> None:
        for target, session in self.kill_sessions:
            if target is actor and session.on_ack(ack, self.now):
                self.log(self.now, "rhsm", "kill_acked", f"target={actor.actor_id} latency={self.now - session.started_at:.3f}")

    # -- results ------------------------------------------------------------------------

    def _finish(self) -> None:
        if not self.zones or not self.observations:
            return
        frames = sorted(self.observations, key=lambda f: f[0])
        for zone in self.zones:
            view = cryptographic_mixzone_filter(frames, zone, self.zone_boundary[zone.zone_id])
            zid = zone.zone_id
            self.values[f"zone:{zid}:visible_inside"] = view.visible_inside
            self.values[f"zone:{zid}:opaque_inside"] = view.opaque_inside
            enters = [e for e in view.events if e.direction == "enter"]
            exits = [e for e in view.events if e.direction == "exit"]
            self.values[f"zone:{zid}:n"] = max(len(enters), len(exits))
            if not enters and not exits:
                continue
            try:
                dist = enumerate_matchings(enters, exits, zone, rng=_stream(self.seed, f"mc:{zid}"))
            except ValueError:
                # observer heuristics produced events no matching can explain
                self.values[f"zone:{zid}:infeasible"] = 1
                continue
            truth = {}
            for e in enters:
                owner = self._fp_owner.get(e.fingerprint)
                match = next((x.fingerprint for x in exits if self._fp_owner.get(x.fingerprint) == owner), None)
                if match is not None:
                    truth[e.fingerprint] = match
            mass, correct = adversary_best_guess_success(dist, truth)
            self.values[f"zone:{zid}:entropy_bits"] = tracking_entropy(dist)
            self.values[f"zone:{zid}:best_guess_mass"] = mass
            self.values[f"zone:{zid}:tracking_success"] = int(correct)

    def _collect(self) -> dict:
        m: dict = dict(self.metrics)
        m.update(self.values)
        totals: Counter = Counter()
        vehicles = [a for a in self.actors.values() if a.kind == "vehicle"]
        for a in self.actors.values():
            if a.node is not None:
                for k in ("pseudonym_changes", "refills", "refill_deferred", "pool_exhausted", "bloom_rejections"):
                    totals[k] += a.node.stats[k]
        m.update({f"node_{k}": v for k, v in totals.items()})
        m["vehicles"] = len(vehicles)
        if self.crl_cfg["enabled"]:
            done = [a for a in vehicles if a.crl_done_ms is not None]
            m["crl_vehicles"] = len(vehicles)
            m["crl_completed"] = len(done)
            m["crl_completed_before_route_end"] = sum(1 for a in done if a.crl_done_ms <= a.route.end_ms)
            if done:
                m["crl_completion_ms_max"] = max(a.crl_done_ms - a.route.spawn_ms for a in done)
        rx = m.get("relay_rx", 0)
        if rx:
            m["relay_acceptance_rate"] = m.get("relay_accepted", 0) / rx
        for i, rec in enumerate(self.geocasts):
            reb = rec["rebroadcasts"]
            m[f"geocast:{i}:in_region"] = len(rec["in_region"])
            m[f"geocast:{i}:rebroadcasters"] = len(reb)
            m[f"geocast:{i}:exactly_once"] = int(sorted(reb) == rec["in_region"] and all(v == 1 for v in reb.values()))
            m[f"geocast:{i}:hops"] = rec["hops"]
            m[f"geocast:{i}:nonmonotonic_hops"] = rec["nonmonotonic"]
        if self.flood_rx:
            m["flood_max_rebroadcasts_per_s"] = max(_max_window(ts, 1000.0) for ts in self.flood_rx.values())
        for target, session in self.kill_sessions:
            m[f"kill:{target.actor_id}:state"] = session.state.value
            if session.acked_at is not None:
                m[f"kill:{target.actor_id}:latency_ms"] = session.acked_at - session.started_at
            m[f"kill:{target.actor_id}:rds_sends"] = session.rds_sent
        return m


def _max_window(times, window: float) -> int:
    """Largest number of timestamps inside any half-open window of ``window`` ms."""
    times = sorted(times)
    best = j = 0
    for i, t in enumerate(times):
        while times[j] <= t - window:
            j += 1
        best = max(best, i - j + 1)
    return best


def run(scenario: Scenario, record_wire: bool = False) -> SimResult:
    return Simulator(scenario, record_wire).run()
