import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanetsec.mixzone import (
    JourneyTrace,
    MatchingDistribution,
    MixEvent,
    MixZone,
    TraverseDistribution,
    ZoneKeyServer,
    ZoneVisit,
    adversary_best_guess_success,
    best_guess,
    cryptographic_mixzone_filter,
    enumerate_matchings,
    open_zone_frame,
    parse_event_log,
    policy_eval,
    seal_zone_frame,
    tracking_entropy,
    zone_report,
)

from .conftest import make_node
from .oracles import brute_force_posterior, entropy_bits, random_instance


def crossing(n, zone_ports=("p0", "p1"), t_in=0.0, t_out=1000.0):
    enters = [MixEvent("enter", bytes([1, i]), zone_ports[i % len(zone_ports)], t_in) for i in range(n)]
    exits = [MixEvent("exit", bytes([2, i]), zone_ports[i % len(zone_ports)], t_out) for i in range(n)]
    return enters, exits


def test_symmetric_two_and_three():
    zone = MixZone.symmetric("z", 2)
    d = enumerate_matchings(*crossing(2), zone)
    assert list(d.probabilities) == pytest.approx([0.5, 0.5])
    assert d.entropy_bits == pytest.approx(1.0)
    d = enumerate_matchings(*crossing(3), MixZone.symmetric("z", 3))
    assert len(d.probabilities) == 6
    assert d.entropy_bits == pytest.approx(math.log2(6))


def test_negative_traverse_forces_matching():
    zone = MixZone.symmetric("z", 2)
    enters = [MixEvent("enter", b"a", "p0", 0.0), MixEvent("enter", b"b", "p1", 500.0)]
    exits = [MixEvent("exit", b"A", "p0", 400.0), MixEvent("exit", b"B", "p1", 900.0)]
    d = enumerate_matchings(enters, exits, zone)
    assert d.entropy_bits == 0.0
    assert adversary_best_guess_success(d, {b"a": b"A", b"b": b"B"}) == (1.0, True)


def test_entropy_of_explicit_distribution():
    d = MatchingDistribution([], [], np.zeros((3, 0), dtype=np.int16), np.array([0.7, 0.2, 0.1]))
    expected = -(0.7 * math.log2(0.7) + 0.2 * math.log2(0.2) + 0.1 * math.log2(0.1))
    assert tracking_entropy(d) == pytest.approx(expected, abs=1e-12)
    assert round(tracking_entropy(d), 4) == 1.1568


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_uniform_gives_log_factorial(n):
    d = enumerate_matchings(*crossing(n), MixZone.symmetric("z", 2))
    assert d.entropy_bits == pytest.approx(math.log2(math.factorial(n)), abs=1e-9)


def test_tie_break_prefers_smallest_exit_fingerprints():
    d = enumerate_matchings(*crossing(2), MixZone.symmetric("z", 2))
    row, mass = best_guess(d)
    assert mass == 0.5 and [d.exits[j].fingerprint for j in row] == [bytes([2, 0]), bytes([2, 1])]
    assert adversary_best_guess_success(d, [0, 1]) == (0.5, True)
    assert adversary_best_guess_success(d, [1, 0]) == (0.5, False)


def test_matches_brute_force_oracle():
    rng = random.Random(11)
    for _ in range(100):
        n = rng.randint(1, 4)
        zone, enters, exits, transition, raw, bin_ms, names = random_instance(rng, n)
        d = enumerate_matchings(enters, exits, zone)
        oracle = brute_force_posterior(enters, exits, transition, raw, bin_ms, names)
        got = {tuple(int(j) for j in row): p for row, p in zip(d.matchings, d.probabilities)}
        assert set(got) == set(oracle)
        assert max(abs(got[k] - oracle[k]) for k in oracle) < 1e-9
        assert abs(d.entropy_bits - entropy_bits(oracle.values())) < 1e-9


def test_unbalanced_counts_are_padded():
    zone = MixZone.symmetric("z", 2)
    enters, exits = crossing(3)
    d = enumerate_matchings(enters, exits[:2], zone)
    assert d.n == 3 and abs(d.probabilities.sum() - 1) < 1e-9
    assert 0 < d.entropy_bits <= math.log2(6) + 1e-9


def test_sampling_beyond_exact_limit():
    d = enumerate_matchings(*crossing(11), MixZone.symmetric("z", 2), mc_samples=2000, rng=random.Random(3))
    assert d.method == "mc"
    assert d.entropy_bits == pytest.approx(math.log2(math.factorial(11)), abs=1e-6)
    lo, hi = d.entropy_ci
    assert lo <= d.entropy_bits + 1e-9 and hi >= d.entropy_bits - 1e-9


def test_more_vehicles_never_reduce_entropy():
    zone = MixZone.symmetric("z", 2)
    hs = [enumerate_matchings(*crossing(n), zone).entropy_bits for n in range(2, 6)]
    assert hs == sorted(hs)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6))
def test_distribution_normalised_and_bounded(n, seed):
    zone, enters, exits, *_ = random_instance(random.Random(seed), n)
    d = enumerate_matchings(enters, exits, zone)
    assert abs(d.probabilities.sum() - 1) < 1e-9
    assert -1e-12 <= d.entropy_bits <= math.log2(math.factorial(n)) + 1e-9
    assert np.allclose(d.marginal().sum(axis=1), 1)


def test_traverse_distribution_validation():
    with pytest.raises(ValueError):
        TraverseDistribution((0.5, 0.6))
    t = TraverseDistribution((0.25, 0.75), 100)
    assert (t.pmf(0), t.pmf(50), t.pmf(100), t.pmf(101), t.pmf(201)) == (0.0, 0.25, 0.25, 0.75, 0.0)
    with pytest.raises(ValueError):
        MixZone("z", MixZone.symmetric("z").geometry, MixZone.symmetric("z").ports, np.eye(4) * 0.5,
                TraverseDistribution.uniform(100))


def test_zone_roundtrip():
    zone = MixZone.symmetric("z", 3, kind="cryptographic")
    again = MixZone.from_dict(zone.to_dict())
    assert again.to_dict() == zone.to_dict()


def test_zone_key_and_sealed_frames(fast_ca):
    zone = MixZone.symmetric("z", 4, kind="cryptographic")
    server = ZoneKeyServer(zone, seed=1)
    v = make_node(fast_ca, "v")
    key = server.grant(v.pool.active, {"A": fast_ca.public_key}, 10.0)
    assert key == server.key
    assert server.grant(v.pool.active, {}, 10.0) is None
    wire = v.assemble_beacon(10.0).to_bytes()
    sealed = seal_zone_frame(key, wire)
    assert open_zone_frame(key, sealed) == wire
    assert open_zone_frame(b"\x00" * 32, sealed) is None
    assert open_zone_frame(None, sealed) is None
    with pytest.raises(ValueError):
        ZoneKeyServer(MixZone.symmetric("u"))


def test_observer_sees_only_boundary(fast_ca):
    zone = MixZone.symmetric("z", 4, size_m=100.0, kind="cryptographic")
    key = ZoneKeyServer(zone).key
    v = make_node(fast_ca, "v", set_size=20)
    frames = []
    # drive west to east through the square along y = 0
    for step in range(21):
        t = step * 100.0
        x = -100.0 + step * 10.0
        v.position = (x, 0.0)
        if step == 10:
            v.change_pseudonym("mix_zone_entry", v.pool.active.end)
        wire = v.assemble_beacon(max(t, v.local_time)).to_bytes()
        frames.append((t, (x, 0.0), seal_zone_frame(key, wire) if zone.contains((x, 0.0)) else wire))
    view = cryptographic_mixzone_filter(frames, zone, boundary_m=20.0)
    assert view.visible_inside == 0 and view.opaque_inside > 0
    assert [e.direction for e in view.events] == ["enter", "exit"]
    assert view.events[0].fingerprint != view.events[1].fingerprint


def test_policy_three_two_vehicle_zones():
    zones = {f"z{i}": MixZone.symmetric(f"z{i}", 2) for i in range(3)}
    traces = []
    for vid in ("a", "b"):
        visits = [ZoneVisit(f"z{i}", 10_000.0 * i, 10_000.0 * i + 1000.0, "p0", "p1") for i in range(3)]
        traces.append(JourneyTrace(vid, 0.0, 40_000.0, visits))
    report = policy_eval("change-in-zone", traces, zones)
    assert report.per_vehicle == {"a": pytest.approx(3.0), "b": pytest.approx(3.0)}
    assert "independent" in report.caveat


def test_policy_change_every_tau_outside_zones_is_zero():
    zones = {"z": MixZone.symmetric("z", 2)}
    traces = [JourneyTrace(v, 0.0, 300_000.0, []) for v in ("a", "b")]
    assert policy_eval("change-every-tau", traces, zones).per_vehicle == {"a": 0.0, "b": 0.0}


def test_combined_policy_dominates():
    rng = random.Random(4)
    zones = {f"z{i}": MixZone.symmetric(f"z{i}", 4) for i in range(3)}
    traces = []
    for k in range(6):
        visits = []
        for i in range(3):
            t = 20_000.0 * i + rng.uniform(0, 500)
            visits.append(ZoneVisit(f"z{i}", t, t + rng.uniform(1000, 3000), "p0", f"p{rng.randrange(4)}"))
        traces.append(JourneyTrace(f"v{k}", 0.0, 70_000.0, visits, change_phase_ms=rng.uniform(0, 60_000)))
    tau = policy_eval("change-every-tau", traces, zones)
    combined = policy_eval("combined", traces, zones)
    in_zone = policy_eval("change-in-zone", traces, zones)
    for v in combined.per_vehicle:
        assert combined.per_vehicle[v] >= in_zone.per_vehicle[v] - 1e-9
        assert combined.per_vehicle[v] >= tau.per_vehicle[v] - 1e-9
    with pytest.raises(ValueError):
        policy_eval("never", traces, zones)


def test_event_log_report():
    text = "# zone,dir,fp,port,t\n" + "".join(
        f"z,enter,{i:02x},p0,{i}\n" for i in range(4)) + "".join(f"z,exit,{16 + i:02x},p1,{900 + i}\n" for i in range(4))
    events = parse_event_log(text)["z"]
    report = zone_report(MixZone.symmetric("z", 4), events)
    assert report.entropy_bits == pytest.approx(math.log2(24), abs=1e-3)
    assert "entropy_bits=4.584963" in report.to_line()
    with pytest.raises(ValueError):
        parse_event_log("z,enter,zz,p0,1\n")
