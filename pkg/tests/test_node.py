import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanetsec import crypto_core as cc
from vanetsec.crypto_core import GeoStamp
from vanetsec.errors import NodeError
from vanetsec.node import (
    C_M_PER_MS,
    GeocastMessage,
    NeighborEntry,
    NodeParams,
    Rect,
    SlidingWindowLimiter,
    mds_leave_round,
    neighbor_check,
    position_plausibility,
)
from vanetsec.revocation import bloom_build, sign_bloom

from .conftest import make_node


def flight(d):
    return d / C_M_PER_MS


def pair(ca, d=200.0):
    a, b = make_node(ca, "a", device_id=1), make_node(ca, "b", device_id=2)
    a.position, b.position = (0.0, 0.0), (d, 0.0)
    return a, b


def test_beacon_frequency_bounds():
    NodeParams(beacon_hz=1)
    NodeParams(beacon_hz=10)
    for hz in (0.5, 11):
        with pytest.raises(ValueError):
            NodeParams(beacon_hz=hz)


def test_beacon_accepted_from_neighbor(fast_ca):
    a, b = pair(fast_ca)
    msg = a.assemble_beacon(1000.0)
    assert msg.geo_stamp.timestamp == 1000.0
    v = b.verify_beacon(msg.to_bytes(), 1000.0 + flight(200))
    assert v.accepted
    assert a.fingerprint in b.neighbor_table


def test_beacon_rejections(fast_ca):
    a, b = pair(fast_ca)
    msg = a.assemble_beacon(1000.0)
    assert b.verify_beacon(msg, 6000.0).reason == "stale"
    wire = bytearray(msg.to_bytes())
    wire[-1] ^= 1
    assert not b.verify_beacon(bytes(wire), 6000.0)
    assert b.verify_beacon(b"junk", 6000.0).reason == "malformed"

    fresh = a.assemble_beacon(7000.0)
    fast_ca.revoke(a.fingerprint, "test", 7000.0)
    assert b.apply_crl(fast_ca.build_crl(7000.0)) == "applied"
    assert b.verify_beacon(fresh, 7000.0 + flight(200)).reason == "revoked"


def test_neighbor_check_values():
    stamp = GeoStamp(0.0, 0.0, 0.0)
    assert neighbor_check(stamp, (200.0, 0.0), flight(200), 1000.0, 450.0)
    # a 2 ms relay delay looks like 600 km of flight
    assert not neighbor_check(stamp, (200.0, 0.0), 2.0 + flight(200), 1000.0, 450.0)
    # 1 microsecond of clock error is 300 m, inside epsilon
    assert neighbor_check(stamp, (200.0, 0.0), flight(200) + 0.001, 1000.0, 450.0)
    assert neighbor_check(stamp, (200.0, 0.0), flight(200) - 0.001, 1000.0, 450.0)
    assert not neighbor_check(stamp, (2000.0, 0.0), flight(2000), 1000.0, 450.0)


def test_pseudonym_change_unlinks(fast_ca):
    a = make_node(fast_ca, "a")
    fp, link = a.fingerprint, a.link_id
    # consecutive lifetimes share their boundary instant
    boundary = a.pool.active.end
    assert a.change_pseudonym("mix_zone_entry", boundary) != fp
    assert a.fingerprint != fp and a.link_id != link
    assert a.pool.active.start == boundary
    with pytest.raises(NodeError):
        a.change_pseudonym("whim", 0.0)


def test_pool_exhaustion(fast_ca):
    a = make_node(fast_ca, "a", set_size=2)
    end = a.pool.current_set.end
    with pytest.raises(NodeError, match="pool exhausted"):
        a.change_pseudonym("interval", end + 1)
    assert a.stats["pool_exhausted"] == 1


def test_refill_threshold_and_foreign_region(fast_ca):
    from vanetsec.authority import CertificationAuthority

    a = make_node(fast_ca, "a", set_size=10)
    s = a.pool.current_set
    span = s.end - s.start
    assert not a.needs_refill(s.start + 0.5 * span)
    assert a.needs_refill(s.start + 0.8 * span)
    a.pseudonym_refill(fast_ca)
    assert not a.needs_refill()

    b = CertificationAuthority("B", seed="test-B", scheme="hmac", tau_ms=60_000)
    b.cross_certify(fast_ca)
    fast_ca.cross_certify(b)
    assert a.needs_refill(region_ca_id="B")
    a.pseudonym_refill(b)
    assert a.pool.active.ca_id == "B"
    assert b.owner_of(a.fingerprint) == "A/a"


def test_sign_log_tracks_active_pseudonym(fast_ca):
    a = make_node(fast_ca, "a", set_size=5)
    a.sign_log = []
    tau = a.pool.current_set.pseudonyms[0].end - a.pool.current_set.pseudonyms[0].start
    for t in range(0, int(4 * tau), 777):
        a.assemble_beacon(float(t))
    assert all(r.credential_fingerprint == r.pool_fingerprint for r in a.sign_log)


def test_rsu_signs_with_certificate(fast_ca):
    rsu = make_node(fast_ca, "r", role="rsu", device_id=5)
    v = make_node(fast_ca, "v", device_id=6)
    rsu.position, v.position = (0.0, 0.0), (300.0, 0.0)
    msg = rsu.assemble_beacon(100.0)
    assert isinstance(msg.credential, cc.Certificate)
    assert v.verify_beacon(msg, 100.0 + flight(300))
    with pytest.raises(NodeError):
        rsu.change_pseudonym()


def geocast_setup(ca):
    origin = make_node(ca, "o", device_id=1)
    origin.position = (1000.0, 0.0)
    msg = origin.geocast_originate(b"warn", Rect(-100, -100, 0, 100), 10.0)
    return origin, msg


def test_geocast_sequence_numbers(fast_ca):
    origin, m1 = geocast_setup(fast_ca)
    m2 = origin.geocast_originate(b"again", Rect(-100, -100, 0, 100), 20.0)
    assert m2.sequence_number == m1.sequence_number + 1
    assert GeocastMessage.from_bytes(m2.to_bytes()).data == b"again"


def test_geocast_greedy_next_hop(fast_ca):
    origin, msg = geocast_setup(fast_ca)
    fwd = make_node(fast_ca, "f", device_id=2)
    fwd.position = (1000.0, 0.0)
    stamp = GeoStamp(10.0, 0.0, 0.0)
    for i, x in enumerate((900.0, 700.0, 1100.0)):
        fwd.neighbor_table.put(bytes([i]) * 32, NeighborEntry((x, 0.0), 0, 0, stamp, 10.0, True))
    d = fwd.geocast_forward(msg, 10.0)
    assert d.action == "next_hop" and d.next_hop == bytes([1]) * 32
    assert d.message.newest_hop_valid()
    d = fwd.geocast_forward(msg, 10.0, exclude={bytes([1]) * 32})
    assert d.next_hop == bytes([0]) * 32


def test_geocast_local_maximum_and_rate_limit(fast_ca):
    origin, msg = geocast_setup(fast_ca)
    fwd = make_node(fast_ca, "f", device_id=2, rate_limit_per_s=3)
    fwd.position = (1000.0, 0.0)
    results = [fwd.geocast_forward(msg, 10.0 + i).reason for i in range(5)]
    assert results == ["local_maximum"] * 3 + ["rate_limited"] * 2


def test_geocast_distribute_once(fast_ca):
    origin, msg = geocast_setup(fast_ca)
    inside = make_node(fast_ca, "i", device_id=2)
    inside.position = (-50.0, 0.0)
    assert inside.geocast_forward(msg, 11.0).action == "distribute"
    first = inside.geocast_distribute(msg, 11.0)
    assert first.action == "rebroadcast" and first.message.newest_hop_valid()
    assert inside.geocast_distribute(first.message, 12.0).action == "suppress"


def test_geocast_rejects_tampered_hop(fast_ca):
    origin, msg = geocast_setup(fast_ca)
    inside = make_node(fast_ca, "i", device_id=2)
    inside.position = (-50.0, 0.0)
    hopped = inside.geocast_distribute(msg, 11.0).message
    wire = bytearray(hopped.to_bytes())
    wire[-1] ^= 1
    other = make_node(fast_ca, "j", device_id=3)
    assert other.geocast_distribute(GeocastMessage.from_bytes(bytes(wire)), 12.0).reason == "bad_signature"


def test_sliding_window_limiter():
    lim = SlidingWindowLimiter(10, 1000.0)
    assert sum(lim.allow(b"k", t) for t in range(0, 1000, 50)) == 10
    assert lim.allow(b"k", 1000.0)


def test_position_plausibility():
    rx = (0.0, 0.0)
    prior = GeoStamp(0.0, 0.0, 0.0)
    assert position_plausibility(GeoStamp(100.0, 100.0, 0.0), prior, rx).reason == "speed"
    assert position_plausibility(GeoStamp(100.0, 2000.0, 0.0), None, rx).reason == "out_of_range"
    twin = [GeoStamp(100.0, 50.0, 0.0)]
    assert position_plausibility(GeoStamp(100.0, 50.0, 0.0), None, rx, concurrent=twin).reason == "overlap"
    # 30 m/s along a road for 10 s, one claim per 100 ms
    stamps = [GeoStamp(t * 100.0, 3.0 * t, 0.0) for t in range(100)]
    assert all(position_plausibility(s, p, rx).plausible for p, s in zip(stamps, stamps[1:]))


def test_leave_round_quorum():
    t, e = b"T" * 32, [bytes([i]) * 32 for i in range(4)]
    events = mds_leave_round({e[0]: [t], e[1]: [t], e[2]: [t], e[3]: []}, quorum=3)
    assert len(events) == 1 and events[0].target == t and len(events[0].evaluators) == 3
    assert mds_leave_round({e[0]: [t], e[1]: [t], e[2]: [], e[3]: []}, quorum=3) == []
    assert mds_leave_round({t: [t], e[0]: [t], e[1]: [t]}, quorum=3) == []


def test_apply_crl_serials_and_bloom(fast_ca):
    a, b = pair(fast_ca)
    first = fast_ca.build_crl(0.0)
    second = fast_ca.build_crl(0.0)
    assert b.apply_crl(second) == "applied"
    assert b.apply_crl(first) == "stale"
    rogue = sign_bloom(bloom_build([a.fingerprint], serial=5), b"\x02" + b"\x00" * 32)
    assert b.apply_crl(rogue) == "rejected"
    bloom = fast_ca.compress_crl(fast_ca.build_crl(0.0))
    assert b.apply_crl(bloom) == "applied"
    assert b.verify_beacon(a.assemble_beacon(50.0), 50.0 + flight(200))
    fast_ca.revoke(a.fingerprint, "", 60.0)
    assert b.apply_crl(fast_ca.compress_crl(fast_ca.build_crl(60.0))) == "applied"
    assert b.verify_beacon(a.assemble_beacon(70.0), 70.0 + flight(200)).reason == "revoked"
    assert b.stats["bloom_rejections"] == 1


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1000), st.floats(-1.0, 1.0))
def test_neighbor_check_honest_within_skew(d, skew_us):
    stamp = GeoStamp(0.0, 0.0, 0.0)
    assert neighbor_check(stamp, (d, 0.0), flight(d) + skew_us / 1000.0, 1000.0, 450.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1000), st.floats(2.0, 100.0))
def test_neighbor_check_rejects_delayed_relay(d, delay_ms):
    stamp = GeoStamp(0.0, 0.0, 0.0)
    assert not neighbor_check(stamp, (d, 0.0), flight(d) + delay_ms, 1000.0, 450.0)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.binary(min_size=1, max_size=1),
                       st.sets(st.binary(min_size=1, max_size=1)), max_size=8), st.integers(1, 5))
def test_leave_events_have_quorum(accusations, quorum):
    for ev in mds_leave_round(accusations, quorum):
        assert len(ev.evaluators) >= quorum and ev.target not in ev.evaluators
        assert all(ev.target in accusations[e] for e in ev.evaluators)
