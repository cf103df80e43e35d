import math
import os
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanetsec import crypto_core as cc
from vanetsec.authority import CertificationAuthority, Crl
from vanetsec.errors import RevocationError
from vanetsec.hsm import CommandKind, Hsm
from vanetsec.revocation import (
    CrlReassembler,
    KillSession,
    KillState,
    Pending,
    RdsChannel,
    bloom_build,
    bloom_parameters,
    bloom_query,
    bloom_query_many,
    encode_crl_pieces,
    reassemble,
    rsu_broadcast_schedule,
    v2v_crl_relay,
)
from vanetsec.revocation.erasure import CauchyCode, gf_inv, gf_mul
from vanetsec.revocation.pieces import bitmap_from_indices


def clmul_mod(a, b, poly=0x1100B):
    """Schoolbook GF(2^16) product, independent of the log tables."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & 0x10000:
            a ^= poly
    return r


@settings(max_examples=200)
@given(st.integers(0, 0xFFFF), st.integers(0, 0xFFFF))
def test_gf_mul_matches_schoolbook(a, b):
    assert int(gf_mul(a, b)) == clmul_mod(a, b)


@settings(max_examples=100)
@given(st.integers(1, 0xFFFF))
def test_gf_inverse(a):
    assert clmul_mod(a, int(gf_inv(a))) == 1


def synthetic_ca(size_bytes):
    ca = CertificationAuthority("A", seed="crl", scheme="hmac")
    header = len(ca.build_crl(0).to_bytes())
    rng = random.Random(1)
    n = math.ceil((size_bytes - header) / cc.FINGERPRINT_LEN)
    ca.load_revocations({rng.randbytes(cc.FINGERPRINT_LEN): 10**12 for _ in range(n)})
    return ca


@pytest.fixture(scope="module")
def big():
    ca = synthetic_ca(300_000)
    crl = ca.build_crl(0)
    return ca, crl, encode_crl_pieces(crl, ca.ca_keypair.private_key)


def test_300kb_piece_counts(big):
    ca, crl, pieces = big
    assert len(crl.entries) == 18747
    # 300 KB in 512-byte pieces: k = 586, n = ceil(1.5 k) = 879
    assert len(pieces) == 879
    assert all(p.verify(ca.public_key) for p in pieces[:5])


def test_any_k_pieces_decode(big):
    ca, crl, pieces = big
    rng = random.Random(5)
    parity_heavy = pieces[586:] + rng.sample(pieces[:586], 586 - 293)
    for subset in (rng.sample(pieces, 586), parity_heavy):
        rng.shuffle(subset)
        out = reassemble(subset, "A", ca.public_key)
        assert isinstance(out, Crl) and out.entries == crl.entries


def test_one_short_is_pending(big):
    ca, _, pieces = big
    r = CrlReassembler("A", ca.public_key)
    for p in pieces[:585]:
        assert r.add(p)
    assert not r.add(pieces[0])
    assert r.status() == Pending(585, 586)


def test_tampered_piece_rejected(big):
    ca, _, pieces = big
    p = pieces[3]
    bad = type(p)(p.serial, p.index, p.total, bytes([p.payload[0] ^ 1]) + p.payload[1:], p.signature)
    r = CrlReassembler("A", ca.public_key)
    assert not r.add(bad) and r.rejected == 1
    assert type(p).from_bytes(p.to_bytes()) == p


def test_empty_crl_is_one_piece():
    ca = CertificationAuthority("A", seed="e", scheme="hmac")
    pieces = encode_crl_pieces(ca.build_crl(0), ca.ca_keypair.private_key)
    assert len(pieces) == 2  # k = 1, ceil(1.5) = 2
    assert reassemble(pieces[1:], "A", ca.public_key).entries == ()


def test_bad_code_parameters():
    with pytest.raises(RevocationError):
        CauchyCode(0, 3)
    ca = CertificationAuthority("A", seed="e", scheme="hmac")
    with pytest.raises(RevocationError):
        encode_crl_pieces(ca.build_crl(0), ca.ca_keypair.private_key, piece_payload_bytes=511)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_erasure_roundtrip(k, extra, data):
    n = k + extra
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    msg = rng.integers(0, 1 << 16, size=(k, 4))
    coded = CauchyCode(k, n).encode(msg)
    keep = data.draw(st.permutations(range(n)))[:k]
    out = CauchyCode(k, n).decode({i: coded[i] for i in keep})
    assert np.array_equal(out, msg)


def test_broadcast_cadence(big):
    _, _, pieces = big
    wire = max(p.wire_size for p in pieces)
    cadence = wire * 8 / 2000 * 1000
    sched = rsu_broadcast_schedule(pieces, 2000, now=0.0, count=40, offset=0)
    assert sched[1][0] - sched[0][0] == pytest.approx(cadence)
    assert cadence == pytest.approx(2216.0)
    in_minute = sum(t < 60_000 for t, _ in sched)
    assert in_minute == 28
    assert [p.index for _, p in sched[:3]] == [0, 1, 2]


def test_v2v_relay_fills_gaps(big):
    _, _, pieces = big
    held = {i: pieces[i] for i in range(10)}
    bitmap = bitmap_from_indices(set(range(10)) - {3, 7}, 879)
    assert [p.index for p in v2v_crl_relay(held, bitmap, 879)] == [3, 7]
    assert [p.index for p in v2v_crl_relay(held, bitmap, 879, max_pieces=1)] == [3]


def test_bloom_parameters():
    # m = ceil(-n ln p / ln^2 2), k = round(m/n ln 2)
    assert bloom_parameters(10_000, 0.001) == (143776, 10)


def test_bloom_no_false_negatives_and_fp_rate():
    members = [os.urandom(16) for _ in range(10_000)]
    bloom = bloom_build(members, 0.001)
    assert bloom_query_many(bloom, members).all()
    assert all(bloom_query(bloom, fp) for fp in members[:200])
    probes = [os.urandom(16) for _ in range(100_000)]
    rate = bloom_query_many(bloom, probes).mean()
    assert 0.0005 <= rate <= 0.002
    assert bloom.size_bytes == pytest.approx(143776 / 8, abs=16)


@settings(max_examples=30)
@given(st.lists(st.binary(min_size=16, max_size=16), max_size=50))
def test_bloom_members_always_found(fps):
    bloom = bloom_build(fps, 0.01)
    assert all(fp in bloom for fp in fps)
    assert list(bloom_query_many(bloom, fps)) == [True] * len(fps)


def kill_fixture():
    ca = CertificationAuthority("A", seed="k", scheme="hmac")
    hsm = Hsm(9, seed="k", scheme="hmac").init_device(None, ca.root_public_key(1), ca.root_public_key(2))
    cmd = ca.issue_hsm_command(CommandKind.KILL, 9)
    return hsm, KillSession(9, cmd, hsm.long_term_public_key, timeout_ms=1000.0, rds_repeat_limit=2)


def test_kill_acknowledged_via_rsu():
    hsm, s = kill_fixture()
    assert s.start(0.0, "rsu1") == [("send_rsu", "rsu1", s.command)]
    ack = hsm.process_command(s.command)
    assert not s.on_ack(b"\x00" * len(ack), 10.0)
    assert s.on_ack(ack, 20.0) and s.state == KillState.ACK_RECEIVED
    assert s.on_tick(5000.0) == []


def test_kill_falls_back_to_rds_then_fails():
    _, s = kill_fixture()
    s.start(0.0, "rsu1")
    assert s.on_tick(999.0) == []
    assert s.on_tick(1000.0) == [("broadcast_rds", s.command)]
    assert s.state == KillState.RDS_FALLBACK
    assert s.on_tick(2000.0) == [("broadcast_rds", s.command)]
    assert s.on_tick(3000.0) == [] and s.state == KillState.FAILED
    assert s.rds_sent == 2


def test_rds_channel_serialises():
    ch = RdsChannel()
    first = ch.transmit(0.0, 119)
    assert first == pytest.approx(119 * 8 / 1187.5 * 1000 + 1000)
    assert ch.transmit(0.0, 119) == pytest.approx(first + 119 * 8 / 1187.5 * 1000)
