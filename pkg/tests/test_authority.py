import itertools

import pytest

from vanetsec import crypto_core as cc
from vanetsec.authority import (
    AuthProof,
    CertificationAuthority,
    Crl,
    EvictionEvent,
    EvictionReport,
    PseudonymSet,
    refill_request_bytes,
)
from vanetsec.errors import AuthorityError
from vanetsec.hsm import CommandKind, Hsm, load_root_payload

from .conftest import auth_proof, issue, registered_vehicle


def test_register_node_certificate(ca):
    hsm, cert = registered_vehicle(ca)
    assert "private-vehicle" in cert.attributes
    assert cert.subject_id == "V1"
    with pytest.raises(AuthorityError):
        ca.register_node("V1", hsm.long_term_public_key, ["private-vehicle"], 0)
    rsu = ca.register_node("R1", cc.generate_keypair("r1").public_key, ["rsu"], 0)
    assert cc.verify_certificate(rsu, ca.public_key, 1000)
    with pytest.raises(AuthorityError):
        ca.register_node("X", b"k", ["pilot"], 0)


def test_pseudonym_lifetimes_tile_without_overlap(ca):
    hsm, _ = registered_vehicle(ca)
    pset, keys = issue(ca, hsm, "V1", 10)
    ps = pset.pseudonyms
    assert [p.start for p in ps] == [60_000 * j for j in range(10)]
    assert all(p.end - p.start == 60_000 for p in ps)
    for a, b in itertools.combinations(ps, 2):
        # inclusive ends touch only at the hand-over instant
        assert a.end <= b.start or b.end <= a.start
    assert [p.public_key for p in ps] == keys
    assert all(cc.verify_certificate(p, ca.public_key, p.start) for p in ps)
    assert b"V1" not in pset.to_bytes()
    assert PseudonymSet.from_bytes(pset.to_bytes()).pseudonyms == ps


def test_follow_up_set_continues_after_previous(ca):
    hsm, _ = registered_vehicle(ca)
    first, _ = issue(ca, hsm, "V1", 3)
    second, _ = issue(ca, hsm, "V1", 3, now=1000)
    assert second.start == first.end
    assert second.set_index == first.set_index + 1


def test_refill_requires_valid_proof(ca):
    hsm, _ = registered_vehicle(ca)
    keys = hsm.generate_short_term_keys(2)
    bad = AuthProof(b"\x00" * 64, 0.0)
    with pytest.raises(AuthorityError, match="authentication failed"):
        ca.issue_pseudonym_set("V1", bad, keys, 0)
    stale = auth_proof(hsm, "V1", keys)
    with pytest.raises(AuthorityError, match="authentication failed"):
        ca.issue_pseudonym_set("V1", stale, keys, 10 * 60_000)
    with pytest.raises(AuthorityError, match="not authorized"):
        ca.issue_pseudonym_set("nobody", stale, keys, 0)


def test_revoked_vehicle_cannot_refill(ca):
    hsm, _ = registered_vehicle(ca)
    ca.revoke_identity("V1")
    with pytest.raises(AuthorityError):
        issue(ca, hsm, "V1", 2)


def test_sealed_set_decrypts_only_in_requesting_hsm(ca):
    hsm, _ = registered_vehicle(ca)
    other, _ = registered_vehicle(ca, "V2", device_id=8)
    keys = hsm.generate_short_term_keys(2)
    blob = ca.issue_pseudonym_set_sealed("V1", auth_proof(hsm, "V1", keys), keys, 0)
    assert len(PseudonymSet.from_bytes(hsm.hsm_decrypt(blob)).pseudonyms) == 2
    with pytest.raises(Exception, match="decryption failed"):
        other.hsm_decrypt(blob)


def test_resolution_requires_token(ca):
    hsm, _ = registered_vehicle(ca)
    pset, _ = issue(ca, hsm, "V1", 5)
    token = ca.issue_authorization("police", 0)
    assert ca.resolve_pseudonym(cc.fingerprint(pset.pseudonyms[2]), token) == "V1"
    with pytest.raises(AuthorityError, match="not issued here"):
        ca.resolve_pseudonym(b"\x11" * 16, token)
    with pytest.raises(AuthorityError, match="forbidden"):
        ca.resolve_pseudonym(cc.fingerprint(pset.pseudonyms[2]), None)
    other = CertificationAuthority("B", seed="b")
    with pytest.raises(AuthorityError, match="forbidden"):
        ca.resolve_pseudonym(cc.fingerprint(pset.pseudonyms[2]), other.issue_authorization("x", 0))


def test_foreigner_pseudonyms(ca):
    ca_b = CertificationAuthority("B", seed="test-B")
    ca.cross_certify(ca_b)
    hsm, cert = registered_vehicle(ca)
    keys = hsm.generate_short_term_keys(3)
    enc = hsm.encryption_public_key
    proof = auth_proof(hsm, "V1", keys, enc)
    pset = ca_b.issue_foreigner_pseudonyms([cert], proof, keys, 0, enc)
    assert {p.ca_id for p in pset.pseudonyms} == {"B"}
    assert all(cc.verify_certificate(p, ca_b.public_key, p.start) for p in pset.pseudonyms)
    token = ca_b.issue_authorization("audit", 0)
    assert ca_b.resolve_pseudonym(cc.fingerprint(pset.pseudonyms[0]), token) == "A/V1"

    lonely = CertificationAuthority("C", seed="c")
    with pytest.raises(AuthorityError, match="no cross-certification"):
        lonely.issue_foreigner_pseudonyms([cert], proof, keys, 0, enc)


def test_crl_contents_and_pruning(ca):
    hsm, cert = registered_vehicle(ca)
    pset, _ = issue(ca, hsm, "V1", 3)
    fps = [cc.fingerprint(p) for p in pset.pseudonyms]
    empty = ca.build_crl(0)
    assert empty.entries == () and empty.verify(ca.public_key)
    for fp in fps:
        ca.revoke(fp)
    assert len(ca.build_crl(0).entries) == 3
    # first pseudonym ends at 60 s: gone from lists issued after that
    later = ca.build_crl(60_001)
    assert len(later.entries) == 2 and fps[0] not in later.entries
    ca.revoke(cc.fingerprint(cert))
    assert cc.fingerprint(cert) in ca.build_crl(60_001).entries
    with pytest.raises(AuthorityError):
        ca.revoke(b"\x01" * 16)


def test_revoking_expired_pseudonym_is_accepted_but_pruned(ca):
    hsm, _ = registered_vehicle(ca)
    pset, _ = issue(ca, hsm, "V1", 1)
    fp = cc.fingerprint(pset.pseudonyms[0])
    assert fp in ca.revoke(fp, now=10**6)
    assert fp not in ca.build_crl(10**6).entries


def test_crl_wire_roundtrip_and_tamper(ca):
    ca.load_revocations({bytes([i]) * 16: 10**9 for i in range(5)})
    crl = ca.build_crl(0)
    back = Crl.from_bytes(crl.to_bytes(), "A")
    assert back == crl and back.verify(ca.public_key)
    swapped = Crl("A", crl.serial, crl.issued_at, crl.entries[::-1], crl.signature)
    assert not swapped.verify(ca.public_key)
    assert ca.build_crl(0).serial == crl.serial + 1


def _eviction_fixture(ca, n_evaluators=3):
    target_hsm, _ = registered_vehicle(ca)
    tset, _ = issue(ca, target_hsm, "V1", 5)
    evaluators = []
    for i in range(n_evaluators):
        h, _ = registered_vehicle(ca, f"E{i}", device_id=100 + i)
        s, keys = issue(ca, h, f"E{i}", 1)
        h.activate_slot(h.slot_index(keys[0]), (s.pseudonyms[0].start, s.pseudonyms[0].end))
        evaluators.append((h, s.pseudonyms[0]))
    return tset, evaluators


def _reports(event, evaluators):
    out = []
    for h, p in evaluators:
        sig, ts = h.hsm_sign("active", event.tbs_bytes())
        out.append(EvictionReport(event, p, sig, ts))
    return out


def test_eviction_threshold_and_dedup(ca):
    tset, evaluators = _eviction_fixture(ca)
    fps = tuple(cc.fingerprint(p) for _, p in evaluators)
    target = cc.fingerprint(tset.pseudonyms[0])
    events = [EvictionEvent(target, fps, 1000.0 * k) for k in (1, 5, 9)]
    reps = _reports(events[0], evaluators)
    assert ca.record_eviction_report(reps) is None
    for _ in range(5):  # replay of the same event
        assert ca.record_eviction_report(reps) is None
    assert ca.eviction_reports["V1"] == 1
    assert ca.record_eviction_report(_reports(events[1], evaluators)) is None
    revoked = ca.record_eviction_report(_reports(events[2], evaluators))
    assert revoked and target in revoked
    assert ca.is_identity_revoked("V1")


def test_eviction_needs_quorum_of_valid_reports(ca):
    tset, evaluators = _eviction_fixture(ca)
    fps = tuple(cc.fingerprint(p) for _, p in evaluators)
    event = EvictionEvent(cc.fingerprint(tset.pseudonyms[0]), fps, 0.0)
    reps = _reports(event, evaluators)
    assert ca.record_eviction_report(reps[:2]) is None
    assert "V1" not in ca.eviction_reports
    forged = [EvictionReport(r.event, r.credential, b"\x00" * 64, r.timestamp) for r in reps]
    assert ca.record_eviction_report(forged) is None
    assert "V1" not in ca.eviction_reports


def test_hsm_commands_follow_root_rules(ca):
    hsm = Hsm(3, seed="x").init_device(None, ca.root_public_key(1), ca.root_public_key(2))
    with pytest.raises(Exception, match="forbidden"):
        hsm.process_command(ca.issue_hsm_command("revoke_root_k1", 3, signing_root=2))
    assert hsm.process_command(ca.issue_hsm_command(CommandKind.REVOKE_ROOT_K1, 3, signing_root=1)) is None
    new_k1 = ca.replace_root(1)
    load = ca.issue_hsm_command(CommandKind.LOAD_ROOT, 3, load_root_payload(1, new_k1), signing_root=2)
    assert hsm.process_command(load) is None
    assert hsm.root_pub_keys[1] == new_k1
    ack = hsm.process_command(ca.issue_hsm_command(CommandKind.KILL, 3, signing_root=1))
    assert ack is not None and hsm.killed


def test_keystore_roundtrip(ca):
    hsm, _ = registered_vehicle(ca)
    pset, _ = issue(ca, hsm, "V1", 2)
    ca.revoke(cc.fingerprint(pset.pseudonyms[0]))
    back = CertificationAuthority.from_dict(ca.to_dict())
    assert back.to_dict() == ca.to_dict()
    assert back.public_key == ca.public_key
    assert back.build_crl(0).entries == ca.build_crl(0).entries
