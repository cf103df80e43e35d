import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanetsec import crypto_core as cc
from vanetsec.errors import HsmError
from vanetsec.hsm import CommandKind, Hsm, HsmCommand, load_root_payload, parse_kill_ack

from .hsm_model import model_check

K1, K2 = cc.generate_keypair("root1"), cc.generate_keypair("root2")


def device(device_id=1):
    return Hsm(device_id, seed="t").init_device(None, K1.public_key, K2.public_key)


def command(kind, root, payload=b"", device_id=1, key=None):
    key = key or (K1 if root == 1 else K2)
    return HsmCommand.signed(kind, device_id, payload, root, key.private_key)


def test_init_rules():
    hsm = device()
    sig, ts = hsm.hsm_sign("long_term", b"x")
    assert cc.verify(hsm.long_term_public_key, cc.timestamped(b"x", ts), sig)
    with pytest.raises(HsmError, match="already initialized"):
        hsm.init_device(None, K1.public_key, K2.public_key)
    with pytest.raises(HsmError, match="distinct"):
        Hsm(2).init_device(None, K1.public_key, K1.public_key)
    with pytest.raises(HsmError, match="not initialized"):
        Hsm(3).hsm_sign("long_term", b"x")


def test_short_term_keys_expose_no_secrets():
    hsm = device()
    hsm.outputs_log = []
    pubs = hsm.generate_short_term_keys(10)
    assert len(pubs) == 10 and len(set(pubs)) == 10
    secrets = hsm.stored_private_keys()
    for out in hsm.outputs_log:
        assert not any(s[1:] in out for s in secrets)


def test_slot_activation_is_monotone():
    hsm = device()
    hsm.generate_short_term_keys(8)
    hsm.activate_slot(0, (0, 100))
    hsm.activate_slot(0, (0, 100))  # idempotent
    hsm.activate_slot(1, (0, 100))
    with pytest.raises(HsmError, match="slot retired"):
        hsm.activate_slot(0, (0, 100))
    hsm.activate_slot(7, (0, 100))
    with pytest.raises(HsmError, match="slot retired"):
        hsm.activate_slot(5, (0, 100))
    assert hsm.active == {"safety": 7}
    assert hsm.retired == set(range(7))


def test_signature_binds_clock():
    hsm = device()
    pub = hsm.generate_short_term_keys(1)[0]
    hsm.activate_slot(0, (0, 10_000))
    hsm.clock_tick(5000)
    sig, ts = hsm.hsm_sign("active", b"beacon")
    assert ts == 5000
    assert cc.verify(pub, cc.timestamped(b"beacon", 5000), sig)
    assert not cc.verify(pub, cc.timestamped(b"beacon", 5001), sig)
    hsm.clock_tick(5001)
    with pytest.raises(HsmError, match="pseudonym expired"):
        hsm.hsm_sign("active", b"beacon")


def test_decrypt_is_device_bound():
    a, b = device(1), device(2)
    blob = cc.encrypt(a.encryption_public_key, b"set")
    assert a.hsm_decrypt(blob) == b"set"
    with pytest.raises(HsmError, match="decryption failed"):
        b.hsm_decrypt(blob)


def test_kill_acks_then_erases():
    hsm = device()
    lt = hsm.long_term_public_key
    ack = hsm.process_command(command(CommandKind.KILL, 1))
    assert parse_kill_ack(ack, lt)[0] == 1
    assert parse_kill_ack(ack[:-1] + bytes([ack[-1] ^ 1]), lt) is None
    assert hsm.stored_private_keys() == []
    for op in (lambda: hsm.hsm_sign("long_term", b"x"), lambda: hsm.generate_short_term_keys(1),
               lambda: hsm.hsm_decrypt(b"\x00" * 80)):
        with pytest.raises(HsmError, match="device dead"):
            op()
    assert hsm.process_command(command(CommandKind.KILL, 1)) is None
    hsm.clock_tick(10)
    assert hsm.clock_ms == 0


def test_tamper_erases_without_ack():
    hsm = device()
    hsm.outputs_log = []
    hsm.tamper()
    assert hsm.killed and hsm.stored_private_keys() == [] and hsm.outputs_log == []
    with pytest.raises(HsmError, match="device dead"):
        hsm.hsm_sign("long_term", b"x")
    assert hsm.process_command(command(CommandKind.KILL, 1)) is None


def test_root_update_sequence():
    hsm = device()
    with pytest.raises(HsmError, match="forbidden"):
        hsm.process_command(command(CommandKind.REVOKE_ROOT_K1, 2))
    hsm.process_command(command(CommandKind.REVOKE_ROOT_K1, 1))
    for root in (1, 2):
        with pytest.raises(HsmError):
            hsm.process_command(command(CommandKind.REVOKE_ROOT_K2, root))
    with pytest.raises(HsmError, match="root revoked"):
        hsm.process_command(command(CommandKind.KILL, 1))
    k1b = cc.generate_keypair("root1-b")
    hsm.process_command(command(CommandKind.LOAD_ROOT, 2, load_root_payload(1, k1b.public_key)))
    ack = hsm.process_command(command(CommandKind.KILL, 1, key=k1b))
    assert ack is not None and hsm.killed


def test_unauthenticated_and_misaddressed_commands():
    hsm = device()
    rogue = cc.generate_keypair("rogue")
    with pytest.raises(HsmError, match="unauthenticated"):
        hsm.process_command(command(CommandKind.KILL, 1, key=rogue))
    with pytest.raises(HsmError, match="wrong device"):
        hsm.process_command(command(CommandKind.KILL, 1, device_id=9))
    assert not hsm.killed


def test_clock_sync_never_moves_backwards():
    hsm = device()
    hsm.clock_tick(10)
    assert hsm.clock_ms == 10
    hsm.process_command(command(CommandKind.CLOCK_SYNC, 1, struct.pack("<d", 3.0)))
    assert hsm.clock_ms == 10
    hsm.process_command(command(CommandKind.CLOCK_SYNC, 1, struct.pack("<d", 30.0)))
    assert hsm.clock_ms == 30


def test_long_term_key_update():
    hsm = device()
    old = hsm.long_term_public_key
    new = hsm.process_command(command(CommandKind.UPDATE_LONG_TERM_KEY, 1, b"epoch-2"))
    assert new == hsm.long_term_public_key != old


def test_exhaustive_command_sequences_depth_4():
    explored, violations = model_check(depth=4)
    assert explored > 10
    assert violations == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["activate", "sign", "tick"]), st.integers(0, 5)), max_size=30))
def test_active_slot_never_retired(ops):
    hsm = device()
    hsm.generate_short_term_keys(6)
    for op, arg in ops:
        try:
            if op == "activate":
                hsm.activate_slot(arg, (0, 10**9))
            elif op == "sign":
                hsm.hsm_sign("active", b"m")
            else:
                hsm.clock_tick(arg)
        except HsmError:
            pass
        assert all(i not in hsm.retired for i in hsm.active.values())
        assert all(hsm._slots[i].private_key is None for i in hsm.retired)
