import pytest

from vanetsec import crypto_core as cc
from vanetsec.authority import AuthProof, CertificationAuthority, refill_request_bytes
from vanetsec.hsm import Hsm
from vanetsec.node import Node, NodeParams


@pytest.fixture
def ca():
    return CertificationAuthority("A", seed="test-A", scheme="ed25519", tau_ms=60_000)


@pytest.fixture
def fast_ca():
    return CertificationAuthority("A", seed="test-A", scheme="hmac", tau_ms=60_000)


def make_node(ca, node_id="v1", role="private-vehicle", device_id=1, now=0.0, set_size=10, **params):
    node = Node.provision(node_id, role, ca, device_id, now=now, seed=("test", node_id),
                          params=NodeParams(set_size=set_size, **params))
    if not node.uses_certificate:
        node.pseudonym_refill(ca, now)
    return node


def registered_vehicle(ca, long_term_id="V1", device_id=7, now=0.0):
    """An initialised HSM registered with ``ca``; returns (hsm, certificate)."""
    hsm = Hsm(device_id, seed=("fixture", long_term_id)).init_device(
        None, ca.root_public_key(1), ca.root_public_key(2))
    hsm.clock_tick(now)
    cert = ca.register_node(long_term_id, hsm.long_term_public_key, ["private-vehicle"], now,
                            encryption_key=hsm.encryption_public_key)
    return hsm, cert


def auth_proof(hsm, long_term_id, keys, encryption_key=b""):
    sig, ts = hsm.hsm_sign("long_term", refill_request_bytes(long_term_id, keys, encryption_key))
    return AuthProof(sig, ts)


def issue(ca, hsm, long_term_id, count=10, now=0.0):
    keys = hsm.generate_short_term_keys(count)
    return ca.issue_pseudonym_set(long_term_id, auth_proof(hsm, long_term_id, keys), keys, now), keys


# -- acceptance reporting ------------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or report.failed:
        prior = _criteria.get(number, ("PASS", title))[0]
        verdict = "PASS" if report.passed and prior == "PASS" else "FAIL"
        _criteria[number] = (verdict, title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
