"""Peer validation policy matrix and the loopback mTLS echo harness."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from types import SimpleNamespace

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from iotpki.acme.ca import TestCaState
from iotpki.certs import build_csr, cert_to_pem, generate_key
from iotpki.identity import DeviceSecret, DeviceUrn, VendorNamespace, derive_device_uuid, format_urn
from iotpki.peer_auth import (
    EchoServer,
    HandshakeRejected,
    NoIdentity,
    PeerVerdict,
    RejectReason,
    TrustContext,
    echo_once,
    extract_urn,
    mtls_echo,
    validate_peer,
)
from iotpki.revocation import build_filter

NOW = datetime(2026, 6, 1, tzinfo=timezone.utc)
VENDOR_A = VendorNamespace("vendor-a.test", "camera")
VENDOR_B = VendorNamespace("vendor-b.test", "sensor")


def fixed_clock(at: datetime):
    return lambda: at


@pytest.fixture(scope="module")
def ca_state() -> TestCaState:
    return TestCaState(clock=fixed_clock(NOW), validity=timedelta(days=90), weekly_order_quota=10**9)


def make_bundle(ca: TestCaState, ns: VendorNamespace, tag: str, san: str | None = None):
    urn = DeviceUrn(derive_device_uuid(ns, DeviceSecret(f"peer-auth-secret-{tag}".encode())), ns)
    name = san if san is not None else str(urn)
    key = generate_key("p256")
    serial, cert = ca.issue(build_csr(key, name))
    return SimpleNamespace(
        urn=urn,
        private_key=key,
        certificate_chain=cert_to_pem(cert) + cert_to_pem(ca.root_cert),
        leaf=cert,
        serial=serial,
    )


def trust_for(ca: TestCaState, filters=None, at: datetime = NOW) -> TrustContext:
    return TrustContext(roots=(ca.root_cert,), filters=filters or {}, clock=fixed_clock(at))


class TestExtractUrn:
    def test_san_urn_extracted(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "x1")
        urn = extract_urn(bundle.leaf)
        assert urn == bundle.urn

    def test_time_based_uuid_subdomain_parses(self, ca_state):
        name = "c69f00ac-532c-11ee-87f2-079e7eb2f068.camera.vendor.com"
        bundle = make_bundle(ca_state, VENDOR_A, "x2", san=name)
        assert str(extract_urn(bundle.leaf)) == name

    def test_cn_fallback_when_no_san(self, ca_state):
        key = generate_key("p256")
        urn_str = format_urn(
            derive_device_uuid(VENDOR_A, DeviceSecret(b"cn-fallback-secret")), VENDOR_A
        )
        csr = (
            x509.CertificateSigningRequestBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, urn_str)]))
            .sign(key, hashes.SHA256())
        )
        _, cert = ca_state.issue(csr)
        assert str(extract_urn(cert)) == urn_str

    def test_no_identity_at_all(self, ca_state):
        key = ec.generate_private_key(ec.SECP256R1())
        csr = (
            x509.CertificateSigningRequestBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.ORGANIZATION_NAME, "acme")]))
            .sign(key, hashes.SHA256())
        )
        _, cert = ca_state.issue(csr)
        with pytest.raises(NoIdentity):
            extract_urn(cert)


class TestValidatePeerMatrix:
    """Each of the five checks violated in isolation, plus the accept path."""

    def test_valid_peer_accepted(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m1")
        verdict = validate_peer([bundle.leaf], trust_for(ca_state))
        assert verdict.accepted
        assert verdict.urn == bundle.urn
        assert verdict.reject_reason is None

    def test_untrusted_chain_rejected(self, ca_state):
        other_ca = TestCaState(
            clock=fixed_clock(NOW), validity=timedelta(days=90), weekly_order_quota=10**9
        )
        foreign = make_bundle(other_ca, VENDOR_A, "m2")
        verdict = validate_peer([foreign.leaf], trust_for(ca_state))
        assert verdict == PeerVerdict(accepted=False, reject_reason=RejectReason.CHAIN)

    def test_expired_rejected(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m3")
        late = trust_for(ca_state, at=NOW + timedelta(days=120))
        verdict = validate_peer([bundle.leaf], late)
        assert verdict.reject_reason is RejectReason.EXPIRED

    def test_not_yet_valid_rejected(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m4")
        early = trust_for(ca_state, at=NOW - timedelta(days=1))
        verdict = validate_peer([bundle.leaf], early)
        assert verdict.reject_reason is RejectReason.NOT_YET_VALID

    def test_non_urn_san_rejected_malformed(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m5", san="www.example.org")
        verdict = validate_peer([bundle.leaf], trust_for(ca_state))
        assert verdict.reject_reason is RejectReason.MALFORMED

    def test_wrong_vendor_rejected_san_mismatch(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m6")
        verdict = validate_peer([bundle.leaf], trust_for(ca_state), expected_vendor="other.org")
        assert verdict.reject_reason is RejectReason.SAN_MISMATCH

    def test_revoked_rejected(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m7")
        filt = build_filter({bundle.serial}, ca_state.issued_serials(), "vendor-a.test", 1)
        ctx = trust_for(ca_state, filters={"vendor-a.test": filt})
        verdict = validate_peer([bundle.leaf], ctx)
        assert verdict.reject_reason is RejectReason.REVOKED

    def test_missing_filter_fails_open(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "m8")
        verdict = validate_peer([bundle.leaf], trust_for(ca_state, filters={}))
        assert verdict.accepted

    def test_cross_vendor_accept_with_filter(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_B, "m9")
        filt = build_filter(set(), ca_state.issued_serials(), "vendor-b.test", 1)
        ctx = trust_for(ca_state, filters={"vendor-b.test": filt})
        verdict = validate_peer([bundle.leaf], ctx, expected_vendor="vendor-b.test")
        assert verdict.accepted
        assert verdict.urn.namespace.root_domain == "vendor-b.test"


class TestCheckOrdering:
    def test_expired_and_revoked_reports_expired(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "o1")
        filt = build_filter({bundle.serial}, ca_state.issued_serials(), "vendor-a.test", 1)
        ctx = trust_for(ca_state, filters={"vendor-a.test": filt}, at=NOW + timedelta(days=120))
        assert validate_peer([bundle.leaf], ctx).reject_reason is RejectReason.EXPIRED

    def test_bad_chain_beats_everything(self, ca_state):
        other_ca = TestCaState(
            clock=fixed_clock(NOW), validity=timedelta(days=90), weekly_order_quota=10**9
        )
        bundle = make_bundle(other_ca, VENDOR_A, "o2", san="www.example.org")
        ctx = trust_for(ca_state, at=NOW + timedelta(days=365))
        assert validate_peer([bundle.leaf], ctx).reject_reason is RejectReason.CHAIN

    def test_malformed_beats_revocation(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "o3", san="www.example.org")
        filt = build_filter({bundle.serial}, ca_state.issued_serials(), "vendor-a.test", 1)
        ctx = trust_for(ca_state, filters={"vendor-a.test": filt})
        assert validate_peer([bundle.leaf], ctx).reject_reason is RejectReason.MALFORMED

    def test_validate_is_pure(self, ca_state):
        bundle = make_bundle(ca_state, VENDOR_A, "o4")
        ctx = trust_for(ca_state)
        verdicts = {validate_peer([bundle.leaf], ctx).accepted for _ in range(10)}
        assert verdicts == {True}

    def test_empty_chain_is_chain_reject(self, ca_state):
        assert validate_peer([], trust_for(ca_state)).reject_reason is RejectReason.CHAIN


class TestEchoHarness:
    def test_cross_vendor_echo_256_bytes(self, ca_state):
        server = make_bundle(ca_state, VENDOR_A, "e1")
        client = make_bundle(ca_state, VENDOR_B, "e2")
        trust = trust_for(ca_state)
        payload = bytes(range(256))
        result = mtls_echo(server, client, trust, payload)
        assert result.payload_echoed == payload
        assert result.client_verdict.accepted
        assert result.server_verdict.accepted
        assert result.server_verdict.urn == client.urn
        assert result.handshake_ms > 0

    def test_revoked_client_rejected_by_server(self, ca_state):
        server = make_bundle(ca_state, VENDOR_A, "e3")
        client = make_bundle(ca_state, VENDOR_B, "e4")
        filt = build_filter({client.serial}, ca_state.issued_serials(), "vendor-b.test", 2)
        trust = trust_for(ca_state, filters={"vendor-b.test": filt})
        with pytest.raises(HandshakeRejected) as excinfo:
            mtls_echo(server, client, trust, b"payload")
        assert excinfo.value.side == "server"
        assert excinfo.value.verdict.reject_reason is RejectReason.REVOKED

    def test_revoked_server_rejected_by_client(self, ca_state):
        server = make_bundle(ca_state, VENDOR_A, "e5")
        client = make_bundle(ca_state, VENDOR_B, "e6")
        filt = build_filter({server.serial}, ca_state.issued_serials(), "vendor-a.test", 3)
        trust = trust_for(ca_state, filters={"vendor-a.test": filt})
        with pytest.raises(HandshakeRejected) as excinfo:
            mtls_echo(server, client, trust, b"payload")
        assert excinfo.value.side == "client"
        assert excinfo.value.verdict.reject_reason is RejectReason.REVOKED

    def test_role_swap_symmetry(self, ca_state):
        a = make_bundle(ca_state, VENDOR_A, "e7")
        b = make_bundle(ca_state, VENDOR_B, "e8")
        trust = trust_for(ca_state)
        r1 = mtls_echo(a, b, trust, b"ping")
        r2 = mtls_echo(b, a, trust, b"ping")
        assert r1.payload_echoed == r2.payload_echoed == b"ping"

        filt = build_filter({a.serial}, ca_state.issued_serials(), "vendor-a.test", 4)
        trust_rev = trust_for(ca_state, filters={"vendor-a.test": filt})
        with pytest.raises(HandshakeRejected):
            mtls_echo(a, b, trust_rev, b"ping")
        with pytest.raises(HandshakeRejected):
            mtls_echo(b, a, trust_rev, b"ping")

    def test_foreign_root_client_fails_tls_handshake(self, ca_state):
        other_ca = TestCaState(
            clock=fixed_clock(NOW), validity=timedelta(days=90), weekly_order_quota=10**9
        )
        server = make_bundle(ca_state, VENDOR_A, "e9")
        foreign_client = make_bundle(other_ca, VENDOR_B, "e10")
        trust = trust_for(ca_state)
        with pytest.raises(HandshakeRejected):
            mtls_echo(server, foreign_client, trust, b"x")

    def test_session_is_tls13(self, ca_state):
        import socket
        import ssl as ssl_mod
        import struct as struct_mod

        server_bundle = make_bundle(ca_state, VENDOR_A, "e11")
        client_bundle = make_bundle(ca_state, VENDOR_B, "e12")
        trust = trust_for(ca_state)
        with EchoServer(server_bundle, trust) as server:
            from iotpki.certs import key_to_pem, load_cert_chain_in_memory

            ctx = ssl_mod.SSLContext(ssl_mod.PROTOCOL_TLS_CLIENT)
            ctx.minimum_version = ssl_mod.TLSVersion.TLSv1_3
            ctx.check_hostname = False
            ctx.verify_mode = ssl_mod.CERT_REQUIRED
            load_cert_chain_in_memory(
                ctx, client_bundle.certificate_chain, key_to_pem(client_bundle.private_key)
            )
            ctx.load_verify_locations(cadata=cert_to_pem(ca_state.root_cert))
            with socket.create_connection(server.address, timeout=5) as raw:
                with ctx.wrap_socket(raw, server_hostname="peer") as tls:
                    assert tls.version() == "TLSv1.3"
                    tls.sendall(struct_mod.pack("!I", 2) + b"hi")
                    assert tls.recv(2) == b"OK"

    def test_concurrent_clients(self, ca_state):
        import concurrent.futures

        server_bundle = make_bundle(ca_state, VENDOR_A, "e13")
        clients = [make_bundle(ca_state, VENDOR_B, f"e14-{i}") for i in range(8)]
        trust = trust_for(ca_state)
        with EchoServer(server_bundle, trust) as server:
            def one(bundle):
                return echo_once(server.address, bundle, trust, b"parallel").payload_echoed

            with concurrent.futures.ThreadPoolExecutor(8) as pool:
                results = list(pool.map(one, clients))
        assert results == [b"parallel"] * 8
