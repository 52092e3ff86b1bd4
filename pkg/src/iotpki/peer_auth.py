"""Relying-party validation for device-to-device mTLS.

The policy lives in pure functions: chain verification to a trusted
root, validity window, URN extraction from SAN/CN, vendor matching, and
a revocation-filter lookup, applied in that fixed order so the reject
reason is deterministic. The echo harness wires the same policy into a
real TLS 1.3 session over loopback with mandatory client certificates,
so both the protocol layer and the policy layer must agree before any
payload flows.
"""

from __future__ import annotations

import json
import logging
import socket
import ssl
import struct
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Mapping

from cryptography import x509
from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.x509.oid import NameOID

from .certs import cert_to_pem, key_to_pem, load_cert_chain_in_memory, san_dns_names, split_pem_chain
from .errors import BindFailure, IotPkiError
from .identity import DeviceUrn, MalformedUrn, parse_urn
from .revocation import RevocationFilter, query

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20


class NoIdentity(IotPkiError):
    pass


class HandshakeRejected(IotPkiError):
    def __init__(self, side: str, verdict: "PeerVerdict") -> None:
        super().__init__(f"{side} rejected peer: {verdict.reject_reason}")
        self.side = side
        self.verdict = verdict


class RejectReason(str, Enum):
    CHAIN = "chain"
    EXPIRED = "expired"
    NOT_YET_VALID = "not_yet_valid"
    SAN_MISMATCH = "san_mismatch"
    REVOKED = "revoked"
    MALFORMED = "malformed"


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class TrustContext:
    roots: tuple[x509.Certificate, ...]
    filters: Mapping[str, RevocationFilter]
    clock: Callable[[], datetime] = _utcnow

    def __post_init__(self) -> None:
        if not self.roots:
            raise IotPkiError("trust context needs at least one root")


@dataclass(frozen=True)
class PeerVerdict:
    accepted: bool
    urn: DeviceUrn | None = None
    reject_reason: RejectReason | None = None

    def __post_init__(self) -> None:
        if self.accepted and (self.urn is None or self.reject_reason is not None):
            raise IotPkiError("accepted verdict must carry a urn and no reject reason")

    def to_json(self) -> str:
        return json.dumps(
            {
                "accepted": self.accepted,
                "urn": str(self.urn) if self.urn else None,
                "reject_reason": self.reject_reason.value if self.reject_reason else None,
            }
        )


def extract_urn(cert: x509.Certificate) -> DeviceUrn:
    """Device URN from the first DNS SAN, falling back to CN only when the
    certificate has no SAN entries."""
    names = san_dns_names(cert)
    if not names:
        cn = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
        if not cn:
            raise NoIdentity("certificate carries neither SAN nor CN")
        names = [str(cn[0].value)]
    return parse_urn(names[0])


def _chain_to_root(chain: list[x509.Certificate], roots: tuple[x509.Certificate, ...]) -> bool:
    try:
        for child, issuer in zip(chain, chain[1:]):
            child.verify_directly_issued_by(issuer)
        last = chain[-1]
        if any(last == root for root in roots):
            return True
        for root in roots:
            try:
                last.verify_directly_issued_by(root)
                return True
            except (ValueError, TypeError, InvalidSignature, UnsupportedAlgorithm):
                continue
        return False
    except (ValueError, TypeError, InvalidSignature, UnsupportedAlgorithm):
        return False


def validate_peer(
    chain: list[x509.Certificate],
    ctx: TrustContext,
    expected_vendor: str | None = None,
) -> PeerVerdict:
    """Apply the five checks in fixed order; the first failure names the
    reject reason. Missing vendor filter fails open (with a warning):
    distributing filters is deployment policy, not protocol."""
    if not chain:
        return PeerVerdict(accepted=False, reject_reason=RejectReason.CHAIN)
    leaf = chain[0]
    if not _chain_to_root(chain, ctx.roots):
        return PeerVerdict(accepted=False, reject_reason=RejectReason.CHAIN)
    now = ctx.clock()
    if now < leaf.not_valid_before_utc:
        return PeerVerdict(accepted=False, reject_reason=RejectReason.NOT_YET_VALID)
    if now > leaf.not_valid_after_utc:
        return PeerVerdict(accepted=False, reject_reason=RejectReason.EXPIRED)
    try:
        urn = extract_urn(leaf)
    except (MalformedUrn, NoIdentity):
        return PeerVerdict(accepted=False, reject_reason=RejectReason.MALFORMED)
    if expected_vendor is not None and urn.namespace.root_domain != expected_vendor.lower():
        return PeerVerdict(accepted=False, reject_reason=RejectReason.SAN_MISMATCH)
    vendor = urn.namespace.root_domain
    filter_ = ctx.filters.get(vendor)
    if filter_ is None:
        log.warning("no revocation filter for vendor %s; failing open", vendor)
    elif query(filter_, format(leaf.serial_number, "x")):
        return PeerVerdict(accepted=False, reject_reason=RejectReason.REVOKED)
    return PeerVerdict(accepted=True, urn=urn)


@dataclass(frozen=True)
class EchoResult:
    payload_echoed: bytes
    client_verdict: PeerVerdict
    server_verdict: PeerVerdict
    handshake_ms: float


def _tls13_context(purpose: ssl.Purpose, chain_pem: str, key_pem: str, roots_pem: str) -> ssl.SSLContext:
    ctx = ssl.SSLContext(
        ssl.PROTOCOL_TLS_SERVER if purpose is ssl.Purpose.CLIENT_AUTH else ssl.PROTOCOL_TLS_CLIENT
    )
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.maximum_version = ssl.TLSVersion.TLSv1_3
    ctx.verify_mode = ssl.CERT_REQUIRED
    ctx.check_hostname = False
    load_cert_chain_in_memory(ctx, chain_pem, key_pem)
    ctx.load_verify_locations(cadata=roots_pem)
    return ctx


def _roots_pem(ctx: TrustContext) -> str:
    return "".join(cert_to_pem(root) for root in ctx.roots)


def _recv_exact(sock, count: int) -> bytes:
    buf = bytearray()
    while len(buf) < count:
        part = sock.recv(count - len(buf))
        if not part:
            raise ConnectionError("peer closed mid-frame")
        buf += part
    return bytes(buf)


class EchoServer:
    """TLS 1.3 echo service that validates every client against the trust
    context before echoing. One thread per connection."""

    def __init__(
        self,
        bundle,
        trust: TrustContext,
        expected_vendor: str | None = None,
        bind_addr: tuple[str, int] = ("127.0.0.1", 0),
    ) -> None:
        self._trust = trust
        self._expected_vendor = expected_vendor
        self._ssl_ctx = _tls13_context(
            ssl.Purpose.CLIENT_AUTH,
            bundle.certificate_chain,
            key_to_pem(bundle.private_key),
            _roots_pem(trust),
        )
        try:
            self._sock = socket.create_server(bind_addr)
        except OSError as exc:
            raise BindFailure(f"cannot bind echo server {bind_addr}: {exc}") from exc
        self.address: tuple[str, int] = self._sock.getsockname()
        self._closing = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True, name="mtls-echo")
        self.last_verdict: PeerVerdict | None = None

    def start(self) -> "EchoServer":
        self._thread.start()
        return self

    def close(self) -> None:
        self._closing.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "EchoServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    def _serve(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        try:
            with self._ssl_ctx.wrap_socket(conn, server_side=True) as tls:
                der = tls.getpeercert(binary_form=True)
                leaf = x509.load_der_x509_certificate(der)
                verdict = validate_peer([leaf], self._trust, self._expected_vendor)
                self.last_verdict = verdict
                (length,) = struct.unpack("!I", _recv_exact(tls, 4))
                if length > MAX_FRAME:
                    return
                payload = _recv_exact(tls, length)
                if not verdict.accepted:
                    reason = verdict.to_json().encode("utf-8")
                    tls.sendall(b"RJ" + struct.pack("!I", len(reason)) + reason)
                    return
                tls.sendall(b"OK" + struct.pack("!I", len(payload)) + payload)
        except (ssl.SSLError, OSError, ConnectionError) as exc:
            log.debug("echo connection dropped: %s", exc)
        finally:
            try:
                conn.close()
            except OSError:
                pass


def echo_once(
    server_addr: tuple[str, int],
    client_bundle,
    trust: TrustContext,
    payload: bytes,
    expected_vendor: str | None = None,
    timeout: float = 5.0,
) -> EchoResult:
    """Connect to a running EchoServer, mutually authenticate, validate the
    server's certificate, and exchange the payload."""
    ssl_ctx = _tls13_context(
        ssl.Purpose.SERVER_AUTH,
        client_bundle.certificate_chain,
        key_to_pem(client_bundle.private_key),
        _roots_pem(trust),
    )
    start = time.perf_counter()
    try:
        raw = socket.create_connection(server_addr, timeout=timeout)
        tls = ssl_ctx.wrap_socket(raw, server_hostname="peer")
    except ssl.SSLError as exc:
        raise HandshakeRejected(
            "client", PeerVerdict(accepted=False, reject_reason=RejectReason.CHAIN)
        ) from exc
    handshake_ms = (time.perf_counter() - start) * 1000.0
    with tls:
        leaf = x509.load_der_x509_certificate(tls.getpeercert(binary_form=True))
        client_verdict = validate_peer([leaf], trust, expected_vendor)
        if not client_verdict.accepted:
            raise HandshakeRejected("client", client_verdict)
        try:
            # A TLS 1.3 server that refuses the client certificate only
            # surfaces the alert after our side of the handshake returned,
            # so the first write or read is where the rejection shows up.
            tls.sendall(struct.pack("!I", len(payload)) + payload)
            status = _recv_exact(tls, 2)
            (length,) = struct.unpack("!I", _recv_exact(tls, 4))
            body = _recv_exact(tls, length)
        except (ssl.SSLError, ConnectionError) as exc:
            raise HandshakeRejected(
                "server", PeerVerdict(accepted=False, reject_reason=RejectReason.CHAIN)
            ) from exc
    if status == b"RJ":
        info = json.loads(body)
        reason = RejectReason(info["reject_reason"]) if info.get("reject_reason") else RejectReason.CHAIN
        raise HandshakeRejected("server", PeerVerdict(accepted=False, reject_reason=reason))
    server_verdict = PeerVerdict(accepted=True, urn=extract_urn(split_pem_chain(client_bundle.certificate_chain)[0]))
    return EchoResult(
        payload_echoed=body,
        client_verdict=client_verdict,
        server_verdict=server_verdict,
        handshake_ms=handshake_ms,
    )


def mtls_echo(
    server_bundle,
    client_bundle,
    trust: TrustContext,
    payload: bytes,
    expected_vendor: str | None = None,
) -> EchoResult:
    """One-shot harness: start an echo server for ``server_bundle``, run a
    single authenticated exchange from ``client_bundle``, tear down."""
    with EchoServer(server_bundle, trust, expected_vendor) as server:
        result = echo_once(server.address, client_bundle, trust, payload, expected_vendor)
        if server.last_verdict is not None:
            result = EchoResult(
                payload_echoed=result.payload_echoed,
                client_verdict=result.client_verdict,
                server_verdict=server.last_verdict,
                handshake_ms=result.handshake_ms,
            )
        return result
