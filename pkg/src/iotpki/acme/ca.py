"""Embedded certificate authority speaking the RFC 8555 subset the
enrollment flow needs: directory, newNonce, newAccount, newOrder, authz,
challenge, finalize, and certificate download, over HTTPS.

Challenge validation is active: the CA probes the configured DNS
responder (DNS-01) or fetches the token from the device-facing HTTP
endpoint it resolves via that responder (HTTP-01). It never trusts the
client's word that a proof is in place.

All key material (ACME root, HTTPS service key) lives in process memory
for the lifetime of the instance; nothing is written to disk.
"""

from __future__ import annotations

import datetime as dt
import http.server
import ipaddress
import json
import logging
import secrets
import ssl
import threading
import urllib.request
from dataclasses import dataclass, field
from datetime import timedelta, timezone
from typing import Callable

from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from ..certs import cert_to_pem, load_cert_chain_in_memory, san_dns_names
from ..dnsauth.server import ResolutionFailure, resolve, resolve_address
from ..dnsauth.zone import Rcode, RType
from ..errors import BindFailure, IotPkiError
from . import jws

log = logging.getLogger(__name__)

MAX_VALIDITY = timedelta(days=90)
ERROR_NS = "urn:ietf:params:acme:error:"


class QuotaExceeded(IotPkiError):
    pass


def _utcnow() -> dt.datetime:
    return dt.datetime.now(timezone.utc)


@dataclass
class CaConfig:
    bind_addr: tuple[str, int] = ("127.0.0.1", 0)
    dns_addr: tuple[str, int] | None = None
    http01_port: int | None = None
    validity: timedelta = MAX_VALIDITY
    weekly_order_quota: int = 30000
    clock: Callable[[], dt.datetime] = _utcnow


@dataclass
class _Challenge:
    id: str
    authz_id: str
    type: str
    token: str
    status: str = "pending"


@dataclass
class _Authz:
    id: str
    order_id: str
    fqdn: str
    challenge_ids: list[str]
    status: str = "pending"


@dataclass
class _Order:
    id: str
    account_kid: str
    identifiers: list[str]
    authz_ids: list[str]
    status: str = "pending"
    cert_serial: str | None = None
    problem: dict | None = None


@dataclass
class TestCaState:
    """Issuer state: root material, issued certificates, protocol bookkeeping."""

    __test__ = False  # "Test" here means embedded test CA, not a test suite

    clock: Callable[[], dt.datetime]
    validity: timedelta
    weekly_order_quota: int
    root_key: ec.EllipticCurvePrivateKey = field(init=False)
    root_cert: x509.Certificate = field(init=False)

    def __post_init__(self) -> None:
        self.root_key = ec.generate_private_key(ec.SECP256R1())
        self.root_cert = _self_signed_root(self.root_key, self.clock())
        self.issued: dict[str, x509.Certificate] = {}
        self.nonces: set[str] = set()
        self.accounts: dict[str, dict] = {}
        self.orders: dict[str, _Order] = {}
        self.authzs: dict[str, _Authz] = {}
        self.challenges: dict[str, _Challenge] = {}
        self._order_counts: dict[tuple[str, int], int] = {}
        self._next_serial = secrets.randbits(40) << 24
        self._lock = threading.RLock()

    # -- nonces -----------------------------------------------------------

    def fresh_nonce(self) -> str:
        nonce = jws.b64url(secrets.token_bytes(16))
        with self._lock:
            self.nonces.add(nonce)
        return nonce

    def consume_nonce(self, nonce: str) -> bool:
        with self._lock:
            if nonce in self.nonces:
                self.nonces.remove(nonce)
                return True
        return False

    # -- quota ------------------------------------------------------------

    def check_quota(self, fqdn: str) -> None:
        """Count this order against the identifier's registrable domain for
        the current week; raise once the weekly quota would be exceeded."""
        domain = ".".join(fqdn.rstrip(".").split(".")[-2:])
        week = int(self.clock().timestamp()) // (7 * 86400)
        with self._lock:
            count = self._order_counts.get((domain, week), 0) + 1
            if count > self.weekly_order_quota:
                raise QuotaExceeded(
                    f"{domain}: {count} orders this week exceeds {self.weekly_order_quota}"
                )
            self._order_counts[(domain, week)] = count

    # -- issuance -----------------------------------------------------------

    def issue(self, csr: x509.CertificateSigningRequest) -> tuple[str, x509.Certificate]:
        now = self.clock()
        lifetime = min(self.validity, MAX_VALIDITY)
        with self._lock:
            self._next_serial += 1
            serial_int = self._next_serial
        names = san_dns_names_from_csr(csr)
        builder = (
            x509.CertificateBuilder()
            .subject_name(csr.subject)
            .issuer_name(self.root_cert.subject)
            .public_key(csr.public_key())
            .serial_number(serial_int)
            .not_valid_before(now - timedelta(minutes=1))
            .not_valid_after(now - timedelta(minutes=1) + lifetime)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(x509.SubjectAlternativeName([x509.DNSName(n) for n in names]), critical=False)
            .add_extension(
                x509.KeyUsage(
                    digital_signature=True, content_commitment=False, key_encipherment=True,
                    data_encipherment=False, key_agreement=False, key_cert_sign=False,
                    crl_sign=False, encipher_only=False, decipher_only=False,
                ),
                critical=True,
            )
            .add_extension(
                x509.ExtendedKeyUsage(
                    [ExtendedKeyUsageOID.CLIENT_AUTH, ExtendedKeyUsageOID.SERVER_AUTH]
                ),
                critical=False,
            )
            .add_extension(x509.SubjectKeyIdentifier.from_public_key(csr.public_key()), critical=False)
            .add_extension(
                x509.AuthorityKeyIdentifier.from_issuer_public_key(self.root_key.public_key()),
                critical=False,
            )
        )
        cert = builder.sign(self.root_key, hashes.SHA256())
        serial = format(serial_int, "x")
        with self._lock:
            self.issued[serial] = cert
        return serial, cert

    def issued_serials(self) -> set[str]:
        with self._lock:
            return set(self.issued)


def san_dns_names_from_csr(csr: x509.CertificateSigningRequest) -> list[str]:
    try:
        ext = csr.extensions.get_extension_for_class(x509.SubjectAlternativeName)
    except x509.ExtensionNotFound:
        return []
    return ext.value.get_values_for_type(x509.DNSName)


def _self_signed_root(key: ec.EllipticCurvePrivateKey, now: dt.datetime) -> x509.Certificate:
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "iotpki test root")])
    return (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - timedelta(minutes=1))
        .not_valid_after(now + timedelta(days=3650))
        .add_extension(x509.BasicConstraints(ca=True, path_length=1), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=False, content_commitment=False, key_encipherment=False,
                data_encipherment=False, key_agreement=False, key_cert_sign=True,
                crl_sign=True, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )


def _service_identity() -> tuple[str, str]:
    """Self-signed HTTPS endpoint certificate for the CA service itself
    (distinct from the ACME issuing root). Returns (cert_pem, key_pem)."""
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "acme service")])
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(_utcnow() - timedelta(minutes=1))
        .not_valid_after(_utcnow() + timedelta(days=365))
        .add_extension(
            x509.SubjectAlternativeName(
                [x509.DNSName("localhost"), x509.IPAddress(ipaddress.IPv4Address("127.0.0.1"))]
            ),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    from ..certs import key_to_pem

    return cert_to_pem(cert), key_to_pem(key)


class _AcmeHandler(http.server.BaseHTTPRequestHandler):
    server_version = "iotpki-ca/0.1"

    @property
    def ca(self) -> "TestCa":
        return self.server.ca

    def log_message(self, fmt, *args) -> None:
        log.debug("ca http: " + fmt, *args)

    # -- plumbing --------------------------------------------------------

    def _reply(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Replay-Nonce", self.ca.state.fresh_nonce())
        self.send_header("Cache-Control", "no-store")
        if getattr(self, "_location", None):
            self.send_header("Location", self._location)
            self._location = None
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj: dict) -> None:
        self._reply(status, json.dumps(obj).encode(), "application/json")

    def _problem(self, status: int, err_type: str, detail: str) -> None:
        body = {"type": ERROR_NS + err_type, "detail": detail, "status": status}
        self._reply(status, json.dumps(body).encode(), "application/problem+json")

    def _read_jws(self, require_jwk: bool):
        """Verify the enclosing JWS and return (protected, payload, kid).

        ``kid`` is the account URL; for new-account requests it is None and
        the embedded JWK is returned through protected.
        """
        length = int(self.headers.get("Content-Length", "0"))
        try:
            envelope = json.loads(self.rfile.read(length))
            protected = json.loads(jws.b64url_decode(envelope["protected"]))
        except (ValueError, KeyError) as exc:
            self._problem(400, "malformed", f"bad request body: {exc}")
            return None
        nonce = protected.get("nonce", "")
        if not self.ca.state.consume_nonce(nonce):
            self._problem(400, "badNonce", "nonce missing, reused, or unknown")
            return None
        expected_url = self.ca.base_url + self.path
        if protected.get("url") != expected_url:
            self._problem(400, "unauthorized", f"url {protected.get('url')!r} != {expected_url!r}")
            return None
        if require_jwk:
            jwk_obj = protected.get("jwk")
            if jwk_obj is None:
                self._problem(400, "malformed", "newAccount requires an embedded jwk")
                return None
            kid = None
        else:
            kid = protected.get("kid")
            jwk_obj = self.ca.state.accounts.get(kid)
            if jwk_obj is None:
                self._problem(400, "accountDoesNotExist", f"unknown account {kid!r}")
                return None
        try:
            public_key = jws.jwk_to_public_key(jwk_obj)
            _, payload = jws.verify_jws(envelope, public_key)
        except jws.JwsError as exc:
            self._problem(401, "unauthorized", str(exc))
            return None
        return protected, payload, kid

    # -- verbs ----------------------------------------------------------

    def do_HEAD(self) -> None:
        if self.path == "/acme/new-nonce":
            self.send_response(200)
            self.send_header("Replay-Nonce", self.ca.state.fresh_nonce())
            self.send_header("Cache-Control", "no-store")
            self.end_headers()
        else:
            self.send_error(404)

    def do_GET(self) -> None:
        if self.path == "/directory":
            self._json(200, self.ca.directory())
        elif self.path == "/acme/new-nonce":
            self._reply(204, b"", "application/octet-stream")
        elif self.path == "/root":
            self._reply(200, self.ca.root_cert_pem.encode(), "application/pem-certificate-chain")
        else:
            self.send_error(404)

    def do_POST(self) -> None:
        route = self.path
        if route == "/acme/new-account":
            self._post_new_account()
        elif route == "/acme/new-order":
            self._post_new_order()
        elif route.startswith("/acme/order/"):
            self._post_order(route.removeprefix("/acme/order/"))
        elif route.startswith("/acme/authz/"):
            self._post_authz(route.removeprefix("/acme/authz/"))
        elif route.startswith("/acme/chall/"):
            self._post_challenge(route.removeprefix("/acme/chall/"))
        elif route.startswith("/acme/finalize/"):
            self._post_finalize(route.removeprefix("/acme/finalize/"))
        elif route.startswith("/acme/cert/"):
            self._post_cert(route.removeprefix("/acme/cert/"))
        else:
            self._problem(404, "malformed", f"no such resource {route}")

    # -- endpoints ----------------------------------------------------------

    def _post_new_account(self) -> None:
        result = self._read_jws(require_jwk=True)
        if result is None:
            return
        protected, _, _ = result
        ca = self.ca
        jwk_obj = protected["jwk"]
        thumb = jws.jwk_thumbprint(jwk_obj)
        with ca.state._lock:
            for kid, existing in ca.state.accounts.items():
                if jws.jwk_thumbprint(existing) == thumb:
                    self._location = kid
                    self._json(200, {"status": "valid", "orders": ""})
                    return
            kid = f"{ca.base_url}/acme/acct/{len(ca.state.accounts) + 1}"
            ca.state.accounts[kid] = jwk_obj
        self._location = kid
        self._json(201, {"status": "valid", "orders": ""})

    def _post_new_order(self) -> None:
        result = self._read_jws(require_jwk=False)
        if result is None:
            return
        _, payload, kid = result
        ca = self.ca
        try:
            identifiers = [
                ident["value"] for ident in json.loads(payload)["identifiers"]
                if ident.get("type") == "dns"
            ]
        except (ValueError, KeyError) as exc:
            self._problem(400, "malformed", f"bad order payload: {exc}")
            return
        if not identifiers:
            self._problem(400, "malformed", "order carries no dns identifiers")
            return
        try:
            for fqdn in identifiers:
                ca.state.check_quota(fqdn)
        except QuotaExceeded as exc:
            self._problem(429, "rateLimited", str(exc))
            return
        order = ca.create_order(kid, identifiers)
        self._location = f"{ca.base_url}/acme/order/{order.id}"
        self._json(201, ca.order_json(order))

    def _post_order(self, order_id: str) -> None:
        if self._read_jws(require_jwk=False) is None:
            return
        order = self.ca.state.orders.get(order_id)
        if order is None:
            self._problem(404, "malformed", f"no order {order_id}")
            return
        self._json(200, self.ca.order_json(order))

    def _post_authz(self, authz_id: str) -> None:
        if self._read_jws(require_jwk=False) is None:
            return
        authz = self.ca.state.authzs.get(authz_id)
        if authz is None:
            self._problem(404, "malformed", f"no authz {authz_id}")
            return
        self._json(200, self.ca.authz_json(authz))

    def _post_challenge(self, chall_id: str) -> None:
        result = self._read_jws(require_jwk=False)
        if result is None:
            return
        _, _, kid = result
        chall = self.ca.state.challenges.get(chall_id)
        if chall is None:
            self._problem(404, "malformed", f"no challenge {chall_id}")
            return
        self.ca.validate_challenge(chall, kid)
        self._json(200, self.ca.challenge_json(chall))

    def _post_finalize(self, order_id: str) -> None:
        result = self._read_jws(require_jwk=False)
        if result is None:
            return
        _, payload, _ = result
        ca = self.ca
        order = ca.state.orders.get(order_id)
        if order is None:
            self._problem(404, "malformed", f"no order {order_id}")
            return
        if order.status != "ready":
            self._problem(403, "orderNotReady", f"order status is {order.status}")
            return
        try:
            csr = x509.load_der_x509_csr(jws.b64url_decode(json.loads(payload)["csr"]))
        except (ValueError, KeyError) as exc:
            self._problem(400, "badCSR", f"unparseable csr: {exc}")
            return
        if not csr.is_signature_valid:
            self._problem(400, "badCSR", "csr signature invalid")
            return
        if set(san_dns_names_from_csr(csr)) != set(order.identifiers):
            order.status = "invalid"
            self._problem(
                400, "badCSR",
                f"csr names {san_dns_names_from_csr(csr)} != order identifiers {order.identifiers}",
            )
            return
        serial, _ = ca.state.issue(csr)
        order.cert_serial = serial
        order.status = "valid"
        self._json(200, ca.order_json(order))

    def _post_cert(self, order_id: str) -> None:
        if self._read_jws(require_jwk=False) is None:
            return
        ca = self.ca
        order = ca.state.orders.get(order_id)
        if order is None or order.status != "valid" or order.cert_serial is None:
            self._problem(404, "malformed", "certificate not ready")
            return
        leaf = ca.state.issued[order.cert_serial]
        chain = cert_to_pem(leaf) + ca.root_cert_pem
        self._reply(200, chain.encode(), "application/pem-certificate-chain")


class TestCa:
    """Owns CA state plus the HTTPS front end."""

    __test__ = False  # "Test" here means embedded test CA, not a test suite

    def __init__(self, config: CaConfig | None = None) -> None:
        self.config = config or CaConfig()
        self.state = TestCaState(
            clock=self.config.clock,
            validity=self.config.validity,
            weekly_order_quota=self.config.weekly_order_quota,
        )
        self.service_cert_pem, service_key_pem = _service_identity()
        try:
            self._server = http.server.ThreadingHTTPServer(self.config.bind_addr, _AcmeHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind ca {self.config.bind_addr}: {exc}") from exc
        self._server.daemon_threads = True
        self._server.ca = self
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        load_cert_chain_in_memory(ctx, self.service_cert_pem, service_key_pem)
        self._server.socket = ctx.wrap_socket(self._server.socket, server_side=True)
        host, port = self._server.server_address
        self.base_url = f"https://{host}:{port}"
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True, name="acme-ca"
        )

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "TestCa":
        self._thread.start()
        log.info("test ca listening at %s", self.base_url)
        return self

    def close(self) -> None:
        # shutdown() blocks unless serve_forever() is actually running.
        if self._thread.is_alive():
            self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "TestCa":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    # -- protocol objects --------------------------------------------------

    @property
    def directory_url(self) -> str:
        return f"{self.base_url}/directory"

    @property
    def root_cert_pem(self) -> str:
        return cert_to_pem(self.state.root_cert)

    def directory(self) -> dict:
        return {
            "newNonce": f"{self.base_url}/acme/new-nonce",
            "newAccount": f"{self.base_url}/acme/new-account",
            "newOrder": f"{self.base_url}/acme/new-order",
            "meta": {"caRoot": f"{self.base_url}/root"},
        }

    def create_order(self, kid: str, identifiers: list[str]) -> _Order:
        state = self.state
        with state._lock:
            order_id = jws.b64url(secrets.token_bytes(9))
            authz_ids = []
            for fqdn in identifiers:
                authz_id = jws.b64url(secrets.token_bytes(9))
                chall_ids = []
                for ctype in ("dns-01", "http-01"):
                    chall_id = jws.b64url(secrets.token_bytes(9))
                    state.challenges[chall_id] = _Challenge(
                        id=chall_id, authz_id=authz_id, type=ctype,
                        token=jws.b64url(secrets.token_bytes(24)),
                    )
                    chall_ids.append(chall_id)
                state.authzs[authz_id] = _Authz(
                    id=authz_id, order_id=order_id, fqdn=fqdn, challenge_ids=chall_ids
                )
                authz_ids.append(authz_id)
            order = _Order(id=order_id, account_kid=kid, identifiers=identifiers, authz_ids=authz_ids)
            state.orders[order_id] = order
        return order

    def order_json(self, order: _Order) -> dict:
        obj = {
            "status": order.status,
            "identifiers": [{"type": "dns", "value": v} for v in order.identifiers],
            "authorizations": [f"{self.base_url}/acme/authz/{a}" for a in order.authz_ids],
            "finalize": f"{self.base_url}/acme/finalize/{order.id}",
        }
        if order.status == "valid" and order.cert_serial:
            obj["certificate"] = f"{self.base_url}/acme/cert/{order.id}"
        if order.problem:
            obj["error"] = order.problem
        return obj

    def authz_json(self, authz: _Authz) -> dict:
        return {
            "identifier": {"type": "dns", "value": authz.fqdn},
            "status": authz.status,
            "challenges": [
                self.challenge_json(self.state.challenges[c]) for c in authz.challenge_ids
            ],
        }

    def challenge_json(self, chall: _Challenge) -> dict:
        return {
            "type": chall.type,
            "url": f"{self.base_url}/acme/chall/{chall.id}",
            "token": chall.token,
            "status": chall.status,
        }

    # -- validation ---------------------------------------------------------

    def validate_challenge(self, chall: _Challenge, kid: str) -> None:
        state = self.state
        authz = state.authzs[chall.authz_id]
        order = state.orders[authz.order_id]
        account_jwk = state.accounts.get(kid)
        if account_jwk is None or kid != order.account_kid:
            chall.status = "invalid"
            authz.status = "invalid"
            order.status = "invalid"
            return
        expected_key_auth = jws.key_authorization(chall.token, jws.jwk_thumbprint(account_jwk))
        chall.status = "processing"
        ok, detail = self._probe(chall, authz.fqdn, expected_key_auth)
        with state._lock:
            if ok:
                chall.status = "valid"
                authz.status = "valid"
                if all(state.authzs[a].status == "valid" for a in order.authz_ids):
                    order.status = "ready"
            else:
                chall.status = "invalid"
                authz.status = "invalid"
                order.status = "invalid"
                order.problem = {"type": ERROR_NS + "unauthorized", "detail": detail}
                log.info("challenge %s for %s failed: %s", chall.type, authz.fqdn, detail)

    def _probe(self, chall: _Challenge, fqdn: str, expected_key_auth: str) -> tuple[bool, str]:
        dns_addr = self.config.dns_addr
        if dns_addr is None:
            return False, "ca has no dns responder configured"
        if chall.type == "dns-01":
            expected_txt = jws.dns01_txt_value(expected_key_auth)
            try:
                rcode, answers = resolve(f"_acme-challenge.{fqdn}", RType.TXT, dns_addr)
            except ResolutionFailure as exc:
                return False, f"dns probe failed: {exc}"
            if rcode is not Rcode.NOERROR:
                return False, f"dns probe rcode {rcode.name}"
            values = [r.value for r in answers if r.rtype is RType.TXT]
            if expected_txt in values:
                return True, ""
            return False, f"txt mismatch: {values} != {expected_txt}"
        if chall.type == "http-01":
            if self.config.http01_port is None:
                return False, "ca has no http-01 port configured"
            try:
                ip = resolve_address(fqdn, dns_addr)
            except ResolutionFailure as exc:
                return False, f"address resolution failed: {exc}"
            url = f"http://{ip}:{self.config.http01_port}/.well-known/acme-challenge/{chall.token}"
            try:
                with urllib.request.urlopen(url, timeout=3) as resp:
                    body = resp.read().decode("ascii", "replace")
            except OSError as exc:
                return False, f"http probe failed: {exc}"
            if body == expected_key_auth:
                return True, ""
            return False, "key authorization mismatch"
        return False, f"unsupported challenge type {chall.type}"
