"""Vendor-side ACME client: drives account creation, order placement,
challenge fulfillment, finalization, and certificate download against an
RFC 8555 directory endpoint.
"""

from __future__ import annotations

import json
import logging
import ssl
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

from ..certs import csr_to_der, generate_key, san_dns_names, split_pem_chain
from ..errors import IotPkiError
from . import jws

log = logging.getLogger(__name__)

POLL_INTERVAL = 0.05
MAX_POLLS = 60


class AcmeProblem(IotPkiError):
    """Problem document the client has no more specific mapping for."""

    def __init__(self, ptype: str, detail: str, status: int) -> None:
        super().__init__(f"{ptype}: {detail}")
        self.ptype = ptype
        self.detail = detail
        self.status = status


class ChallengeFailed(IotPkiError):
    pass


class CsrMismatch(IotPkiError):
    pass


class RateLimited(IotPkiError):
    pass


class CaUnreachable(IotPkiError):
    pass


class InvalidToken(IotPkiError):
    pass


@dataclass
class AcmeAccount:
    account_key: object
    kid: str | None
    jwk_thumbprint: str


class AcmeClient:
    """One client per account key. Thread-safe for independent orders as
    long as each thread uses its own client (nonce pool is per-client)."""

    def __init__(
        self,
        directory_url: str,
        account_key=None,
        ca_bundle_pem: str | None = None,
        timeout: float = 10.0,
    ) -> None:
        self.directory_url = directory_url
        self.timeout = timeout
        key = account_key if account_key is not None else generate_key("p256")
        thumb = jws.jwk_thumbprint(jws.public_jwk(key.public_key()))
        self.account = AcmeAccount(account_key=key, kid=None, jwk_thumbprint=thumb)
        if ca_bundle_pem is not None:
            self._ctx = ssl.create_default_context(cadata=ca_bundle_pem)
            self._ctx.check_hostname = False
        else:
            self._ctx = ssl.create_default_context()
        self._directory: dict | None = None
        self._nonce: str | None = None

    # -- transport ---------------------------------------------------------

    def _http(self, method: str, url: str, body: bytes | None = None):
        request = urllib.request.Request(url, data=body, method=method)
        if body is not None:
            request.add_header("Content-Type", "application/jose+json")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout, context=self._ctx) as resp:
                return resp.status, dict(resp.headers), resp.read()
        except urllib.error.HTTPError as exc:
            payload = exc.read()
            headers = dict(exc.headers)
            return exc.code, headers, payload
        except (urllib.error.URLError, OSError, ssl.SSLError) as exc:
            raise CaUnreachable(f"{method} {url}: {exc}") from exc

    def _remember_nonce(self, headers: dict) -> None:
        nonce = headers.get("Replay-Nonce")
        if nonce:
            self._nonce = nonce

    def _take_nonce(self) -> str:
        if self._nonce is None:
            _, headers, _ = self._http("HEAD", self.directory()["newNonce"])
            self._remember_nonce(headers)
        nonce, self._nonce = self._nonce, None
        if nonce is None:
            raise CaUnreachable("ca did not supply a replay nonce")
        return nonce

    def directory(self) -> dict:
        if self._directory is None:
            status, headers, body = self._http("GET", self.directory_url)
            if status != 200:
                raise CaUnreachable(f"directory fetch returned {status}")
            self._directory = json.loads(body)
        return self._directory

    def _post(self, url: str, payload: dict | None, use_jwk: bool = False):
        """Signed POST (payload None = POST-as-GET). Retries badNonce once
        with the server-supplied replacement, per RFC 8555 section 6.5."""
        for attempt in (0, 1):
            protected = {
                "alg": jws.alg_for_key(self.account.account_key),
                "nonce": self._take_nonce(),
                "url": url,
            }
            if use_jwk:
                protected["jwk"] = jws.public_jwk(self.account.account_key.public_key())
            else:
                protected["kid"] = self.account.kid
            body = json.dumps(payload).encode() if payload is not None else None
            envelope = jws.sign_jws(self.account.account_key, protected, body)
            status, headers, raw = self._http("POST", url, json.dumps(envelope).encode())
            self._remember_nonce(headers)
            if status < 400:
                return status, headers, raw
            problem = _parse_problem(raw)
            if problem["type"].endswith("badNonce") and attempt == 0:
                continue
            _raise_problem(problem, status)
        raise AcmeProblem("badNonce", "nonce retry exhausted", 400)

    # -- account/order flow ---------------------------------------------

    def ensure_account(self) -> AcmeAccount:
        if self.account.kid is not None:
            return self.account
        _, headers, _ = self._post(self.directory()["newAccount"], {
            "termsOfServiceAgreed": True,
        }, use_jwk=True)
        kid = headers.get("Location")
        if not kid:
            raise CaUnreachable("newAccount response lacks a Location header")
        self.account.kid = kid
        return self.account

    def obtain_certificate(self, fqdn: str, csr, challenge_type: str, fulfiller) -> str:
        """Full order flow for one FQDN. Returns the PEM chain."""
        if challenge_type not in ("dns01", "http01"):
            raise IotPkiError(f"unknown challenge type {challenge_type!r}")
        wire_type = "dns-01" if challenge_type == "dns01" else "http-01"
        if fulfiller.challenge_type != wire_type:
            raise IotPkiError(
                f"fulfiller handles {fulfiller.challenge_type}, order wants {wire_type}"
            )
        self.ensure_account()
        _, headers, raw = self._post(self.directory()["newOrder"], {
            "identifiers": [{"type": "dns", "value": fqdn}],
        })
        order = json.loads(raw)
        order_url = headers.get("Location", "")
        authz_url = order["authorizations"][0]

        _, _, raw = self._post(authz_url, None)
        authz = json.loads(raw)
        chall = next((c for c in authz["challenges"] if c["type"] == wire_type), None)
        if chall is None:
            raise ChallengeFailed(f"ca offers no {wire_type} challenge")
        token = chall.get("token", "")
        if not token:
            raise InvalidToken("challenge token is empty")
        key_auth = jws.key_authorization(token, self.account.jwk_thumbprint)

        fulfiller.install(fqdn, token, key_auth)
        try:
            self._post(chall["url"], {})
            authz = self._poll(authz_url, ("valid", "invalid"))
            if authz["status"] != "valid":
                raise ChallengeFailed(f"authorization for {fqdn} ended {authz['status']}")
            try:
                _, _, raw = self._post(order["finalize"], {"csr": jws.b64url(csr_to_der(csr))})
            except AcmeProblem as exc:
                if exc.ptype.endswith("badCSR"):
                    raise CsrMismatch(exc.detail) from exc
                raise
            final = json.loads(raw)
            if final["status"] != "valid":
                final = self._poll(order_url, ("valid", "invalid"))
            if final["status"] != "valid" or "certificate" not in final:
                raise ChallengeFailed(f"order for {fqdn} ended {final['status']}")
            _, _, chain = self._post(final["certificate"], None)
        finally:
            fulfiller.cleanup(fqdn, token)
        pem = chain.decode("ascii")
        leaf = split_pem_chain(pem)[0]
        if san_dns_names(leaf) != [fqdn]:
            raise CsrMismatch(f"issued SAN {san_dns_names(leaf)} != requested {fqdn}")
        return pem

    def _poll(self, url: str, terminal: tuple[str, ...]) -> dict:
        for _ in range(MAX_POLLS):
            _, _, raw = self._post(url, None)
            obj = json.loads(raw)
            if obj["status"] in terminal:
                return obj
            time.sleep(POLL_INTERVAL)
        raise CaUnreachable(f"{url} did not reach {terminal} after {MAX_POLLS} polls")


def _parse_problem(raw: bytes) -> dict:
    try:
        problem = json.loads(raw)
    except ValueError:
        problem = {}
    problem.setdefault("type", "about:blank")
    problem.setdefault("detail", raw.decode("utf-8", "replace")[:200])
    return problem


def _raise_problem(problem: dict, status: int):
    ptype, detail = problem["type"], problem["detail"]
    if ptype.endswith("rateLimited"):
        raise RateLimited(detail)
    if ptype.endswith("badCSR"):
        raise CsrMismatch(detail)
    if ptype.endswith("unauthorized"):
        raise ChallengeFailed(detail)
    raise AcmeProblem(ptype, detail, status)
