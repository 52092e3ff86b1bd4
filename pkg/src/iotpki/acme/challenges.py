"""Challenge fulfillers: the vendor-side glue that publishes proofs where
the CA's validator will look for them.

DNS-01 proofs land as TXT records in the authoritative zone; HTTP-01
proofs are parked on a small token-shelf HTTP server standing in for the
device-facing web endpoint.
"""

from __future__ import annotations

import http.server
import logging
import threading

from ..dnsauth.zone import Zone
from ..errors import BindFailure
from .jws import dns01_txt_value

log = logging.getLogger(__name__)

WELL_KNOWN_PREFIX = "/.well-known/acme-challenge/"


class DnsTxtFulfiller:
    """Installs DNS-01 proofs via the zone's ACME TXT operations."""

    challenge_type = "dns-01"

    def __init__(self, zone: Zone) -> None:
        self._zone = zone

    def install(self, fqdn: str, token: str, key_auth: str) -> None:
        self._zone.set_acme_txt(fqdn, dns01_txt_value(key_auth))

    def cleanup(self, fqdn: str, token: str) -> None:
        self._zone.clear_acme_txt(fqdn)


class TokenShelf:
    """Minimal HTTP server answering GET /.well-known/acme-challenge/<token>.

    One shelf serves every pending enrollment; tokens are removed after
    cleanup so nothing lingers between orders.
    """

    def __init__(self, bind_addr: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self._tokens: dict[str, str] = {}
        self._lock = threading.Lock()
        shelf = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_GET(self) -> None:
                key_auth = None
                if self.path.startswith(WELL_KNOWN_PREFIX):
                    with shelf._lock:
                        key_auth = shelf._tokens.get(self.path[len(WELL_KNOWN_PREFIX):])
                if key_auth is None:
                    self.send_error(404)
                    return
                body = key_auth.encode("ascii")
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, fmt, *args) -> None:
                log.debug("token shelf: " + fmt, *args)

        try:
            self._server = http.server.ThreadingHTTPServer(bind_addr, Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind token shelf {bind_addr}: {exc}") from exc
        self._server.daemon_threads = True
        self.address: tuple[str, int] = self._server.server_address
        self.port: int = self.address[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True, name="token-shelf"
        )

    def start(self) -> "TokenShelf":
        self._thread.start()
        return self

    def close(self) -> None:
        # shutdown() blocks unless serve_forever() is actually running.
        if self._thread.is_alive():
            self._server.shutdown()
        self._server.server_close()

    def put(self, token: str, key_auth: str) -> None:
        with self._lock:
            self._tokens[token] = key_auth

    def remove(self, token: str) -> None:
        with self._lock:
            self._tokens.pop(token, None)

    def __enter__(self) -> "TokenShelf":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


class HttpShelfFulfiller:
    """Installs HTTP-01 proofs on a running TokenShelf."""

    challenge_type = "http-01"

    def __init__(self, shelf: TokenShelf) -> None:
        self._shelf = shelf

    def install(self, fqdn: str, token: str, key_auth: str) -> None:
        self._shelf.put(token, key_auth)

    def cleanup(self, fqdn: str, token: str) -> None:
        self._shelf.remove(token)
