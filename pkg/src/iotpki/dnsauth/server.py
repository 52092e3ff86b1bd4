"""Threaded UDP responder for a Zone, plus a matching stub resolver.

The responder answers every well-formed single-question query
authoritatively (AA bit set). Malformed packets get FORMERR when a
transaction id can be salvaged from the first two bytes, otherwise they
are dropped.
"""

from __future__ import annotations

import logging
import random
import socket
import socketserver
import struct
import threading

from ..errors import BindFailure, IotPkiError
from . import wire
from .zone import DnsResponse, Rcode, RType, Zone, ZoneRecord

log = logging.getLogger(__name__)

DEFAULT_BIND = ("127.0.0.1", 5353)
MAX_UDP = 512


class ResolutionFailure(IotPkiError):
    pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        packet, sock = self.request
        zone: Zone = self.server.zone
        try:
            txn_id, qname, qtype = wire.parse_query(packet)
        except wire.NotImplementedQuery:
            sock.sendto(wire.build_error_response(_salvage_id(packet), Rcode.NOTIMP), self.client_address)
            return
        except wire.WireFormatError:
            if len(packet) >= 2:
                sock.sendto(wire.build_error_response(_salvage_id(packet), Rcode.FORMERR), self.client_address)
            return
        try:
            rtype = RType(qtype)
        except ValueError:
            # Unsupported-but-valid qtype: NXDOMAIN/NOERROR as appropriate,
            # still surfacing a CNAME if the name bears one.
            result = zone.answer_query(qname, RType.CNAME)
            sock.sendto(
                wire.build_response(txn_id, qname, qtype, result.rcode, result.answers),
                self.client_address,
            )
            return
        result: DnsResponse = zone.answer_query(qname, rtype)
        response = wire.build_response(
            txn_id, qname, qtype, result.rcode, result.answers, authoritative=result.authoritative
        )
        if len(response) > MAX_UDP:
            response = response[:2] + struct.pack("!H", struct.unpack_from("!H", response, 2)[0] | 0x0200) + response[4:]
        sock.sendto(response, self.client_address)


def _salvage_id(packet: bytes) -> int:
    return struct.unpack_from("!H", packet)[0] if len(packet) >= 2 else 0


class DnsUdpServer:
    """Owns the socket server and its worker thread."""

    def __init__(self, zone: Zone, bind_addr: tuple[str, int] = DEFAULT_BIND) -> None:
        try:
            self._server = socketserver.ThreadingUDPServer(bind_addr, _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind udp {bind_addr}: {exc}") from exc
        self._server.zone = zone
        self._server.daemon_threads = True
        self.zone = zone
        self.address: tuple[str, int] = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True, name="dns-udp")

    def start(self) -> "DnsUdpServer":
        self._thread.start()
        log.info("dns responder listening on %s:%d", *self.address)
        return self

    def close(self) -> None:
        # shutdown() blocks unless serve_forever() is actually running.
        if self._thread.is_alive():
            self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "DnsUdpServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def serve_udp(zone: Zone, bind_addr: tuple[str, int] = DEFAULT_BIND) -> DnsUdpServer:
    return DnsUdpServer(zone, bind_addr).start()


def resolve(
    name: str,
    rtype: RType,
    server_addr: tuple[str, int],
    timeout: float = 2.0,
) -> tuple[Rcode, list[ZoneRecord]]:
    """One-shot UDP stub query against a specific server."""
    txn_id = random.randrange(0, 0x10000)
    query = wire.build_query(txn_id, name, rtype)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.settimeout(timeout)
        try:
            sock.sendto(query, server_addr)
            packet, _ = sock.recvfrom(4096)
        except OSError as exc:
            raise ResolutionFailure(f"query to {server_addr} failed: {exc}") from exc
    got_id, rcode, _, answers = wire.parse_response(packet)
    if got_id != txn_id:
        raise ResolutionFailure("transaction id mismatch")
    return rcode, answers


def resolve_address(name: str, server_addr: tuple[str, int], max_chase: int = 8) -> str:
    """Follow CNAMEs (already chased server-side) to an IPv4 address."""
    rcode, answers = resolve(name, RType.A, server_addr)
    if rcode is not Rcode.NOERROR:
        raise ResolutionFailure(f"{name}: rcode {rcode.name}")
    for record in answers:
        if record.rtype is RType.A:
            return record.value
    raise ResolutionFailure(f"{name}: no A record in answer")
