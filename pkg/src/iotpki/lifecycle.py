"""Vendor-side device lifecycle: enrollment, scheduled renewal with key
reuse, gateway-delegated proxy renewal, and revocation entry.

The FleetManager drives the whole flow against an authoritative zone and
an ACME endpoint. Device private keys live only in returned bundles and
in the in-memory stand-in for per-device keystores; nothing here ever
writes key material into the inventory or any persisted artifact.
"""

from __future__ import annotations

import base64
import binascii
import concurrent.futures
import logging
import statistics
import struct
import threading
import time
import uuid as uuidlib
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from .acme import AcmeClient, DnsTxtFulfiller, HttpShelfFulfiller
from .certs import (
    build_csr,
    generate_key,
    san_dns_names,
    spki_fingerprint,
    split_pem_chain,
)
from .dnsauth import Zone
from .errors import IotPkiError
from .identity import DeviceSecret, DeviceUrn, VendorNamespace, derive_device_uuid
from .inventory import (
    RENEWAL_WINDOW,
    CertificateMeta,
    Inventory,
    RenewalState,
    UnknownDevice,
    utcnow,
)
from .revocation import AlreadyRevoked, RevocationLog

log = logging.getLogger(__name__)

DELEGATION_MAGIC = b"ATLSDLG1"
DEFAULT_PARALLELISM = 4
DEFAULT_KEY_ALGORITHM = "p256"
DEFAULT_DELEGATION_LIFETIME = timedelta(days=7)


class EnrollmentAborted(IotPkiError):
    """Issuance failed mid-flight; pending challenge records were cleaned up."""


class BadDelegation(IotPkiError):
    """Delegation record failed signature or expiry verification."""


class KeyMismatch(IotPkiError):
    """CSR public key differs from the device's recorded fingerprint."""


class RenewalBusy(IotPkiError):
    """A renewal tick is already running; ticks are not re-entrant."""


class EmptyBatch(IotPkiError):
    """enroll_batch requires at least one enrollment request."""


class RevocationReason(str, Enum):
    KEY_COMPROMISE = "key_compromise"
    CESSATION = "cessation_of_operation"
    SUPERSEDED = "superseded"
    UNSPECIFIED = "unspecified"


@dataclass(frozen=True)
class ProvisionedDevice:
    """Enrollment result handed to the device: URN, its private key, and
    the issued chain. The key exists only in this bundle."""

    urn: DeviceUrn
    private_key: object
    certificate_chain: str
    issued_at: datetime

    def __post_init__(self) -> None:
        leaf = split_pem_chain(self.certificate_chain)[0]
        names = san_dns_names(leaf)
        if names[:1] != [str(self.urn)]:
            raise ValueError(
                f"leaf SAN {names!r} does not carry the device URN {self.urn}"
            )
        if spki_fingerprint(leaf.public_key()) != spki_fingerprint(
            self.private_key.public_key()
        ):
            raise ValueError("leaf public key does not match the bundled private key")


@dataclass(frozen=True)
class DelegationRecord:
    """Vendor-signed authorization for a gateway to renew on behalf of one
    device. Compact binary blob, base64 for transport."""

    gateway_id: str
    device_uuid: uuidlib.UUID
    expires_at: datetime
    signature: bytes

    def payload(self) -> bytes:
        return _delegation_payload(self.gateway_id, self.device_uuid, self.expires_at)

    def to_blob(self) -> str:
        return base64.b64encode(self.payload() + self.signature).decode("ascii")

    @classmethod
    def from_blob(cls, blob: str) -> "DelegationRecord":
        try:
            raw = base64.b64decode(blob.encode("ascii"), validate=True)
        except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
            raise BadDelegation(f"undecodable delegation blob: {exc}") from exc
        if len(raw) < len(DELEGATION_MAGIC) + 2 + 16 + 8 + 64:
            raise BadDelegation("delegation blob too short")
        if not raw.startswith(DELEGATION_MAGIC):
            raise BadDelegation("bad delegation magic")
        try:
            (gw_len,) = struct.unpack_from("!H", raw, len(DELEGATION_MAGIC))
            offset = len(DELEGATION_MAGIC) + 2
            gateway_id = raw[offset : offset + gw_len].decode("utf-8")
            offset += gw_len
            device_uuid = uuidlib.UUID(bytes=raw[offset : offset + 16])
            offset += 16
            (ts,) = struct.unpack_from("!q", raw, offset)
            offset += 8
            signature = raw[offset:]
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise BadDelegation(f"malformed delegation blob: {exc}") from exc
        if len(signature) != 64:
            raise BadDelegation(f"signature is {len(signature)} bytes, expected 64")
        expires_at = datetime.fromtimestamp(ts, tz=timezone.utc)
        return cls(gateway_id, device_uuid, expires_at, signature)


def _delegation_payload(gateway_id: str, device_uuid: uuidlib.UUID, expires_at: datetime) -> bytes:
    gw = gateway_id.encode("utf-8")
    ts = int(expires_at.timestamp())
    return DELEGATION_MAGIC + struct.pack("!H", len(gw)) + gw + device_uuid.bytes + struct.pack("!q", ts)


def sign_delegation(
    signing_key: ed25519.Ed25519PrivateKey,
    gateway_id: str,
    device_uuid: uuidlib.UUID,
    expires_at: datetime,
) -> DelegationRecord:
    payload = _delegation_payload(gateway_id, device_uuid, expires_at)
    return DelegationRecord(gateway_id, device_uuid, expires_at, signing_key.sign(payload))


def verify_delegation(
    public_key: ed25519.Ed25519PublicKey,
    record: DelegationRecord,
    now: datetime,
) -> None:
    try:
        public_key.verify(record.signature, record.payload())
    except InvalidSignature as exc:
        raise BadDelegation("delegation signature does not verify") from exc
    if record.expires_at <= now:
        raise BadDelegation(f"delegation expired at {record.expires_at.isoformat()}")


@dataclass(frozen=True)
class EnrollmentRequest:
    """One batch entry. Namespace fields stay raw strings so validation
    failures surface as per-device outcomes instead of aborting the batch."""

    root_domain: str
    device_class: str
    secret: bytes
    challenge: str = "dns01"


@dataclass(frozen=True)
class BatchRow:
    uuid: str
    outcome: str
    binding_ms: float
    issuance_ms: float


@dataclass(frozen=True)
class BatchReport:
    rows: tuple[BatchRow, ...]

    def to_csv(self) -> str:
        lines = ["uuid,outcome,binding_ms,issuance_ms"]
        for row in self.rows:
            lines.append(
                f"{row.uuid},{row.outcome},{row.binding_ms:.3f},{row.issuance_ms:.3f}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        ok = [r for r in self.rows if r.outcome == "ok"]
        binding = [r.binding_ms for r in ok]
        issuance = [r.issuance_ms for r in ok]
        return {
            "total": len(self.rows),
            "succeeded": len(ok),
            "failed": len(self.rows) - len(ok),
            "binding_ms_mean": statistics.mean(binding) if binding else 0.0,
            "binding_ms_stddev": statistics.stdev(binding) if len(binding) > 1 else 0.0,
            "issuance_ms_mean": statistics.mean(issuance) if issuance else 0.0,
            "issuance_ms_stddev": statistics.stdev(issuance) if len(issuance) > 1 else 0.0,
        }


@dataclass(frozen=True)
class RenewalOutcome:
    device_uuid: uuidlib.UUID
    status: str  # "renewed" or "deferred"
    detail: str
    serial: str | None
    public_key_fingerprint: str | None


class FleetManager:
    """Orchestrates the device fleet against a zone and an ACME endpoint.

    ``_device_keys`` is the in-memory stand-in for the keystores of the
    devices themselves (this process plays both vendor and device roles);
    it is never serialized and never enters the inventory.
    """

    def __init__(
        self,
        inventory: Inventory,
        zone: Zone,
        revocation_log: RevocationLog,
        directory_url: str,
        ca_bundle_pem: str | None,
        cloud_target: str,
        clock: Callable[[], datetime] = utcnow,
        http_shelf=None,
        key_algorithm: str = DEFAULT_KEY_ALGORITHM,
        account_key=None,
    ) -> None:
        self.inventory = inventory
        self.zone = zone
        self.revocation_log = revocation_log
        self.directory_url = directory_url
        self.ca_bundle_pem = ca_bundle_pem
        self.cloud_target = cloud_target
        self.clock = clock
        self.http_shelf = http_shelf
        self.key_algorithm = key_algorithm
        self._account_key = account_key if account_key is not None else generate_key("p256")
        self._delegation_key = ed25519.Ed25519PrivateKey.generate()
        self._device_keys: dict[uuidlib.UUID, object] = {}
        self._challenges: dict[uuidlib.UUID, str] = {}
        self._revocation_reasons: dict[uuidlib.UUID, RevocationReason] = {}
        self._keys_lock = threading.Lock()
        self._tick_lock = threading.Lock()
        self._local = threading.local()

    # -- plumbing ------------------------------------------------------------

    def _client(self) -> AcmeClient:
        """ACME clients keep a per-instance nonce slot, so each worker
        thread gets its own client over the shared account key."""
        client = getattr(self._local, "client", None)
        if client is None:
            client = AcmeClient(
                self.directory_url,
                account_key=self._account_key,
                ca_bundle_pem=self.ca_bundle_pem,
            )
            self._local.client = client
        return client

    def _fulfiller(self, challenge: str):
        if challenge == "dns01":
            return DnsTxtFulfiller(self.zone)
        if challenge == "http01":
            if self.http_shelf is None:
                raise IotPkiError("http01 requested but no token shelf configured")
            return HttpShelfFulfiller(self.http_shelf)
        raise IotPkiError(f"unknown challenge type {challenge!r}")

    @property
    def delegation_public_key(self) -> ed25519.Ed25519PublicKey:
        return self._delegation_key.public_key()

    def revocation_reason(self, device_uuid: uuidlib.UUID) -> RevocationReason | None:
        return self._revocation_reasons.get(device_uuid)

    # -- enrollment ----------------------------------------------------------

    def enroll_device(
        self,
        ns: VendorNamespace,
        secret: DeviceSecret,
        challenge: str = "dns01",
    ) -> ProvisionedDevice:
        bundle, _, _ = self._enroll_timed(ns, secret, challenge)
        return bundle

    def _enroll_timed(
        self, ns: VendorNamespace, secret: DeviceSecret, challenge: str
    ) -> tuple[ProvisionedDevice, float, float]:
        t0 = time.perf_counter()
        device_uuid = derive_device_uuid(ns, secret)
        urn = DeviceUrn(device_uuid, ns)
        self.inventory.upsert_device(urn, now=self.clock())
        self.zone.bind_device(str(urn), self.cloud_target)
        binding_ms = (time.perf_counter() - t0) * 1000.0

        t1 = time.perf_counter()
        # Full (re-)enrollment always injects a fresh keypair; key reuse is
        # a renewal-only property.
        key = generate_key(self.key_algorithm)
        csr = build_csr(key, str(urn))
        try:
            chain = self._client().obtain_certificate(
                str(urn), csr, challenge, self._fulfiller(challenge)
            )
        except IotPkiError as exc:
            self.zone.clear_acme_txt(str(urn))
            raise EnrollmentAborted(f"issuance failed for {urn}: {exc}") from exc
        self._attach_chain(device_uuid, chain)
        with self._keys_lock:
            self._device_keys[device_uuid] = key
            self._challenges[device_uuid] = challenge
        issued_at = self.clock()
        issuance_ms = (time.perf_counter() - t1) * 1000.0
        bundle = ProvisionedDevice(urn, key, chain, issued_at)
        return bundle, binding_ms, issuance_ms

    def _attach_chain(self, device_uuid: uuidlib.UUID, chain: str) -> CertificateMeta:
        leaf = split_pem_chain(chain)[0]
        meta = CertificateMeta(
            serial=format(leaf.serial_number, "x"),
            not_before=leaf.not_valid_before_utc,
            not_after=leaf.not_valid_after_utc,
            public_key_fingerprint=spki_fingerprint(leaf.public_key()),
            issuance_time=self.clock(),
            pem_chain=chain,
        )
        self.inventory.attach_certificate(device_uuid, meta)
        return meta

    def enroll_batch(
        self,
        requests: list[EnrollmentRequest],
        parallelism: int = DEFAULT_PARALLELISM,
    ) -> BatchReport:
        if not requests:
            raise EmptyBatch("enrollment batch is empty")
        if parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {parallelism}")
        with concurrent.futures.ThreadPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(self._enroll_one_row, requests))
        return BatchReport(rows=tuple(rows))

    def _enroll_one_row(self, request: EnrollmentRequest) -> BatchRow:
        try:
            ns = VendorNamespace(request.root_domain, request.device_class)
            secret = DeviceSecret(request.secret)
            device_uuid = derive_device_uuid(ns, secret)
        except IotPkiError as exc:
            return BatchRow("", type(exc).__name__, 0.0, 0.0)
        try:
            _, binding_ms, issuance_ms = self._enroll_timed(ns, secret, request.challenge)
        except Exception as exc:  # per-device outcome, batch never aborts
            log.warning("enrollment failed for %s: %s", device_uuid, exc)
            return BatchRow(str(device_uuid), type(exc).__name__, 0.0, 0.0)
        return BatchRow(str(device_uuid), "ok", binding_ms, issuance_ms)

    # -- renewal -------------------------------------------------------------

    def renewal_tick(
        self,
        now: datetime | None = None,
        window: timedelta = RENEWAL_WINDOW,
    ) -> list[RenewalOutcome]:
        """Renew every due device, reusing its existing keypair. Deferred
        devices (CA unreachable, transient failures) stay due for the next
        tick. Not re-entrant."""
        if not self._tick_lock.acquire(blocking=False):
            raise RenewalBusy("a renewal tick is already running")
        try:
            at = now if now is not None else self.clock()
            outcomes = []
            for record in self.inventory.due_for_renewal(at, window):
                outcomes.append(self._renew_record(record))
            return outcomes
        finally:
            self._tick_lock.release()

    def _renew_record(self, record) -> RenewalOutcome:
        device_uuid = record.uuid
        with self._keys_lock:
            key = self._device_keys.get(device_uuid)
            challenge = self._challenges.get(device_uuid, "dns01")
        old_fp = record.current_cert.public_key_fingerprint if record.current_cert else None
        if key is None:
            return RenewalOutcome(device_uuid, "deferred", "no device key held", None, old_fp)
        self.inventory.set_state(device_uuid, RenewalState.IN_PROGRESS)
        csr = build_csr(key, str(record.urn))
        try:
            chain = self._client().obtain_certificate(
                str(record.urn), csr, challenge, self._fulfiller(challenge)
            )
        except IotPkiError as exc:
            self.inventory.set_state(device_uuid, RenewalState.DUE)
            log.warning("renewal deferred for %s: %s", device_uuid, exc)
            return RenewalOutcome(device_uuid, "deferred", type(exc).__name__, None, old_fp)
        meta = self._attach_chain(device_uuid, chain)
        return RenewalOutcome(
            device_uuid, "renewed", "", meta.serial, meta.public_key_fingerprint
        )

    # -- proxy renewal -------------------------------------------------------

    def make_delegation(
        self,
        gateway_id: str,
        device_uuid: uuidlib.UUID,
        lifetime: timedelta = DEFAULT_DELEGATION_LIFETIME,
    ) -> DelegationRecord:
        return sign_delegation(
            self._delegation_key, gateway_id, device_uuid, self.clock() + lifetime
        )

    def proxy_renew(self, delegation: DelegationRecord, csr) -> str:
        """Renew on behalf of an intermittent device: the gateway presents a
        vendor-signed delegation plus a CSR the device produced. Only the CSR
        transits; the device key never leaves the device."""
        verify_delegation(self.delegation_public_key, delegation, self.clock())
        record = self.inventory.get(delegation.device_uuid)
        if record.renewal_state is RenewalState.REVOKED:
            raise AlreadyRevoked(f"device {delegation.device_uuid} is revoked")
        if record.current_cert is None:
            raise UnknownDevice(
                f"device {delegation.device_uuid} has no certificate on file"
            )
        if spki_fingerprint(csr.public_key()) != record.current_cert.public_key_fingerprint:
            raise KeyMismatch(
                "csr public key does not match the recorded device fingerprint; "
                "key replacement requires full re-enrollment"
            )
        challenge = self._challenges.get(delegation.device_uuid, "dns01")
        self.inventory.set_state(delegation.device_uuid, RenewalState.IN_PROGRESS)
        try:
            chain = self._client().obtain_certificate(
                str(record.urn), csr, challenge, self._fulfiller(challenge)
            )
        except IotPkiError:
            self.inventory.set_state(delegation.device_uuid, RenewalState.DUE)
            raise
        self._attach_chain(delegation.device_uuid, chain)
        self.inventory.set_delegation(delegation.device_uuid, delegation.to_blob())
        return chain

    # -- revocation ----------------------------------------------------------

    def revoke_device(
        self,
        device_uuid: uuidlib.UUID,
        reason: RevocationReason = RevocationReason.UNSPECIFIED,
    ) -> None:
        record = self.inventory.get(device_uuid)
        if record.renewal_state is RenewalState.REVOKED:
            raise AlreadyRevoked(f"device {device_uuid} already revoked")
        if record.current_cert is None:
            raise UnknownDevice(f"device {device_uuid} has no certificate to revoke")
        self.revocation_log.add(record.current_cert.serial)
        self.inventory.set_state(device_uuid, RenewalState.REVOKED)
        self._revocation_reasons[device_uuid] = reason
        log.info("revoked device %s (%s)", device_uuid, reason.value)
