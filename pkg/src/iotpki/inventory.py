"""Vendor-side device registry: identity, certificate metadata, renewal state.

The registry is the metadata table the provisioning backend consults for
policy enforcement. It never holds private-key material; the snapshot
writer refuses to persist anything that looks like a key block.

Snapshot format (external interface): a header line ``ATLASINV v1``, one
compact JSON object per record line, and a ``sha256 <hex>`` trailer over
all preceding bytes. Timestamps are RFC 3339 UTC.
"""

from __future__ import annotations

import hashlib
import json
import threading
import uuid as uuidlib
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path

from .errors import IoFailure, IotPkiError
from .identity import DeviceUrn, parse_urn

SNAPSHOT_HEADER = "ATLASINV v1"
MAX_CERT_LIFETIME = timedelta(days=90)
RENEWAL_WINDOW = timedelta(days=30)

_KEY_BLOCK_MARKER = "PRIVATE KEY"


class StorageFailure(IotPkiError):
    pass


class UnknownDevice(IotPkiError):
    pass


class InvalidMeta(IotPkiError):
    pass


class CorruptSnapshot(IotPkiError):
    pass


class RenewalState(str, Enum):
    CURRENT = "current"
    DUE = "due"
    IN_PROGRESS = "in_progress"
    EXPIRED = "expired"
    REVOKED = "revoked"


def to_rfc3339(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def from_rfc3339(s: str) -> datetime:
    return datetime.fromisoformat(s.replace("Z", "+00:00")).astimezone(timezone.utc)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class CertificateMeta:
    """Metadata for one issued certificate (the certificate itself is
    public material and rides along as PEM)."""

    serial: str
    not_before: datetime
    not_after: datetime
    public_key_fingerprint: str
    issuance_time: datetime
    pem_chain: str

    def __post_init__(self) -> None:
        if self.not_before >= self.not_after:
            raise InvalidMeta(
                f"not_before {self.not_before} is not earlier than not_after {self.not_after}"
            )
        if self.not_after - self.not_before > MAX_CERT_LIFETIME:
            raise InvalidMeta(
                f"lifetime {self.not_after - self.not_before} exceeds 90 days"
            )
        if _KEY_BLOCK_MARKER in self.pem_chain:
            raise InvalidMeta("certificate metadata must not carry key material")


@dataclass(frozen=True)
class DeviceRecord:
    urn: DeviceUrn
    uuid: uuidlib.UUID
    current_cert: CertificateMeta | None
    renewal_state: RenewalState
    gateway_delegation: str | None
    created_at: datetime


class Inventory:
    """In-memory registry with checksummed single-file snapshots.

    Concurrency: single writer, many readers. All mutations take the
    internal lock; reads hand out frozen copies.
    """

    def __init__(self) -> None:
        self._records: dict[uuidlib.UUID, DeviceRecord] = {}
        self._lock = threading.RLock()

    # -- mutations ---------------------------------------------------------

    def upsert_device(self, urn: DeviceUrn, now: datetime | None = None) -> DeviceRecord:
        """Create (or return) the record keyed by the URN's UUID. Idempotent."""
        with self._lock:
            existing = self._records.get(urn.uuid)
            if existing is not None:
                return existing
            record = DeviceRecord(
                urn=urn,
                uuid=urn.uuid,
                current_cert=None,
                renewal_state=RenewalState.DUE,
                gateway_delegation=None,
                created_at=now or utcnow(),
            )
            self._records[urn.uuid] = record
            return record

    def attach_certificate(self, device_uuid: uuidlib.UUID, meta: CertificateMeta) -> DeviceRecord:
        with self._lock:
            record = self._require(device_uuid)
            record = replace(record, current_cert=meta, renewal_state=RenewalState.CURRENT)
            self._records[device_uuid] = record
            return record

    def set_state(self, device_uuid: uuidlib.UUID, state: RenewalState) -> DeviceRecord:
        with self._lock:
            record = replace(self._require(device_uuid), renewal_state=state)
            self._records[device_uuid] = record
            return record

    def set_delegation(self, device_uuid: uuidlib.UUID, delegation_b64: str | None) -> DeviceRecord:
        with self._lock:
            record = replace(self._require(device_uuid), gateway_delegation=delegation_b64)
            self._records[device_uuid] = record
            return record

    def sweep_expired(self, now: datetime) -> list[DeviceRecord]:
        """Flip current/due records whose certificate lapsed to expired."""
        flipped = []
        with self._lock:
            for device_uuid, record in list(self._records.items()):
                if (
                    record.current_cert is not None
                    and record.renewal_state in (RenewalState.CURRENT, RenewalState.DUE)
                    and now > record.current_cert.not_after
                ):
                    record = replace(record, renewal_state=RenewalState.EXPIRED)
                    self._records[device_uuid] = record
                    flipped.append(record)
        return flipped

    # -- reads -------------------------------------------------------------

    def get(self, device_uuid: uuidlib.UUID) -> DeviceRecord:
        with self._lock:
            return self._require(device_uuid)

    def records(self) -> list[DeviceRecord]:
        with self._lock:
            return sorted(self._records.values(), key=lambda r: str(r.uuid))

    def __len__(self) -> int:
        return len(self._records)

    def due_for_renewal(
        self, now: datetime, window: timedelta = RENEWAL_WINDOW
    ) -> list[DeviceRecord]:
        """Records whose cert expires within ``window`` and that are not
        revoked or already being renewed. Marks nothing."""
        out = []
        with self._lock:
            for record in self._records.values():
                if record.current_cert is None:
                    continue
                if record.renewal_state in (RenewalState.REVOKED, RenewalState.IN_PROGRESS):
                    continue
                if record.current_cert.not_after - now <= window:
                    out.append(record)
        return sorted(out, key=lambda r: str(r.uuid))

    def _require(self, device_uuid: uuidlib.UUID) -> DeviceRecord:
        record = self._records.get(device_uuid)
        if record is None:
            raise UnknownDevice(str(device_uuid))
        return record

    # -- snapshots ----------------------------------------------------------

    def snapshot(self, path: str | Path) -> None:
        with self._lock:
            lines = [SNAPSHOT_HEADER]
            for record in self.records():
                lines.append(json.dumps(_record_to_obj(record), separators=(",", ":")))
        body = "\n".join(lines) + "\n"
        if _KEY_BLOCK_MARKER in body:
            raise StorageFailure("refusing to persist key material")
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        try:
            Path(path).write_text(body + f"sha256 {digest}\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def restore(cls, path: str | Path) -> "Inventory":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        lines = text.splitlines(keepends=True)
        if not lines or not lines[-1].startswith("sha256 "):
            raise CorruptSnapshot("missing checksum trailer")
        body = "".join(lines[:-1])
        expected = lines[-1].split(" ", 1)[1].strip()
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != expected:
            raise CorruptSnapshot("checksum mismatch")
        record_lines = body.splitlines()
        if not record_lines or record_lines[0] != SNAPSHOT_HEADER:
            raise CorruptSnapshot(f"bad header: {record_lines[:1]!r}")
        inv = cls()
        for line in record_lines[1:]:
            try:
                record = _record_from_obj(json.loads(line))
            except (ValueError, KeyError) as exc:
                raise CorruptSnapshot(f"bad record line: {exc}") from exc
            inv._records[record.uuid] = record
        return inv


def _record_to_obj(record: DeviceRecord) -> dict:
    cert = record.current_cert
    return {
        "uuid": str(record.uuid),
        "urn": str(record.urn),
        "state": record.renewal_state.value,
        "created_at": to_rfc3339(record.created_at),
        "delegation": record.gateway_delegation,
        "cert": None
        if cert is None
        else {
            "serial": cert.serial,
            "not_before": to_rfc3339(cert.not_before),
            "not_after": to_rfc3339(cert.not_after),
            "fingerprint": cert.public_key_fingerprint,
            "issued_at": to_rfc3339(cert.issuance_time),
            "pem": cert.pem_chain,
        },
    }


def _record_from_obj(obj: dict) -> DeviceRecord:
    cert_obj = obj.get("cert")
    cert = None
    if cert_obj is not None:
        cert = CertificateMeta(
            serial=cert_obj["serial"],
            not_before=from_rfc3339(cert_obj["not_before"]),
            not_after=from_rfc3339(cert_obj["not_after"]),
            public_key_fingerprint=cert_obj["fingerprint"],
            issuance_time=from_rfc3339(cert_obj["issued_at"]),
            pem_chain=cert_obj["pem"],
        )
    urn = parse_urn(obj["urn"])
    return DeviceRecord(
        urn=urn,
        uuid=urn.uuid,
        current_cert=cert,
        renewal_state=RenewalState(obj["state"]),
        gateway_delegation=obj.get("delegation"),
        created_at=from_rfc3339(obj["created_at"]),
    )
