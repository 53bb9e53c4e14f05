"""Controller: validation, recording, retrieval and migration across providers.

The controller owns the *object record*, an append-only index mapping each
recorded provenance hash to its predecessor hashes. Because ``collect``
refuses objects whose predecessors are not yet recorded, the record's
insertion order is a topological order of the provenance DAG and every
back-trace terminates at genesis objects.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .encoding import DIGEST_SIZE, Kind, ProvenanceObject, verify_signature
from .errors import (
    AlreadyStored,
    CorruptIndex,
    CorruptRecord,
    DuplicateObject,
    MalformedObject,
    NotBatched,
    NotFound,
    ProvenanceError,
    ProviderError,
    ProviderFailure,
    TargetWriteFailure,
    UnknownHash,
    UnknownObject,
    UnknownPredecessor,
    ValidationFailed,
)
from .identity import KeyStore
from .jsonfmt import object_to_json
from .providers.base import CorruptItem, Provider, ProviderReceipt, now
from .providers.timestamp import verify_proof

logger = logging.getLogger(__name__)

RECORD_MAGIC = b"PHR1"


# -- object record -----------------------------------------------------------


class ObjectRecord:
    """Append-only ``hash -> predecessors`` index, optionally file-backed.

    A file that cannot be parsed, or whose entries reference predecessors
    not recorded earlier, marks the record ``corrupt`` instead of raising;
    the controller then rebuilds it from its providers.
    """

    def __init__(self, path: str | os.PathLike | None = None, *, durable: bool = True) -> None:
        self.path = Path(path) if path is not None else None
        self.durable = durable
        self.corrupt = False
        self._entries: dict[bytes, tuple[bytes, ...]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            try:
                self._load()
            except CorruptIndex as exc:
                logger.error("object record %s is corrupt: %s", self.path, exc)
                self._entries.clear()
                self.corrupt = True

    def _load(self) -> None:
        data = self.path.read_bytes()
        pos = 0
        good = 0
        while pos < len(data):
            if len(data) - pos < 40:
                break
            if data[pos:pos + 4] != RECORD_MAGIC:
                raise CorruptIndex(f"bad entry magic at offset {pos}")
            digest = data[pos + 4:pos + 36]
            count = struct.unpack(">I", data[pos + 36:pos + 40])[0]
            end = pos + 40 + count * DIGEST_SIZE
            if end > len(data):
                break
            preds = tuple(data[i:i + DIGEST_SIZE] for i in range(pos + 40, end, DIGEST_SIZE))
            if digest in self._entries:
                raise CorruptIndex(f"duplicate entry {digest.hex()} at offset {pos}")
            for p in preds:
                if p not in self._entries:
                    raise CorruptIndex(f"entry {digest.hex()} references unrecorded predecessor {p.hex()}")
            self._entries[digest] = preds
            pos = good = end
        if good < len(data):
            logger.warning("truncating torn object-record entry at offset %d", good)
            os.truncate(self.path, good)

    @staticmethod
    def _encode(digest: bytes, preds: Sequence[bytes]) -> bytes:
        return RECORD_MAGIC + digest + struct.pack(">I", len(preds)) + b"".join(preds)

    def append(self, digest: bytes, preds: Sequence[bytes]) -> None:
        preds = tuple(preds)
        with self._lock:
            if digest in self._entries:
                raise DuplicateObject(digest)
            for p in preds:
                if p not in self._entries:
                    raise UnknownPredecessor(p)
            if self.path is not None:
                with open(self.path, "ab") as fh:
                    fh.write(self._encode(digest, preds))
                    fh.flush()
                    if self.durable:
                        os.fsync(fh.fileno())
            self._entries[digest] = preds

    def replace_all(self, entries: Iterable[tuple[bytes, Sequence[bytes]]]) -> None:
        """Atomically replace the whole record (used by rebuilds)."""
        fresh: dict[bytes, tuple[bytes, ...]] = {}
        for digest, preds in entries:
            fresh[digest] = tuple(preds)
        with self._lock:
            if self.path is not None:
                tmp = self.path.with_suffix(self.path.suffix + ".rebuild")
                with open(tmp, "wb") as fh:
                    for digest, preds in fresh.items():
                        fh.write(self._encode(digest, preds))
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.path)
            self._entries = fresh
            self.corrupt = False

    def predecessors(self, digest: bytes) -> tuple[bytes, ...]:
        try:
            return self._entries[digest]
        except KeyError:
            raise UnknownObject(digest) from None

    def __contains__(self, digest: object) -> bool:
        return digest in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[bytes]:
        return iter(list(self._entries))

    def items(self) -> list[tuple[bytes, tuple[bytes, ...]]]:
        return list(self._entries.items())


# -- validation --------------------------------------------------------------


class ValidationStatus(enum.Enum):
    VALID = "valid"
    SIGNATURE_INVALID = "signature_invalid"
    UNKNOWN_SIGNER = "unknown_signer"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class ValidationReport:
    hash: bytes | None
    status: ValidationStatus
    signatures: tuple[tuple[bytes, bool], ...] = ()
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status is ValidationStatus.VALID

    def to_json(self) -> dict:
        return {
            "hash": self.hash.hex() if self.hash else None,
            "status": self.status.value,
            "signatures": [{"key_id": k.hex(), "valid": v} for k, v in self.signatures],
            "detail": self.detail,
        }


def validate(obj: ProvenanceObject, keys: KeyStore) -> ValidationReport:
    """Check every signature of ``obj`` against the registered signer keys."""
    if not isinstance(obj, ProvenanceObject):
        return ValidationReport(None, ValidationStatus.MALFORMED, detail="not a provenance object")
    if not obj.signatures:
        return ValidationReport(None, ValidationStatus.MALFORMED, detail="object carries no signatures")
    try:
        digest = obj.provenance_hash()
    except ProvenanceError as exc:
        return ValidationReport(None, ValidationStatus.MALFORMED, detail=str(exc))
    if digest in obj.predecessor_hashes:
        return ValidationReport(digest, ValidationStatus.MALFORMED, detail="object lists itself as predecessor")

    payload = obj.signing_payload()
    results = []
    unknown = False
    for sig in obj.signatures:
        key = keys.get(sig.key_id)
        if key is None:
            unknown = True
            results.append((sig.key_id, False))
        else:
            results.append((sig.key_id, verify_signature(key.pubkey, payload, sig.signature)))
    if unknown:
        status = ValidationStatus.UNKNOWN_SIGNER
    elif all(ok for _, ok in results):
        status = ValidationStatus.VALID
    else:
        status = ValidationStatus.SIGNATURE_INVALID
    return ValidationReport(digest, status, tuple(results))


# -- retrieval results --------------------------------------------------------


@dataclass
class PathElement:
    hash: bytes
    parent: bytes | None
    predecessors: tuple[bytes, ...]
    object: ProvenanceObject | None
    report: ValidationReport | None
    providers: dict[str, str]
    discrepancy: bool
    timestamps: dict[str, str] = field(default_factory=dict)

    @property
    def status(self) -> str:
        return self.report.status.value if self.report else "unavailable"

    def to_json(self) -> dict:
        return {
            "hash": self.hash.hex(),
            "parent": self.parent.hex() if self.parent else None,
            "predecessors": [p.hex() for p in self.predecessors],
            "status": self.status,
            "signatures": self.report.to_json()["signatures"] if self.report else [],
            "discrepancy": self.discrepancy,
            "providers": dict(sorted(self.providers.items())),
            "timestamps": dict(sorted(self.timestamps.items())),
            "object": object_to_json(self.object) if self.object else None,
        }


@dataclass
class ProvenancePath:
    """Depth-first back-trace from a queried object to its origin(s).

    Each element's ``parent`` is the element whose predecessor list led to
    it; for a simple chain this is just the previous element.
    """

    query: bytes
    elements: list[PathElement]

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self) -> Iterator[PathElement]:
        return iter(self.elements)

    @property
    def hashes(self) -> list[bytes]:
        return [e.hash for e in self.elements]

    @property
    def discrepancies(self) -> list[bytes]:
        return [e.hash for e in self.elements if e.discrepancy]

    @property
    def origins(self) -> list[bytes]:
        return [e.hash for e in self.elements if not e.predecessors]

    @property
    def all_valid(self) -> bool:
        return all(e.report is not None and e.report.ok and not e.discrepancy for e in self.elements)

    def to_json(self) -> dict:
        return {
            "query": self.query.hex(),
            "length": len(self.elements),
            "all_valid": self.all_valid,
            "discrepancies": [h.hex() for h in self.discrepancies],
            "elements": [e.to_json() for e in self.elements],
        }


@dataclass
class MigrationReport:
    source: str
    target: str
    migrated: list[bytes] = field(default_factory=list)
    already_present: list[bytes] = field(default_factory=list)
    excluded: list[dict] = field(default_factory=list)
    purged: list[bytes] = field(default_factory=list)
    indexed: int = 0

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "migrated": [h.hex() for h in self.migrated],
            "already_present": [h.hex() for h in self.already_present],
            "excluded": self.excluded,
            "purged": [h.hex() for h in self.purged],
            "indexed": self.indexed,
            "counts": {
                "migrated": len(self.migrated),
                "excluded": len(self.excluded),
                "purged": len(self.purged),
            },
        }


# -- controller ----------------------------------------------------------------


class Controller:
    """Coordinates the key store, the object record and the providers.

    ``selection`` maps an object kind to the provider ids that record it;
    kinds missing from the map go to every provider. Object-storing
    providers are always written before hash-only ones such as the
    timestamping provider.

    Signature checks of successfully validated objects are memoised by
    provenance hash (``verify_cache_size`` entries, 0 disables). Retrieval
    still re-reads and re-hashes every copy from every provider; the memo
    only skips repeating an ed25519 verification over bytes already known
    to verify under a key binding that can never change.
    """

    def __init__(
        self,
        keys: KeyStore,
        providers: Sequence[Provider],
        record: ObjectRecord | None = None,
        selection: Mapping[Kind, Sequence[str]] | None = None,
        *,
        verify_cache_size: int = 65536,
    ) -> None:
        if not providers:
            raise ValueError("a controller needs at least one provider")
        self.keys = keys
        self.providers: dict[str, Provider] = {}
        for p in providers:
            if p.provider_id in self.providers:
                raise ValueError(f"duplicate provider id {p.provider_id!r}")
            self.providers[p.provider_id] = p
        self.selection = {k: list(v) for k, v in (selection or {}).items()}
        for kind, ids in self.selection.items():
            unknown = [i for i in ids if i not in self.providers]
            if unknown:
                raise ValueError(f"selection for {kind.label} names unknown providers {unknown}")
            if not ids:
                raise ValueError(f"selection for {kind.label} is empty")
        self.record = record if record is not None else ObjectRecord()
        self._write_lock = threading.RLock()
        self._verified: OrderedDict[bytes, ValidationReport] = OrderedDict()
        self._cache_size = verify_cache_size
        self._cache_lock = threading.Lock()
        if self.record.corrupt:
            self.rebuild_record()

    # -- helpers ---------------------------------------------------------------

    @property
    def storing_providers(self) -> list[Provider]:
        return [p for p in self.providers.values() if p.stores_objects]

    @property
    def stamping_providers(self) -> list[Provider]:
        return [p for p in self.providers.values() if not p.stores_objects]

    def providers_for(self, kind: Kind) -> list[Provider]:
        ids = self.selection.get(kind)
        chosen = [self.providers[i] for i in ids] if ids else list(self.providers.values())
        return [p for p in chosen if p.stores_objects] + [p for p in chosen if not p.stores_objects]

    def _resolve(self, provider: Provider | str) -> Provider:
        if isinstance(provider, Provider):
            return provider
        try:
            return self.providers[provider]
        except KeyError:
            raise ValueError(f"unknown provider {provider!r}") from None

    def close(self) -> None:
        for p in self.providers.values():
            p.close()

    # -- validation --------------------------------------------------------------

    def validate(self, obj: ProvenanceObject) -> ValidationReport:
        return validate(obj, self.keys)

    def _validate_cached(self, obj: ProvenanceObject, digest: bytes) -> ValidationReport:
        if self._cache_size:
            with self._cache_lock:
                hit = self._verified.get(digest)
                if hit is not None:
                    self._verified.move_to_end(digest)
                    return hit
        report = self.validate(obj)
        if report.ok and report.hash == digest:
            self._remember(report)
        return report

    def _remember(self, report: ValidationReport) -> None:
        if not self._cache_size:
            return
        with self._cache_lock:
            self._verified[report.hash] = report
            if len(self._verified) > self._cache_size:
                self._verified.popitem(last=False)

    # -- collect ---------------------------------------------------------------

    def exists(self, digest: bytes) -> bool:
        return digest in self.record

    def collect(self, obj: ProvenanceObject) -> list[ProviderReceipt]:
        """Validate ``obj`` and record it at every selected provider.

        Recording is two-phase: all providers write first and the object
        record entry is committed only once every write succeeded. On any
        failure the copies already written are deleted again.
        """
        with self._write_lock:
            report = self.validate(obj)
            if not report.ok:
                raise ValidationFailed(report)
            digest = report.hash
            if digest in self.record:
                raise DuplicateObject(digest)
            for pred in obj.predecessor_hashes:
                if pred not in self.record:
                    raise UnknownPredecessor(pred)

            receipts: list[ProviderReceipt] = []
            written: list[Provider] = []
            for provider in self.providers_for(obj.kind):
                try:
                    receipts.append(provider.record(obj))
                except AlreadyStored:
                    # leftover of an earlier uncommitted attempt
                    receipts.append(ProviderReceipt(provider.provider_id, digest, now(), "already stored"))
                except (ProvenanceError, OSError) as exc:
                    self._rollback(written + [provider], digest)
                    raise ProviderFailure(provider.provider_id, exc) from exc
                written.append(provider)
            try:
                self.record.append(digest, obj.predecessor_hashes)
            except OSError as exc:
                self._rollback(written, digest)
                raise ProviderFailure("object-record", exc) from exc
            self._remember(report)
        logger.debug("collected %s", digest.hex())
        return receipts

    def _rollback(self, providers: Iterable[Provider], digest: bytes) -> None:
        for provider in providers:
            try:
                provider.delete(digest)
            except Exception:
                logger.exception("rollback of %s at %s failed", digest.hex(), provider.provider_id)

    # -- retrieve ----------------------------------------------------------------

    def _fetch(self, digest: bytes, parent: bytes | None) -> tuple[PathElement, bool]:
        statuses: dict[str, str] = {}
        copies: list[tuple[str, ProvenanceObject, bytes, ValidationReport]] = []
        answered = False
        for provider in self.storing_providers:
            pid = provider.provider_id
            try:
                obj = provider.retrieve_one(digest)
            except NotFound:
                statuses[pid] = "missing"
                answered = True
                continue
            except CorruptRecord:
                statuses[pid] = "corrupt"
                answered = True
                continue
            except (ProviderError, OSError) as exc:
                logger.warning("provider %s unavailable for %s: %s", pid, digest.hex(), exc)
                statuses[pid] = "unavailable"
                continue
            answered = True
            enc = obj.encode()
            if hashlib.sha256(enc).digest() != digest:
                statuses[pid] = "hash_mismatch"
                continue
            report = self._validate_cached(obj, digest)
            statuses[pid] = "ok" if report.ok else report.status.value
            copies.append((pid, obj, enc, report))

        chosen = next((c for c in copies if c[3].ok), copies[0] if copies else None)
        discrepancy = len(set(statuses.values())) > 1 or len({c[2] for c in copies}) > 1

        stamps: dict[str, str] = {}
        for provider in self.stamping_providers:
            try:
                stamps[provider.provider_id] = verify_proof(provider.retrieve_one(digest)).value
            except NotBatched:
                stamps[provider.provider_id] = "unbatched"
            except UnknownHash:
                stamps[provider.provider_id] = "absent"
            except (ProviderError, OSError):
                stamps[provider.provider_id] = "unavailable"

        element = PathElement(
            hash=digest,
            parent=parent,
            predecessors=self.record.predecessors(digest),
            object=chosen[1] if chosen else None,
            report=chosen[3] if chosen else None,
            providers=statuses,
            discrepancy=discrepancy,
            timestamps=stamps,
        )
        return element, answered

    def retrieve(self, digest: bytes) -> ProvenancePath:
        """Back-trace ``digest`` to its origin(s), fetching and checking each object.

        Predecessors are expanded depth-first in stored order and every
        ancestor appears once. Each object is read from every object-storing
        provider; differing bytes, statuses or validation outcomes between
        providers set the element's ``discrepancy`` flag.
        """
        if digest not in self.record:
            raise UnknownObject(digest)
        if not self.storing_providers:
            raise ProviderFailure("*", ProviderError("no object-storing provider configured"))
        elements: list[PathElement] = []
        visited: set[bytes] = set()
        stack: list[tuple[bytes, bytes | None]] = [(digest, None)]
        while stack:
            node, parent = stack.pop()
            if node in visited:
                continue
            visited.add(node)
            element, answered = self._fetch(node, parent)
            if not elements and not answered:
                raise ProviderFailure(",".join(element.providers), ProviderError("no provider answered"))
            elements.append(element)
            for pred in reversed(element.predecessors):
                if pred not in visited:
                    stack.append((pred, node))
        return ProvenancePath(digest, elements)

    # -- migration -------------------------------------------------------------

    def migrate(self, source: Provider | str, target: Provider | str, purge: bool = False) -> MigrationReport:
        """Copy every valid object from ``source`` to ``target``.

        Invalid and corrupt records are excluded and itemised. With
        ``purge`` the transferred objects are deleted from ``source`` once
        the target has returned an identical copy of each of them.
        """
        src = self._resolve(source)
        dst = self._resolve(target)
        same_root = getattr(src, "root", None) is not None and getattr(dst, "root", None) is not None and (
            Path(src.root).resolve() == Path(dst.root).resolve()
        )
        if src is dst or src.provider_id == dst.provider_id or same_root:
            raise ValueError("source and target must differ")
        if not (src.stores_objects and dst.stores_objects):
            raise ValueError("migration needs object-storing providers on both ends")

        report = MigrationReport(src.provider_id, dst.provider_id)
        transferred: list[tuple[bytes, bytes]] = []
        with self._write_lock:
            for position, item in enumerate(src.retrieve_all()):
                if isinstance(item, CorruptItem):
                    report.excluded.append(
                        {"hash": item.hash.hex() if item.hash else None, "position": position, "reason": item.reason}
                    )
                    continue
                digest = item.provenance_hash()
                check = self._validate_cached(item, digest)
                if not check.ok:
                    report.excluded.append({"hash": digest.hex(), "position": position, "reason": check.status.value})
                    continue
                try:
                    dst.record(item)
                    report.migrated.append(digest)
                except AlreadyStored:
                    report.already_present.append(digest)
                except (ProvenanceError, OSError) as exc:
                    err = TargetWriteFailure(f"writing {digest.hex()} to {dst.provider_id} failed: {exc}")
                    err.report = report
                    raise err from exc
                transferred.append((digest, item.encode()))
                if digest not in self.record and all(p in self.record for p in item.predecessor_hashes):
                    self.record.append(digest, item.predecessor_hashes)
                    report.indexed += 1

            if purge:
                for digest, enc in transferred:
                    try:
                        confirmed = dst.retrieve_one(digest).encode() == enc
                    except ProvenanceError:
                        confirmed = False
                    if not confirmed:
                        err = TargetWriteFailure(f"target did not confirm {digest.hex()}; nothing purged")
                        err.report = report
                        raise err
                for digest, _ in transferred:
                    if src.delete(digest):
                        report.purged.append(digest)
        logger.info(
            "migrated %d objects %s -> %s (%d excluded, %d purged)",
            len(report.migrated), src.provider_id, dst.provider_id, len(report.excluded), len(report.purged),
        )
        return report

    # -- record maintenance --------------------------------------------------------

    def iter_objects(self) -> Iterator[tuple[bytes, ProvenanceObject]]:
        """Recorded objects in record order, read from the first provider holding each."""
        for digest in self.record:
            for provider in self.storing_providers:
                try:
                    yield digest, provider.retrieve_one(digest)
                    break
                except (ProviderError, OSError):
                    continue

    def rebuild_record(self) -> int:
        """Recreate the object record by scanning the object-storing providers."""
        entries: dict[bytes, tuple[bytes, ...]] = {}
        for provider in self.storing_providers:
            for item in provider.retrieve_all():
                if isinstance(item, CorruptItem):
                    continue
                digest = item.provenance_hash()
                if digest in entries or not self.validate(item).ok:
                    continue
                if all(p in entries for p in item.predecessor_hashes):
                    entries[digest] = item.predecessor_hashes
                else:
                    logger.warning("rebuild: %s has unrecorded predecessors, skipped", digest.hex())
        self.record.replace_all(entries.items())
        logger.info("object record rebuilt with %d entries", len(entries))
        return len(entries)
