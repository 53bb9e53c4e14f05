"""Exception hierarchy shared by every layer of the provenance holder.

Every error carries a stable ``code`` (its class name by default) so the
CLI can render it as machine-readable JSON and map it to an exit status.
"""

from __future__ import annotations


class ProvenanceError(Exception):
    """Base class for all domain errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# -- encoding / primitives ---------------------------------------------------


class EncodingOverflow(ProvenanceError, ValueError):
    pass


class DecodeError(ProvenanceError, ValueError):
    """Bytes are not a well-formed canonical encoding."""


class MalformedObject(ProvenanceError, ValueError):
    """A provenance object violates its structural invariants."""


class InvalidKeyMaterial(ProvenanceError, ValueError):
    pass


class MalformedKey(ProvenanceError, ValueError):
    pass


class MalformedSignature(ProvenanceError, ValueError):
    pass


# -- identity ----------------------------------------------------------------


class WrongLength(ProvenanceError, ValueError):
    pass


class InvalidKeyObject(ProvenanceError, ValueError):
    pass


class IdCollision(ProvenanceError):
    """Another key is already registered under this id (TOFU refusal)."""

    def __init__(self, key_id: bytes) -> None:
        super().__init__(f"key id {key_id.hex()} already bound to a different key")
        self.key_id = key_id


class UnknownKeyId(ProvenanceError, LookupError):
    def __init__(self, key_id: bytes) -> None:
        super().__init__(f"no key registered under id {key_id.hex()}")
        self.key_id = key_id


class CorruptKeyStore(ProvenanceError):
    pass


# -- providers ---------------------------------------------------------------


class ProviderError(ProvenanceError):
    pass


class AlreadyStored(ProviderError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"{digest.hex()} is already stored")
        self.hash = digest


class NotFound(ProviderError, LookupError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"{digest.hex()} not found")
        self.hash = digest


class CorruptRecord(ProviderError):
    def __init__(self, message: str, digest: bytes | None = None, offset: int | None = None) -> None:
        super().__init__(message)
        self.hash = digest
        self.offset = offset


class StorageFull(ProviderError):
    pass


class IoFailure(ProviderError):
    def __init__(self, message: str, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


class QueueFull(ProviderError):
    pass


class EmptyBatch(ProviderError, ValueError):
    pass


class AuthorityUnreachable(ProviderError):
    pass


class NotBatched(ProviderError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"{digest.hex()} is queued but not yet part of a batch")
        self.hash = digest


class UnknownHash(ProviderError, LookupError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"{digest.hex()} was never recorded by this provider")
        self.hash = digest


# -- controller --------------------------------------------------------------


class ValidationFailed(ProvenanceError):
    def __init__(self, report) -> None:
        super().__init__(f"validation failed: {report.status.value}")
        self.report = report


class UnknownPredecessor(ProvenanceError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"predecessor {digest.hex()} is not in the object record")
        self.hash = digest


class DuplicateObject(ProvenanceError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"{digest.hex()} is already recorded")
        self.hash = digest


class ProviderFailure(ProvenanceError):
    def __init__(self, provider_id: str, cause: BaseException | None = None) -> None:
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"provider {provider_id!r} failed{detail}")
        self.provider_id = provider_id
        self.cause = cause


class UnknownObject(ProvenanceError, LookupError):
    def __init__(self, digest: bytes) -> None:
        super().__init__(f"{digest.hex()} is not in the object record")
        self.hash = digest


class TargetWriteFailure(ProvenanceError):
    pass


class CorruptIndex(ProvenanceError):
    pass


# -- adapter -----------------------------------------------------------------


class AdapterError(ProvenanceError, ValueError):
    pass


class MalformedXml(AdapterError):
    pass


class MissingConceptName(AdapterError):
    def __init__(self, event_index: int, trace_id: str | None = None) -> None:
        where = f" in trace {trace_id!r}" if trace_id else ""
        super().__init__(f"event {event_index}{where} has no concept:name")
        self.event_index = event_index


class MissingTimestamp(AdapterError):
    def __init__(self, event_index: int, trace_id: str | None = None) -> None:
        where = f" in trace {trace_id!r}" if trace_id else ""
        super().__init__(f"event {event_index}{where} has no usable time:timestamp")
        self.event_index = event_index


class UnknownChangeType(AdapterError):
    pass


class MissingRequiredAttribute(AdapterError):
    pass


class ConflictingAttribute(AdapterError):
    pass


class MissingSignature(AdapterError):
    pass


class MalformedDigest(AdapterError):
    pass


class MalformedQuery(AdapterError):
    pass


# -- cli ---------------------------------------------------------------------


class ConfigError(ProvenanceError, ValueError):
    pass


class LockHeld(ProvenanceError):
    pass
