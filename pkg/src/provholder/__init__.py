"""Trusted provenance for collaborative, adaptive data-processing pipelines.

Participants sign provenance objects describing executions and adaptations.
The holder checks each signature against a trust-on-first-use key store and
links the object to its predecessors before handing it to storage providers.
A Merkle-batching timestamp provider anchors the hashes.
"""

__version__ = "0.1.0"

from .adapter import Adapter, Format, identify_predecessors, parse_xes
from .controller import (
    Controller,
    MigrationReport,
    ObjectRecord,
    PathElement,
    ProvenancePath,
    ValidationReport,
    ValidationStatus,
    validate,
)
from .encoding import (
    Kind,
    ProvenanceObject,
    SignatureEntry,
    canonical_encode,
    compute_provenance_hash,
    decode_object,
    sign_object,
    sign_payload,
    verify_signature,
)
from .identity import KeyObject, KeyStore, create_key_object, verify_key_object

__all__ = [
    "Adapter",
    "Controller",
    "Format",
    "KeyObject",
    "KeyStore",
    "Kind",
    "MigrationReport",
    "ObjectRecord",
    "PathElement",
    "ProvenanceObject",
    "ProvenancePath",
    "SignatureEntry",
    "ValidationReport",
    "ValidationStatus",
    "canonical_encode",
    "compute_provenance_hash",
    "create_key_object",
    "decode_object",
    "identify_predecessors",
    "parse_xes",
    "sign_object",
    "sign_payload",
    "validate",
    "verify_key_object",
    "verify_signature",
]
