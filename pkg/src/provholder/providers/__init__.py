from .authority import AuthorityClient, HttpAuthorityClient, MockAuthority, MockAuthorityServer
from .base import CorruptItem, Provider, ProviderReceipt
from .simple import SimpleStorage
from .timestamp import (
    PendingEntry,
    ProofStatus,
    RootRecord,
    RootStatus,
    StatusTransition,
    TimestampProof,
    TimestampProvider,
    verify_proof,
)

__all__ = [
    "AuthorityClient",
    "CorruptItem",
    "HttpAuthorityClient",
    "MockAuthority",
    "MockAuthorityServer",
    "PendingEntry",
    "ProofStatus",
    "Provider",
    "ProviderReceipt",
    "RootRecord",
    "RootStatus",
    "SimpleStorage",
    "StatusTransition",
    "TimestampProof",
    "TimestampProvider",
    "verify_proof",
]
