"""Provenance objects, their canonical byte form, hashing, and ed25519 signing.

Canonical layout (v1), all integers big-endian::

    "PHO1" | 0x01 | kind tag
    | u32 len + UTF-8 choreography_instance_id
    | u32 len + UTF-8 workflow_instance_id
    | model_hash (32)
    | u32 count + input hashes (32 each)
    | u32 count + output hashes (32 each)
    | u64 timestamp
    | u32 count + predecessor hashes (32 each)
    [ | u32 count + signatures (16-byte key id + 64-byte signature each) ]

The signing payload is the encoding without the trailing signature block; the
provenance hash is SHA-256 over the full encoding.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import (
    DecodeError,
    EncodingOverflow,
    InvalidKeyMaterial,
    MalformedKey,
    MalformedObject,
    MalformedSignature,
)

MAGIC = b"PHO1"
VERSION = 0x01
DIGEST_SIZE = 32
KEY_ID_SIZE = 16
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32
SECRET_KEY_SIZE = 32

_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


class Kind(enum.Enum):
    EXECUTION = 0x01
    ADAPTATION_MIGRATION = 0x02
    ADAPTATION_ADHOC = 0x03

    @property
    def label(self) -> str:
        return _KIND_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Kind":
        for kind, name in _KIND_LABELS.items():
            if name == label:
                return kind
        raise ValueError(f"unknown object kind {label!r}")


_KIND_LABELS = {
    Kind.EXECUTION: "execution",
    Kind.ADAPTATION_MIGRATION: "adaptation-migration",
    Kind.ADAPTATION_ADHOC: "adaptation-adhoc",
}


@dataclass(frozen=True)
class SignatureEntry:
    key_id: bytes
    signature: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.key_id, bytes) or len(self.key_id) != KEY_ID_SIZE:
            raise MalformedObject("signature key_id must be 16 bytes")
        if not isinstance(self.signature, bytes) or len(self.signature) != SIGNATURE_SIZE:
            raise MalformedObject("signature must be 64 bytes")


def _digest_tuple(name: str, values: Iterable[bytes]) -> tuple[bytes, ...]:
    out = tuple(values)
    for v in out:
        if not isinstance(v, bytes) or len(v) != DIGEST_SIZE:
            raise MalformedObject(f"{name} entries must be 32-byte digests")
    return out


@dataclass(frozen=True)
class ProvenanceObject:
    """Signed record of one execution or one adaptation.

    ``model_hash`` is the executed model for executions, the full new model
    for migrations, and the diff for ad-hoc changes. Signatures are kept
    sorted by key id so co-signed objects have a single canonical form.
    An object with no signatures is the unsigned draft that signers sign.
    """

    kind: Kind
    choreography_instance_id: str
    workflow_instance_id: str
    model_hash: bytes
    input_hashes: Sequence[bytes] = ()
    output_hashes: Sequence[bytes] = ()
    timestamp: int = 0
    predecessor_hashes: Sequence[bytes] = ()
    signatures: Sequence[SignatureEntry] = field(default=())

    def __post_init__(self) -> None:
        if not isinstance(self.kind, Kind):
            raise MalformedObject(f"kind must be a Kind, got {self.kind!r}")
        if not isinstance(self.choreography_instance_id, str) or not self.choreography_instance_id:
            raise MalformedObject("choreography_instance_id must be a non-empty string")
        if not isinstance(self.workflow_instance_id, str):
            raise MalformedObject("workflow_instance_id must be a string")
        if not isinstance(self.model_hash, bytes) or len(self.model_hash) != DIGEST_SIZE:
            raise MalformedObject("model_hash must be a 32-byte digest")
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, int):
            raise MalformedObject("timestamp must be an integer")
        if not 0 <= self.timestamp <= _U64_MAX:
            raise MalformedObject("timestamp must fit in an unsigned 64-bit integer")

        preds = _digest_tuple("predecessor_hashes", self.predecessor_hashes)
        if len(set(preds)) != len(preds):
            raise MalformedObject("predecessor_hashes contains duplicates")
        sigs = tuple(self.signatures)
        for s in sigs:
            if not isinstance(s, SignatureEntry):
                raise MalformedObject("signatures must be SignatureEntry values")
        sigs = tuple(sorted(sigs, key=lambda s: s.key_id))
        if len({s.key_id for s in sigs}) != len(sigs):
            raise MalformedObject("an object may carry at most one signature per key id")

        object.__setattr__(self, "input_hashes", _digest_tuple("input_hashes", self.input_hashes))
        object.__setattr__(self, "output_hashes", _digest_tuple("output_hashes", self.output_hashes))
        object.__setattr__(self, "predecessor_hashes", preds)
        object.__setattr__(self, "signatures", sigs)

    @property
    def is_signed(self) -> bool:
        return bool(self.signatures)

    def unsigned(self) -> "ProvenanceObject":
        return replace(self, signatures=())

    def signing_payload(self) -> bytes:
        return canonical_encode(self, include_signatures=False)

    def encode(self) -> bytes:
        return canonical_encode(self, include_signatures=True)

    def provenance_hash(self) -> bytes:
        return compute_provenance_hash(self)


# -- canonical encoding ------------------------------------------------------


def _u32(n: int) -> bytes:
    if n > _U32_MAX:
        raise EncodingOverflow(f"length {n} exceeds 2^32-1")
    return struct.pack(">I", n)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _u32(len(raw)) + raw


def _pack_digests(values: Sequence[bytes]) -> bytes:
    return _u32(len(values)) + b"".join(values)


def canonical_encode(obj: ProvenanceObject, include_signatures: bool = True) -> bytes:
    """Deterministic, injective byte form of ``obj``.

    With ``include_signatures=False`` this is the payload that gets signed.
    """
    parts = [
        MAGIC,
        bytes((VERSION, obj.kind.value)),
        _pack_str(obj.choreography_instance_id),
        _pack_str(obj.workflow_instance_id),
        obj.model_hash,
        _pack_digests(obj.input_hashes),
        _pack_digests(obj.output_hashes),
        struct.pack(">Q", obj.timestamp),
        _pack_digests(obj.predecessor_hashes),
    ]
    if include_signatures:
        parts.append(_u32(len(obj.signatures)))
        parts.extend(s.key_id + s.signature for s in obj.signatures)
    return b"".join(parts)


def compute_provenance_hash(obj: ProvenanceObject) -> bytes:
    if not obj.signatures:
        raise MalformedObject("a provenance hash is only defined for signed objects")
    return hashlib.sha256(canonical_encode(obj, include_signatures=True)).digest()


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError(f"truncated encoding at offset {self.pos} (wanted {n} bytes)")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8 in string field: {exc}") from None

    def digests(self) -> list[bytes]:
        count = self.u32()
        blob = self.take(count * DIGEST_SIZE)
        return [blob[i:i + DIGEST_SIZE] for i in range(0, len(blob), DIGEST_SIZE)]


def decode_object(data: bytes, include_signatures: bool = True) -> ProvenanceObject:
    """Inverse of :func:`canonical_encode`; rejects anything non-canonical."""
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise DecodeError("bad magic")
    version, tag = r.take(2)
    if version != VERSION:
        raise DecodeError(f"unsupported encoding version {version}")
    try:
        kind = Kind(tag)
    except ValueError:
        raise DecodeError(f"unknown kind tag 0x{tag:02x}") from None
    chor = r.text()
    wf = r.text()
    model = r.take(DIGEST_SIZE)
    inputs = r.digests()
    outputs = r.digests()
    ts = r.u64()
    preds = r.digests()
    sigs = []
    if include_signatures:
        for _ in range(r.u32()):
            entry = r.take(KEY_ID_SIZE + SIGNATURE_SIZE)
            sigs.append(SignatureEntry(entry[:KEY_ID_SIZE], entry[KEY_ID_SIZE:]))
    if r.pos != len(r.data):
        raise DecodeError(f"{len(r.data) - r.pos} trailing bytes")
    try:
        obj = ProvenanceObject(kind, chor, wf, model, inputs, outputs, ts, preds, sigs)
    except MalformedObject as exc:
        raise DecodeError(str(exc)) from None
    if canonical_encode(obj, include_signatures) != r.data:
        raise DecodeError("encoding is not canonical")
    return obj


# -- ed25519 -----------------------------------------------------------------


def generate_secret() -> bytes:
    return os.urandom(SECRET_KEY_SIZE)


def _private_key(secret: bytes) -> Ed25519PrivateKey:
    if not isinstance(secret, (bytes, bytearray)) or len(secret) != SECRET_KEY_SIZE:
        raise InvalidKeyMaterial("ed25519 secret keys are 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(secret))


def public_key_from_secret(secret: bytes) -> bytes:
    return _private_key(secret).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def sign_payload(secret: bytes, payload: bytes) -> bytes:
    return _private_key(secret).sign(bytes(payload))


def verify_signature(public_key: bytes, payload: bytes, signature: bytes) -> bool:
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey("ed25519 public keys are 32 bytes")
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != SIGNATURE_SIZE:
        raise MalformedSignature("ed25519 signatures are 64 bytes")
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), bytes(payload))
    except (InvalidSignature, ValueError):
        return False
    return True


def sign_object(obj: ProvenanceObject, key_id: bytes, secret: bytes) -> ProvenanceObject:
    """Return ``obj`` with a signature by ``secret`` added under ``key_id``.

    Existing signatures are kept; all signers sign the same payload.
    """
    sig = sign_payload(secret, obj.signing_payload())
    others = [s for s in obj.signatures if s.key_id != key_id]
    return replace(obj, signatures=others + [SignatureEntry(bytes(key_id), sig)])
