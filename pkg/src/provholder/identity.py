"""Participant key objects and the trust-on-first-use key store.

A key object binds a name, mail address and creation date to an ed25519
public key. Its fingerprint is a self-signature over those fields and its id
is the last 16 bytes of the fingerprint, so ids cannot be chosen freely.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .encoding import (
    KEY_ID_SIZE,
    PUBLIC_KEY_SIZE,
    SIGNATURE_SIZE,
    public_key_from_secret,
    sign_payload,
    verify_signature,
)
from .errors import (
    CorruptKeyStore,
    IdCollision,
    InvalidKeyObject,
    UnknownKeyId,
    WrongLength,
)

logger = logging.getLogger(__name__)

KEY_MAGIC = b"PHK1"
FINGERPRINT_SIZE = SIGNATURE_SIZE


@dataclass(frozen=True)
class KeyObject:
    id: bytes
    name: str
    mail: str
    date: int
    fingerprint: bytes
    pubkey: bytes

    def signing_payload(self) -> bytes:
        return key_signing_payload(self.name, self.mail, self.date, self.pubkey)

    def to_json(self) -> dict:
        return {
            "id": self.id.hex(),
            "name": self.name,
            "mail": self.mail,
            "date": self.date,
            "fingerprint": self.fingerprint.hex(),
            "pubkey": self.pubkey.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "KeyObject":
        try:
            return cls(
                id=bytes.fromhex(data["id"]),
                name=str(data["name"]),
                mail=str(data["mail"]),
                date=int(data["date"]),
                fingerprint=bytes.fromhex(data["fingerprint"]),
                pubkey=bytes.fromhex(data["pubkey"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidKeyObject(f"malformed key object JSON: {exc}") from None


def key_signing_payload(name: str, mail: str, date: int, pubkey: bytes) -> bytes:
    n = name.encode("utf-8")
    m = mail.encode("utf-8")
    return b"".join(
        (
            KEY_MAGIC,
            struct.pack(">I", len(n)),
            n,
            struct.pack(">I", len(m)),
            m,
            struct.pack(">Q", date),
            pubkey,
        )
    )


def derive_key_id(fingerprint: bytes) -> bytes:
    if len(fingerprint) != FINGERPRINT_SIZE:
        raise WrongLength(f"fingerprint must be {FINGERPRINT_SIZE} bytes, got {len(fingerprint)}")
    return bytes(fingerprint[-KEY_ID_SIZE:])


def create_key_object(name: str, mail: str, date: int, secret: bytes) -> KeyObject:
    """Build and self-sign a key object for the keypair derived from ``secret``."""
    if not name:
        raise InvalidKeyObject("name must be non-empty")
    pubkey = public_key_from_secret(secret)
    fingerprint = sign_payload(secret, key_signing_payload(name, mail, date, pubkey))
    return KeyObject(derive_key_id(fingerprint), name, mail, date, fingerprint, pubkey)


def verify_key_object(key: KeyObject) -> bool:
    try:
        if len(key.pubkey) != PUBLIC_KEY_SIZE or len(key.fingerprint) != FINGERPRINT_SIZE:
            return False
        if not key.name or not 0 <= key.date < 2**64:
            return False
        if key.id != derive_key_id(key.fingerprint):
            return False
        return verify_signature(key.pubkey, key.signing_payload(), key.fingerprint)
    except (TypeError, ValueError, AttributeError, UnicodeError):
        return False


# -- on-disk record ----------------------------------------------------------


def encode_key_record(key: KeyObject) -> bytes:
    return KEY_MAGIC + key.id + key.signing_payload() + key.fingerprint


class _Truncated(Exception):
    pass


def _read_key_records(data: bytes) -> Iterator[tuple[int, KeyObject]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise _Truncated
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        start = pos
        if take(4) != KEY_MAGIC:
            raise CorruptKeyStore(f"bad record magic at offset {start}")
        key_id = take(KEY_ID_SIZE)
        if take(4) != KEY_MAGIC:
            raise CorruptKeyStore(f"bad payload magic at offset {start}")
        try:
            name = take(struct.unpack(">I", take(4))[0]).decode("utf-8")
            mail = take(struct.unpack(">I", take(4))[0]).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptKeyStore(f"invalid UTF-8 in key record at offset {start}") from None
        date = struct.unpack(">Q", take(8))[0]
        pubkey = take(PUBLIC_KEY_SIZE)
        fingerprint = take(FINGERPRINT_SIZE)
        yield start, KeyObject(key_id, name, mail, date, fingerprint, pubkey)


# -- store -------------------------------------------------------------------


class RegistrationOutcome(enum.Enum):
    ACCEPTED = "accepted"
    ALREADY_REGISTERED = "already_registered"


class KeyStore:
    """Append-only registry of key objects, first registration wins.

    With ``path=None`` the store lives in memory only.
    """

    def __init__(self, path: str | os.PathLike | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._keys: dict[bytes, KeyObject] = {}
        self._log: list[bytes] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        data = self.path.read_bytes()
        good_end = 0
        try:
            for offset, key in _read_key_records(data):
                if not verify_key_object(key):
                    raise CorruptKeyStore(f"key record at offset {offset} fails verification")
                existing = self._keys.get(key.id)
                if existing is not None and existing != key:
                    raise CorruptKeyStore(f"conflicting records for key id {key.id.hex()}")
                if existing is None:
                    self._keys[key.id] = key
                    self._log.append(key.id)
                good_end = offset + len(encode_key_record(key))
        except _Truncated:
            logger.warning("truncating incomplete key record at offset %d in %s", good_end, self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
                os.fsync(fh.fileno())

    def register(self, key: KeyObject) -> RegistrationOutcome:
        """Trust on first use: a claimed id that is already bound is refused
        unless the object is identical, before its self-signature is even checked."""
        with self._lock:
            existing = self._keys.get(key.id)
            if existing is not None:
                if existing == key:
                    return RegistrationOutcome.ALREADY_REGISTERED
                raise IdCollision(key.id)
            if not verify_key_object(key):
                raise InvalidKeyObject(f"key object {key.id.hex()} does not verify")
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    fh.write(encode_key_record(key))
                    fh.flush()
                    os.fsync(fh.fileno())
            self._keys[key.id] = key
            self._log.append(key.id)
        logger.info("registered key %s (%s)", key.id.hex(), key.name)
        return RegistrationOutcome.ACCEPTED

    def lookup(self, key_id: bytes) -> KeyObject:
        try:
            return self._keys[key_id]
        except KeyError:
            raise UnknownKeyId(key_id) from None

    def get(self, key_id: bytes) -> KeyObject | None:
        return self._keys.get(key_id)

    @property
    def audit_log(self) -> list[bytes]:
        """Key ids in registration order."""
        return list(self._log)

    def __contains__(self, key_id: object) -> bool:
        return key_id in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def __iter__(self) -> Iterator[KeyObject]:
        return iter([self._keys[k] for k in self._log])


def register_key(store: KeyStore, key: KeyObject) -> RegistrationOutcome:
    return store.register(key)


def lookup_key(store: KeyStore, key_id: bytes) -> KeyObject:
    return store.lookup(key_id)


# -- key files ---------------------------------------------------------------


def write_secret_file(path: str | os.PathLike, secret: bytes) -> None:
    path = Path(path)
    payload = json.dumps(
        {"secret": secret.hex(), "pubkey": public_key_from_secret(secret).hex()}, indent=2
    )
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(payload + "\n")


def read_secret_file(path: str | os.PathLike) -> bytes:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return bytes.fromhex(data["secret"])


def write_key_file(path: str | os.PathLike, key: KeyObject) -> None:
    Path(path).write_text(json.dumps(key.to_json(), indent=2) + "\n", encoding="utf-8")


def read_key_file(path: str | os.PathLike) -> KeyObject:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidKeyObject(f"{path}: not JSON ({exc})") from None
    return KeyObject.from_json(data)
