"""SimpleStorage: an embedded, file-backed provider keyed by provenance hash.

Layout inside the store directory:

``objects.phs``
    Append-only data file of records ``"PHS1" | u32 length | body``. A body
    is either the canonical encoding of a provenance object or a tombstone
    ``"DEL1" | hash`` written by :meth:`SimpleStorage.delete`.
``objects.idx``
    Sidecar index of fixed 41-byte entries ``op | hash | u64 offset``
    (op 1 = put, 2 = delete). It is a cache: whenever it disagrees with the
    data file it is rebuilt from a scan, and unindexed tail records are
    picked up on open.

The data file is the source of truth and is fsynced before ``record``
returns. A record torn by a crash mid-write is truncated on the next open.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Iterator

from ..encoding import DIGEST_SIZE, ProvenanceObject, decode_object
from ..errors import (
    AlreadyStored,
    CorruptRecord,
    DecodeError,
    IoFailure,
    NotFound,
    StorageFull,
)
from .base import CorruptItem, Provider, ProviderReceipt, StreamItem, now

logger = logging.getLogger(__name__)

RECORD_MAGIC = b"PHS1"
TOMBSTONE_MAGIC = b"DEL1"
HEADER_SIZE = 8
DATA_FILE = "objects.phs"
INDEX_FILE = "objects.idx"

_OP_PUT = 1
_OP_DEL = 2
_INDEX_ENTRY = struct.Struct(">B32sQ")


class SimpleStorage(Provider):
    stores_objects = True

    def __init__(
        self,
        root: str | os.PathLike,
        provider_id: str = "simple",
        *,
        durable: bool = True,
        max_bytes: int | None = None,
    ) -> None:
        self.provider_id = provider_id
        self.root = Path(root)
        self.durable = durable
        self.max_bytes = max_bytes
        self.root.mkdir(parents=True, exist_ok=True)
        self.data_path = self.root / DATA_FILE
        self.index_path = self.root / INDEX_FILE
        self.data_path.touch(exist_ok=True)

        self._lock = threading.RLock()
        self._live: dict[bytes, int] = {}
        self._open_files()
        self._recover()

    # -- file handling -------------------------------------------------------

    def _open_files(self) -> None:
        self._data = open(self.data_path, "ab")
        self._index = open(self.index_path, "ab")
        self._read_fd = os.open(self.data_path, os.O_RDONLY)

    def close(self) -> None:
        with self._lock:
            for fh in (self._data, self._index):
                if not fh.closed:
                    fh.close()
            if self._read_fd >= 0:
                os.close(self._read_fd)
                self._read_fd = -1

    def __enter__(self) -> "SimpleStorage":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _size(self) -> int:
        return os.fstat(self._read_fd).st_size

    def _pread(self, n: int, offset: int) -> bytes:
        try:
            return os.pread(self._read_fd, n, offset)
        except OSError as exc:
            raise IoFailure(f"read failed at offset {offset}: {exc}", position=offset) from exc

    def _read_header(self, offset: int) -> int:
        head = self._pread(HEADER_SIZE, offset)
        if len(head) != HEADER_SIZE or head[:4] != RECORD_MAGIC:
            raise CorruptRecord(f"bad record header at offset {offset}", offset=offset)
        return struct.unpack(">I", head[4:])[0]

    def _read_body(self, offset: int) -> bytes:
        length = self._read_header(offset)
        body = self._pread(length, offset + HEADER_SIZE)
        if len(body) != length:
            raise CorruptRecord(f"record at offset {offset} runs past end of file", offset=offset)
        return body

    # -- recovery --------------------------------------------------------------

    def _recover(self) -> None:
        covered = self._load_index()
        if covered is None:
            logger.warning("index of %s is inconsistent, rebuilding from data file", self.root)
            self._live.clear()
            self._index.close()
            self._index = open(self.index_path, "wb")
            covered = 0
        self._scan_tail(covered)

    def _load_index(self) -> int | None:
        """Apply index entries; return the data offset they cover, or None if stale."""
        raw = self.index_path.read_bytes()
        usable = len(raw) - len(raw) % _INDEX_ENTRY.size
        size = self._size()
        last = -1
        for pos in range(0, usable, _INDEX_ENTRY.size):
            op, digest, offset = _INDEX_ENTRY.unpack_from(raw, pos)
            if offset >= size or offset <= last:
                return None
            last = offset
            if op == _OP_PUT:
                self._live.pop(digest, None)
                self._live[digest] = offset
            elif op == _OP_DEL:
                self._live.pop(digest, None)
            else:
                return None
        covered = 0
        if last >= 0:
            # individual headers are checked lazily on read; only the tail anchor here
            try:
                covered = last + HEADER_SIZE + self._read_header(last)
            except CorruptRecord:
                return None
            if covered > size:
                return None
        if usable != len(raw):
            with open(self.index_path, "r+b") as fh:
                fh.truncate(usable)
        return covered

    def _scan_tail(self, start: int) -> None:
        size = self._size()
        offset = start
        while offset < size:
            head = self._pread(HEADER_SIZE, offset)
            if len(head) < HEADER_SIZE:
                break
            if head[:4] != RECORD_MAGIC:
                raise CorruptRecord(f"unreadable record header at offset {offset}", offset=offset)
            length = struct.unpack(">I", head[4:])[0]
            if offset + HEADER_SIZE + length > size:
                break
            body = self._pread(length, offset + HEADER_SIZE)
            if body[:4] == TOMBSTONE_MAGIC and length == 4 + DIGEST_SIZE:
                digest = body[4:]
                self._live.pop(digest, None)
                self._append_index(_OP_DEL, digest, offset)
            else:
                digest = hashlib.sha256(body).digest()
                self._live.pop(digest, None)
                self._live[digest] = offset
                self._append_index(_OP_PUT, digest, offset)
            offset += HEADER_SIZE + length
        if offset < size:
            logger.warning("truncating torn record at offset %d in %s", offset, self.data_path)
            self._data.flush()
            os.truncate(self.data_path, offset)
        self._index.flush()

    def _append_index(self, op: int, digest: bytes, offset: int) -> None:
        self._index.write(_INDEX_ENTRY.pack(op, digest, offset))

    def _append_record(self, body: bytes) -> int:
        try:
            offset = self._data.tell()
            self._data.write(RECORD_MAGIC + struct.pack(">I", len(body)) + body)
            self._data.flush()
            if self.durable:
                os.fsync(self._data.fileno())
        except OSError as exc:
            raise IoFailure(f"write to {self.data_path} failed: {exc}") from exc
        return offset

    # -- provider contract ---------------------------------------------------

    def record(self, obj: ProvenanceObject) -> ProviderReceipt:
        body = obj.encode()
        digest = hashlib.sha256(body).digest()
        with self._lock:
            if digest in self._live:
                raise AlreadyStored(digest)
            if self.max_bytes is not None and self._size() + HEADER_SIZE + len(body) > self.max_bytes:
                raise StorageFull(f"{self.provider_id}: record of {len(body)} bytes exceeds capacity")
            offset = self._append_record(body)
            self._append_index(_OP_PUT, digest, offset)
            self._index.flush()
            self._live[digest] = offset
        return ProviderReceipt(self.provider_id, digest, now(), f"offset={offset}")

    def retrieve_raw(self, digest: bytes) -> bytes:
        """Stored canonical bytes for ``digest``, checked against the key."""
        offset = self._live.get(digest)
        if offset is None:
            raise NotFound(digest)
        try:
            body = self._read_body(offset)
        except CorruptRecord as exc:
            raise CorruptRecord(str(exc), digest, offset) from None
        if hashlib.sha256(body).digest() != digest:
            raise CorruptRecord(f"stored bytes for {digest.hex()} do not match their hash", digest, offset)
        return body

    def retrieve_one(self, digest: bytes) -> ProvenanceObject:
        body = self.retrieve_raw(digest)
        try:
            return decode_object(body)
        except DecodeError as exc:
            raise CorruptRecord(f"{digest.hex()}: {exc}", digest, self._live.get(digest)) from None

    def retrieve_all(self) -> Iterator[StreamItem]:
        for digest, offset in list(self._live.items()):
            try:
                yield self.retrieve_one(digest)
            except NotFound:
                continue  # deleted while streaming
            except CorruptRecord as exc:
                yield CorruptItem(digest, offset, str(exc))

    def delete(self, digest: bytes) -> bool:
        with self._lock:
            if digest not in self._live:
                return False
            offset = self._append_record(TOMBSTONE_MAGIC + digest)
            self._append_index(_OP_DEL, digest, offset)
            self._index.flush()
            del self._live[digest]
        return True

    def contains(self, digest: bytes) -> bool:
        return digest in self._live

    # -- administration -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._live)

    def hashes(self) -> list[bytes]:
        return list(self._live)

    def location(self, digest: bytes) -> tuple[int, int]:
        """(offset of the body, body length) of a live record in the data file."""
        offset = self._live.get(digest)
        if offset is None:
            raise NotFound(digest)
        return offset + HEADER_SIZE, self._read_header(offset)

    def verify(self) -> list[dict]:
        """Full-scan self-verification; returns one problem dict per bad record."""
        problems = []
        for digest, offset in list(self._live.items()):
            try:
                self.retrieve_one(digest)
            except CorruptRecord as exc:
                problems.append({"hash": digest.hex(), "offset": offset, "reason": str(exc)})
        return problems

    def compact(self) -> int:
        """Rewrite the data file with live records only; returns bytes reclaimed."""
        with self._lock:
            before = self._size()
            tmp_data = self.root / (DATA_FILE + ".compact")
            new_live: dict[bytes, int] = {}
            with open(tmp_data, "wb") as out:
                for digest, offset in self._live.items():
                    body = self._read_body(offset)
                    new_live[digest] = out.tell()
                    out.write(RECORD_MAGIC + struct.pack(">I", len(body)) + body)
                out.flush()
                os.fsync(out.fileno())
            self.close()
            os.replace(tmp_data, self.data_path)
            with open(self.index_path, "wb") as idx:
                for digest, offset in new_live.items():
                    idx.write(_INDEX_ENTRY.pack(_OP_PUT, digest, offset))
            self._open_files()
            self._live = new_live
            return before - self._size()
