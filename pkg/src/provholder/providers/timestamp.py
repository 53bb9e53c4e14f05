"""Timestamping provider: anchors provenance hashes via Merkle-batched roots.

Hashes move through three states: queued (unbatched), batched with the root
submitted but not yet anchored, and confirmed. A batch is cut when
``batch_size`` hashes are queued or the oldest has waited ``batch_interval``
seconds. Roots still pending after ``resubmit_after`` poll cycles are
submitted again under a new submission id.

Only hashes and roots are kept, so ``retrieve_one`` returns inclusion
proofs rather than provenance objects.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

from ..encoding import DIGEST_SIZE, ProvenanceObject
from ..errors import AuthorityUnreachable, NotBatched, QueueFull, UnknownHash
from ..merkle import Side, build_merkle, fold_path
from .authority import AuthorityClient
from .base import Provider, ProviderReceipt

logger = logging.getLogger(__name__)


class RootStatus(enum.Enum):
    PENDING = "pending"
    CONFIRMED = "confirmed"
    FAILED = "failed"


class ProofStatus(enum.Enum):
    CONFIRMED_VALID = "confirmed_valid"
    PENDING_VALID = "pending_valid"
    INVALID = "invalid"


@dataclass
class PendingEntry:
    hash: bytes
    batch_id: str | None
    enqueued_at: int
    poll_cycles_waited: int = 0


@dataclass
class RootRecord:
    batch_id: str
    merkle_root: bytes
    submission_id: str
    status: RootStatus = RootStatus.PENDING
    anchor_ref: str = ""
    confirmed_at: int | None = None
    submitted_at: int = 0
    cycles_waited: int = 0
    submissions: int = 1

    def to_json(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "merkle_root": self.merkle_root.hex(),
            "submission_id": self.submission_id,
            "status": self.status.value,
            "anchor_ref": self.anchor_ref,
            "confirmed_at": self.confirmed_at,
            "submitted_at": self.submitted_at,
            "cycles_waited": self.cycles_waited,
            "submissions": self.submissions,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RootRecord":
        return cls(
            batch_id=d["batch_id"],
            merkle_root=bytes.fromhex(d["merkle_root"]),
            submission_id=d["submission_id"],
            status=RootStatus(d["status"]),
            anchor_ref=d.get("anchor_ref") or "",
            confirmed_at=d.get("confirmed_at"),
            submitted_at=d.get("submitted_at", 0),
            cycles_waited=d.get("cycles_waited", 0),
            submissions=d.get("submissions", 1),
        )


@dataclass(frozen=True)
class TimestampProof:
    leaf: bytes
    audit_path: tuple[tuple[bytes, Side], ...]
    root_record: RootRecord

    def to_json(self) -> dict:
        return {
            "leaf": self.leaf.hex(),
            "audit_path": [{"sibling": s.hex(), "side": side.value} for s, side in self.audit_path],
            "root_record": self.root_record.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TimestampProof":
        return cls(
            leaf=bytes.fromhex(d["leaf"]),
            audit_path=tuple((bytes.fromhex(p["sibling"]), Side(p["side"])) for p in d["audit_path"]),
            root_record=RootRecord.from_json(d["root_record"]),
        )


@dataclass(frozen=True)
class StatusTransition:
    batch_id: str
    old: RootStatus
    new: RootStatus
    cycle: int
    submission_id: str
    event: str

    def to_json(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "from": self.old.value,
            "to": self.new.value,
            "cycle": self.cycle,
            "submission_id": self.submission_id,
            "event": self.event,
        }


def verify_proof(proof: TimestampProof) -> ProofStatus:
    """Fold the leaf up its audit path and combine with the root's status."""
    try:
        if len(proof.leaf) != DIGEST_SIZE or any(len(s) != DIGEST_SIZE for s, _ in proof.audit_path):
            return ProofStatus.INVALID
        if fold_path(proof.leaf, proof.audit_path) != proof.root_record.merkle_root:
            return ProofStatus.INVALID
    except (TypeError, ValueError):
        return ProofStatus.INVALID
    rec = proof.root_record
    if rec.status is RootStatus.CONFIRMED:
        return ProofStatus.CONFIRMED_VALID if rec.anchor_ref else ProofStatus.INVALID
    return ProofStatus.PENDING_VALID


@dataclass
class _Batch:
    root: RootRecord
    leaves: list[bytes]
    paths: list = field(default_factory=list)


class TimestampProvider(Provider):
    stores_objects = False

    def __init__(
        self,
        authority: AuthorityClient,
        provider_id: str = "timestamp",
        *,
        state_path: str | Path | None = None,
        batch_size: int = 16,
        batch_interval: float = 10.0,
        resubmit_after: int = 3,
        max_queue: int | None = None,
        auto_flush: bool = True,
        clock: Callable[[], float] = time.time,
    ) -> None:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if resubmit_after < 1:
            raise ValueError("resubmit_after must be >= 1")
        self.authority = authority
        self.provider_id = provider_id
        self.state_path = Path(state_path) if state_path else None
        self.batch_size = batch_size
        self.batch_interval = batch_interval
        self.resubmit_after = resubmit_after
        self.max_queue = max_queue
        self.auto_flush = auto_flush
        self.clock = clock

        self._lock = threading.RLock()
        self._entries: dict[bytes, PendingEntry] = {}
        self._unbatched: list[bytes] = []
        self._batches: dict[str, _Batch] = {}
        self._leaf_index: dict[bytes, tuple[str, int]] = {}
        self._next_batch = 1
        self.poll_count = 0
        self._poller: threading.Thread | None = None
        self._stop = threading.Event()
        if self.state_path and self.state_path.exists():
            self._load()

    # -- persistence ---------------------------------------------------------

    def _save(self) -> None:
        if self.state_path is None:
            return
        state = {
            "next_batch": self._next_batch,
            "poll_count": self.poll_count,
            "entries": [
                [e.hash.hex(), e.batch_id, e.enqueued_at, e.poll_cycles_waited]
                for e in self._entries.values()
            ],
            "unbatched": [h.hex() for h in self._unbatched],
            "batches": [
                {"root": b.root.to_json(), "leaves": [h.hex() for h in b.leaves]}
                for b in self._batches.values()
            ],
        }
        tmp = self.state_path.with_suffix(self.state_path.suffix + ".tmp")
        tmp.write_text(json.dumps(state))
        tmp.replace(self.state_path)

    def _load(self) -> None:
        state = json.loads(self.state_path.read_text())
        self._next_batch = state["next_batch"]
        self.poll_count = state.get("poll_count", 0)
        for h, batch_id, enq, waited in state["entries"]:
            self._entries[bytes.fromhex(h)] = PendingEntry(bytes.fromhex(h), batch_id, enq, waited)
        self._unbatched = [bytes.fromhex(h) for h in state["unbatched"]]
        for b in state["batches"]:
            leaves = [bytes.fromhex(h) for h in b["leaves"]]
            self._add_batch(RootRecord.from_json(b["root"]), leaves)

    def _add_batch(self, root: RootRecord, leaves: list[bytes]) -> None:
        built_root, paths = build_merkle(leaves)
        if built_root != root.merkle_root:
            raise ValueError(f"batch {root.batch_id}: stored root does not match its leaves")
        self._batches[root.batch_id] = _Batch(root, leaves, paths)
        for i, leaf in enumerate(leaves):
            self._leaf_index[leaf] = (root.batch_id, i)

    # -- recording and batching ----------------------------------------------

    def record(self, obj: ProvenanceObject | bytes) -> ProviderReceipt:
        digest = obj if isinstance(obj, bytes) else obj.provenance_hash()
        if len(digest) != DIGEST_SIZE:
            raise ValueError("provenance hashes are 32 bytes")
        now = int(self.clock())
        with self._lock:
            entry = self._entries.get(digest)
            if entry is not None:
                return ProviderReceipt(self.provider_id, digest, now, self._describe(entry))
            if self.max_queue is not None and len(self._unbatched) >= self.max_queue:
                raise QueueFull(f"{self.provider_id}: {len(self._unbatched)} hashes already queued")
            entry = PendingEntry(digest, None, now)
            self._entries[digest] = entry
            self._unbatched.append(digest)
            self._save()
            if self.auto_flush and len(self._unbatched) >= self.batch_size:
                try:
                    self.flush_batch()
                except AuthorityUnreachable as exc:
                    logger.warning("batch submission deferred: %s", exc)
            return ProviderReceipt(self.provider_id, digest, now, self._describe(entry))

    def _describe(self, entry: PendingEntry) -> str:
        if entry.batch_id is None:
            return "pending"
        root = self._batches[entry.batch_id].root
        if root.status is RootStatus.CONFIRMED:
            return f"confirmed batch={entry.batch_id} anchor={root.anchor_ref}"
        return f"pending batch={entry.batch_id}"

    def due(self, now: float | None = None) -> bool:
        with self._lock:
            if not self._unbatched:
                return False
            if len(self._unbatched) >= self.batch_size:
                return True
            now = self.clock() if now is None else now
            oldest = self._entries[self._unbatched[0]].enqueued_at
            return now - oldest >= self.batch_interval

    def maybe_flush(self, now: float | None = None) -> RootRecord | None:
        if self.due(now):
            return self.flush_batch()
        return None

    def flush_batch(self) -> RootRecord | None:
        """Batch every queued hash into one tree and submit its root.

        Returns ``None`` when nothing is queued. If the authority cannot be
        reached the hashes stay queued and the error propagates.
        """
        with self._lock:
            if not self._unbatched:
                return None
            leaves = list(self._unbatched)
            root, _ = build_merkle(leaves)
            submission_id = self.authority.submit(root)
            batch_id = f"b{self._next_batch:06d}"
            self._next_batch += 1
            rec = RootRecord(batch_id, root, submission_id, submitted_at=int(self.clock()))
            self._add_batch(rec, leaves)
            for h in leaves:
                self._entries[h].batch_id = batch_id
            self._unbatched = []
            self._save()
        logger.info("submitted batch %s (%d hashes) as %s", batch_id, len(leaves), submission_id)
        return rec

    # -- confirmation lifecycle ----------------------------------------------

    def _resubmit(self, rec: RootRecord, transitions: list, cycle: int) -> None:
        old = rec.status
        try:
            sid = self.authority.submit(rec.merkle_root)
        except AuthorityUnreachable:
            transitions.append(StatusTransition(rec.batch_id, old, old, cycle, rec.submission_id, "resubmit-failed"))
            return
        rec.submission_id = sid
        rec.status = RootStatus.PENDING
        rec.cycles_waited = 0
        rec.submissions += 1
        rec.submitted_at = int(self.clock())
        transitions.append(StatusTransition(rec.batch_id, old, RootStatus.PENDING, cycle, sid, "resubmitted"))

    def poll_confirmations(self) -> list[StatusTransition]:
        transitions: list[StatusTransition] = []
        with self._lock:
            self.poll_count += 1
            for batch in self._batches.values():
                rec = batch.root
                if rec.status is RootStatus.CONFIRMED:
                    continue
                rec.cycles_waited += 1
                cycle = rec.cycles_waited
                for leaf in batch.leaves:
                    self._entries[leaf].poll_cycles_waited += 1
                if rec.status is RootStatus.FAILED:
                    self._resubmit(rec, transitions, cycle)
                    continue
                try:
                    resp = self.authority.status(rec.submission_id)
                except AuthorityUnreachable:
                    transitions.append(
                        StatusTransition(rec.batch_id, rec.status, rec.status, cycle, rec.submission_id, "unreachable")
                    )
                    resp = {"status": "pending"}
                status = resp.get("status")
                if status == "confirmed" and resp.get("anchor_ref"):
                    rec.status = RootStatus.CONFIRMED
                    rec.anchor_ref = str(resp["anchor_ref"])
                    rec.confirmed_at = int(resp.get("confirmed_at") or self.clock())
                    transitions.append(
                        StatusTransition(rec.batch_id, RootStatus.PENDING, RootStatus.CONFIRMED, cycle, rec.submission_id, "confirmed")
                    )
                elif status == "failed":
                    rec.status = RootStatus.FAILED
                    transitions.append(
                        StatusTransition(rec.batch_id, RootStatus.PENDING, RootStatus.FAILED, cycle, rec.submission_id, "failed")
                    )
                    self._resubmit(rec, transitions, cycle)
                elif cycle > self.resubmit_after:
                    self._resubmit(rec, transitions, cycle)
            self._save()
        return transitions

    def start_poller(self, period: float = 5.0) -> None:
        """Run interval-triggered flushes and confirmation polling in a thread."""
        if self._poller is not None:
            return
        self._stop.clear()

        def loop() -> None:
            while not self._stop.wait(period):
                try:
                    self.maybe_flush()
                    self.poll_confirmations()
                except AuthorityUnreachable as exc:
                    logger.warning("timestamp poller: %s", exc)
                except Exception:
                    logger.exception("timestamp poller iteration failed")

        self._poller = threading.Thread(target=loop, name=f"{self.provider_id}-poller", daemon=True)
        self._poller.start()

    def stop_poller(self) -> None:
        if self._poller is None:
            return
        self._stop.set()
        self._poller.join()
        self._poller = None

    # -- proofs ----------------------------------------------------------------

    def prove(self, digest: bytes) -> TimestampProof:
        with self._lock:
            if digest not in self._entries:
                raise UnknownHash(digest)
            loc = self._leaf_index.get(digest)
            if loc is None:
                raise NotBatched(digest)
            batch_id, i = loc
            batch = self._batches[batch_id]
            return TimestampProof(digest, tuple(batch.paths[i]), replace(batch.root))

    verify_proof = staticmethod(verify_proof)

    def state_of(self, digest: bytes) -> str:
        """One of ``unbatched``, ``batched-pending`` or ``confirmed``."""
        entry = self._entries.get(digest)
        if entry is None:
            raise UnknownHash(digest)
        if entry.batch_id is None:
            return "unbatched"
        if self._batches[entry.batch_id].root.status is RootStatus.CONFIRMED:
            return "confirmed"
        return "batched-pending"

    # -- provider contract ---------------------------------------------------

    def retrieve_one(self, digest: bytes) -> TimestampProof:
        return self.prove(digest)

    def retrieve_all(self) -> Iterator[TimestampProof]:
        for batch_id in list(self._batches):
            for leaf in self._batches[batch_id].leaves:
                yield self.prove(leaf)

    def delete(self, digest: bytes) -> bool:
        """Drop a still-queued hash; anchored or submitted hashes are permanent."""
        with self._lock:
            entry = self._entries.get(digest)
            if entry is None or entry.batch_id is not None:
                return False
            del self._entries[digest]
            self._unbatched.remove(digest)
            self._save()
            return True

    def contains(self, digest: bytes) -> bool:
        return digest in self._entries

    def close(self) -> None:
        self.stop_poller()

    # -- introspection ---------------------------------------------------------

    @property
    def unbatched(self) -> list[bytes]:
        return list(self._unbatched)

    def entries(self) -> list[PendingEntry]:
        return list(self._entries.values())

    def root_records(self) -> list[RootRecord]:
        return [b.root for b in self._batches.values()]

    def summary(self) -> dict:
        counts = {"unbatched": 0, "batched-pending": 0, "confirmed": 0}
        for h in self._entries:
            counts[self.state_of(h)] += 1
        return {
            "provider_id": self.provider_id,
            "hashes": counts,
            "batches": [b.root.to_json() for b in self._batches.values()],
            "poll_count": self.poll_count,
        }
