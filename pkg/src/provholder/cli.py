"""Command-line interface.

Every command prints JSON on stdout; logs and errors go to stderr, errors as
``{"error": <code>, "message": <text>}``. Exit statuses:

== =====================================================================
0  success
1  other domain error
2  usage or configuration error, malformed query
3  unknown object, key, or hash
4  rejected input (validation, unknown predecessor, duplicate, TOFU)
5  integrity failure (corrupt store, invalid proof)
6  provider or timestamp authority failure
7  the stores are locked by another process
== =====================================================================
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .adapter import Adapter, Format, is_ingestible, parse_query
from .config import Config, load_config
from .controller import Controller, ObjectRecord
from .encoding import generate_secret
from .errors import (
    AuthorityUnreachable,
    ConfigError,
    CorruptIndex,
    CorruptKeyStore,
    CorruptRecord,
    DuplicateObject,
    IdCollision,
    InvalidKeyObject,
    LockHeld,
    MalformedQuery,
    NotBatched,
    NotFound,
    ProvenanceError,
    ProviderFailure,
    TargetWriteFailure,
    UnknownHash,
    UnknownKeyId,
    UnknownObject,
    UnknownPredecessor,
    ValidationFailed,
)
from .identity import (
    KeyStore,
    create_key_object,
    read_key_file,
    write_key_file,
    write_secret_file,
)
from .providers import (
    HttpAuthorityClient,
    MockAuthority,
    SimpleStorage,
    TimestampProof,
    TimestampProvider,
    verify_proof,
)
from .providers.timestamp import ProofStatus

logger = logging.getLogger("provholder")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_REJECTED = 4
EXIT_INTEGRITY = 5
EXIT_PROVIDER = 6
EXIT_LOCKED = 7

_EXIT_CODES: list[tuple[tuple[type, ...], int]] = [
    ((ConfigError, MalformedQuery), EXIT_USAGE),
    ((UnknownObject, UnknownKeyId, NotFound, UnknownHash, NotBatched), EXIT_NOT_FOUND),
    ((ValidationFailed, UnknownPredecessor, DuplicateObject, IdCollision, InvalidKeyObject), EXIT_REJECTED),
    ((CorruptRecord, CorruptIndex, CorruptKeyStore), EXIT_INTEGRITY),
    ((ProviderFailure, AuthorityUnreachable, TargetWriteFailure), EXIT_PROVIDER),
    ((LockHeld,), EXIT_LOCKED),
]


class CommandFailed(Exception):
    """Raised by a command that already printed its result but must exit nonzero."""

    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.code = code


def exit_code_for(exc: BaseException) -> int:
    for types, status in _EXIT_CODES:
        if isinstance(exc, types):
            return status
    return EXIT_ERROR


def emit(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    sys.stdout.flush()


def emit_line(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")
    sys.stdout.flush()


def _error(code: str, message: str, **extra: Any) -> None:
    sys.stderr.write(json.dumps({"error": code, "message": message, **extra}) + "\n")


# -- holder assembly ---------------------------------------------------------------


class Holder:
    """All stores of one configuration, opened under an exclusive lock."""

    def __init__(self, config: Config) -> None:
        self.config = config
        config.data_dir.mkdir(parents=True, exist_ok=True)
        config.lock_file.parent.mkdir(parents=True, exist_ok=True)
        self._lock_fh = open(config.lock_file, "a+")
        try:
            fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            raise LockHeld(f"{config.lock_file} is held by another process") from None

        if config.authority == "mock":
            self.authority = MockAuthority(
                confirmation_delay_cycles=config.mock_delay_cycles,
                failure_rate=config.mock_failure_rate,
                seed=config.mock_seed,
                state_path=config.mock_state,
            )
        else:
            self.authority = HttpAuthorityClient(config.authority)

        providers = []
        for spec in config.providers:
            spec.path.parent.mkdir(parents=True, exist_ok=True)
            if spec.type == "simple":
                providers.append(SimpleStorage(spec.path, spec.id, durable=config.durable))
            else:
                providers.append(
                    TimestampProvider(
                        self.authority,
                        spec.id,
                        state_path=spec.path,
                        batch_size=config.batch_size,
                        batch_interval=config.batch_interval,
                        resubmit_after=config.resubmit_after,
                        max_queue=config.max_queue,
                    )
                )
        self.keys = KeyStore(config.key_store)
        self.controller = Controller(
            self.keys, providers, ObjectRecord(config.object_record, durable=config.durable), config.selection
        )
        self.adapter = Adapter(self.controller)

    @property
    def stampers(self) -> list[TimestampProvider]:
        return [p for p in self.controller.providers.values() if isinstance(p, TimestampProvider)]

    def stamper(self) -> TimestampProvider:
        stampers = self.stampers
        if not stampers:
            raise ConfigError("no timestamp provider configured")
        return stampers[0]

    def flush_due(self) -> None:
        for ts in self.stampers:
            try:
                ts.maybe_flush()
            except AuthorityUnreachable as exc:
                logger.warning("timestamp flush deferred: %s", exc)

    def close(self) -> None:
        self.controller.close()
        fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_UN)
        self._lock_fh.close()

    def __enter__(self) -> "Holder":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- commands ----------------------------------------------------------------------


def cmd_keygen(args, config: Config | None) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    secret = bytes.fromhex(args.seed) if args.seed else generate_secret()
    date = args.date if args.date is not None else int(time.time())
    key = create_key_object(args.name, args.mail, date, secret)
    stem = args.stem or args.name.replace(" ", "_").lower()
    secret_path = out / f"{stem}.secret.json"
    key_path = out / f"{stem}.key.json"
    write_secret_file(secret_path, secret)
    write_key_file(key_path, key)
    emit({"key_id": key.id.hex(), "secret_file": str(secret_path), "key_file": str(key_path), "key": key.to_json()})
    return EXIT_OK


def cmd_register_key(args, holder: Holder) -> int:
    key = read_key_file(args.file)
    outcome = holder.keys.register(key)
    emit({"outcome": outcome.value, "key_id": key.id.hex(), "registered": len(holder.keys)})
    return EXIT_OK


def _outcome_status(outcomes) -> int:
    return EXIT_OK if all(o.status in ("accepted", "duplicate") for o in outcomes) else EXIT_REJECTED


def _ingest_one(holder: Holder, path: Path) -> dict:
    outcomes = holder.adapter.collect_file(path)
    return {"file": str(path), "outcomes": [o.to_json() for o in outcomes], "_status": _outcome_status(outcomes)}


def cmd_ingest(args, holder: Holder) -> int:
    target = Path(args.path)
    if args.watch:
        return _watch(args, holder, target)
    files = sorted(p for p in target.iterdir() if is_ingestible(p)) if target.is_dir() else [target]
    documents = []
    status = EXIT_OK
    for f in files:
        doc = _ingest_one(holder, f)
        status = max(status, doc.pop("_status"))
        documents.append(doc)
    holder.flush_due()
    emit({"documents": documents})
    return status


def _watch(args, holder: Holder, inbox: Path) -> int:
    if not inbox.is_dir():
        raise ConfigError(f"--watch needs a directory, got {inbox}")
    done_dir = inbox / "processed"
    failed_dir = inbox / "failed"
    done_dir.mkdir(exist_ok=True)
    failed_dir.mkdir(exist_ok=True)
    stop = threading.Event()
    previous = {sig: signal.signal(sig, lambda *_: stop.set()) for sig in (signal.SIGINT, signal.SIGTERM)}
    for ts in holder.stampers:
        ts.start_poller(holder.config.poll_period)
    deadline = time.monotonic() + args.duration if args.duration else None
    logger.info("watching %s", inbox)
    try:
        while not stop.is_set():
            for f in sorted(p for p in inbox.iterdir() if is_ingestible(p)):
                try:
                    doc = _ingest_one(holder, f)
                    doc.pop("_status")
                    dest = done_dir
                except ProvenanceError as exc:
                    doc = {"file": str(f), "error": exc.code, "message": str(exc)}
                    dest = failed_dir
                os.replace(f, dest / f.name)
                emit_line(doc)
            if deadline is not None and time.monotonic() >= deadline:
                break
            stop.wait(args.interval)
    finally:
        for ts in holder.stampers:
            ts.stop_poller()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    return EXIT_OK


def cmd_collect(args, holder: Holder) -> int:
    raw = sys.stdin.buffer.read() if args.file == "-" else Path(args.file).read_bytes()
    outcomes = holder.adapter.collect_external(raw, Format.SINGLE_OBJECT_JSON)
    holder.flush_due()
    outcome = outcomes[0]
    emit(outcome.to_json())
    if outcome.status not in ("accepted", "duplicate"):
        raise CommandFailed(EXIT_REJECTED, outcome.reason or "Rejected", outcome.detail)
    return EXIT_OK


def cmd_trace(args, holder: Holder) -> int:
    path = holder.adapter.retrieve_path(args.hash)
    emit(path.to_json())
    return EXIT_OK if path.all_valid else EXIT_INTEGRITY


def cmd_exists(args, holder: Holder) -> int:
    emit({"hash": args.hash.lower(), "exists": holder.controller.exists(parse_query(args.hash))})
    return EXIT_OK


def cmd_verify_store(args, holder: Holder) -> int:
    stores = [p for p in holder.controller.providers.values() if isinstance(p, SimpleStorage)]
    if args.provider:
        stores = [p for p in stores if p.provider_id in args.provider]
        missing = set(args.provider) - {p.provider_id for p in stores}
        if missing:
            raise ConfigError(f"not simple-storage providers: {sorted(missing)}")
    results = {p.provider_id: {"records": len(p), "problems": p.verify()} for p in stores}
    ok = all(not r["problems"] for r in results.values())
    emit({"ok": ok, "stores": results})
    return EXIT_OK if ok else EXIT_INTEGRITY


def _migration_endpoint(holder: Holder, ref: str, create: bool = False):
    if ref in holder.controller.providers:
        return holder.controller.providers[ref]
    path = Path(ref[len("simple:"):] if ref.startswith("simple:") else ref)
    if not (path.is_dir() or create or ref.startswith("simple:")):
        raise ConfigError(f"{ref!r} is neither a provider id nor a store directory")
    return SimpleStorage(path, f"path:{path}", durable=holder.config.durable)


def cmd_migrate(args, holder: Holder) -> int:
    src = _migration_endpoint(holder, args.source)
    dst = _migration_endpoint(holder, args.target, create=True)
    try:
        report = holder.controller.migrate(src, dst, purge=args.purge)
    except ValueError as exc:
        if isinstance(exc, ProvenanceError):
            raise
        raise ConfigError(str(exc)) from None
    emit(report.to_json())
    return EXIT_OK


def cmd_stamp_flush(args, holder: Holder) -> int:
    ts = holder.stamper()
    rec = ts.flush_batch()
    emit({"flushed": rec is not None, "root_record": rec.to_json() if rec else None})
    return EXIT_OK


def cmd_stamp_status(args, holder: Holder) -> int:
    ts = holder.stamper()
    transitions = [] if args.no_poll else ts.poll_confirmations()
    emit({"transitions": [t.to_json() for t in transitions], **ts.summary()})
    return EXIT_OK


def cmd_prove(args, holder: Holder) -> int:
    proof = holder.stamper().prove(parse_query(args.hash))
    data = proof.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    emit({"proof": data, "status": verify_proof(proof).value, "file": args.out})
    return EXIT_OK


def cmd_verify_proof(args, config: Config | None) -> int:
    try:
        data = json.loads(Path(args.file).read_text(encoding="utf-8"))
        proof = TimestampProof.from_json(data.get("proof", data))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        emit({"result": ProofStatus.INVALID.value, "detail": f"unreadable proof: {exc}"})
        return EXIT_INTEGRITY
    result = verify_proof(proof)
    emit({"result": result.value, "leaf": proof.leaf.hex(), "root_record": proof.root_record.to_json()})
    return EXIT_INTEGRITY if result is ProofStatus.INVALID else EXIT_OK


# -- parser --------------------------------------------------------------------------


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        _error("UsageError", message, usage=self.format_usage().strip())
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog="provholder", description="Trusted provenance ledger for adaptive workflows.")
    parser.add_argument("--config", default=os.environ.get("PH_CONFIG", "provholder.conf"))
    parser.add_argument("--data-dir", default=None, help="override data_dir from the config")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    p = sub.add_parser("keygen", help="create a keypair file and a shareable key object")
    p.add_argument("--name", required=True)
    p.add_argument("--mail", required=True)
    p.add_argument("--date", type=int, help="creation date, epoch seconds (default: now)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--stem", help="file name stem (default: derived from --name)")
    p.add_argument("--seed", help="use this 32-byte hex secret instead of a random one")
    p.set_defaults(func=cmd_keygen, needs_holder=False)

    p = sub.add_parser("register-key", help="register a key object (trust on first use)")
    p.add_argument("file")
    p.set_defaults(func=cmd_register_key)

    p = sub.add_parser("ingest", help="collect provenance from an XES log, JSON object, or directory")
    p.add_argument("path")
    p.add_argument("--watch", action="store_true", help="keep watching a directory inbox")
    p.add_argument("--interval", type=float, default=1.0, help="inbox scan period in seconds")
    p.add_argument("--duration", type=float, default=None, help="stop watching after this many seconds")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("collect", help="collect one provenance object given as JSON ('-' for stdin)")
    p.add_argument("file")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("trace", help="back-trace an object to its origin")
    p.add_argument("hash")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("exists", help="check the object record for a hash")
    p.add_argument("hash")
    p.set_defaults(func=cmd_exists)

    p = sub.add_parser("verify-store", help="full-scan self-verification of simple stores")
    p.add_argument("provider", nargs="*")
    p.set_defaults(func=cmd_verify_store)

    p = sub.add_parser("migrate", help="copy valid objects between stores")
    p.add_argument("source", help="provider id or store directory")
    p.add_argument("target", help="provider id or store directory")
    p.add_argument("--purge", action="store_true", help="delete transferred objects from the source")
    p.set_defaults(func=cmd_migrate)

    p = sub.add_parser("stamp-flush", help="batch queued hashes and submit the Merkle root now")
    p.set_defaults(func=cmd_stamp_flush)

    p = sub.add_parser("stamp-status", help="poll the authority once and report timestamp state")
    p.add_argument("--no-poll", action="store_true", help="report without polling")
    p.set_defaults(func=cmd_stamp_status)

    p = sub.add_parser("prove", help="emit the timestamp inclusion proof of a hash")
    p.add_argument("hash")
    p.add_argument("--out", help="also write the proof to this file")
    p.set_defaults(func=cmd_prove)

    p = sub.add_parser("verify-proof", help="check a proof file offline")
    p.add_argument("file")
    p.set_defaults(func=cmd_verify_proof, needs_holder=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if not getattr(args, "needs_holder", True):
            return args.func(args, None)
        config = load_config(args.config, data_dir=args.data_dir)
        with Holder(config) as holder:
            return args.func(args, holder)
    except CommandFailed as exc:
        _error(exc.code, str(exc))
        return exc.status
    except ProvenanceError as exc:
        _error(exc.code, str(exc))
        return exit_code_for(exc)
    except OSError as exc:
        _error("IoFailure", str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
