"""Timestamp authority clients.

The wire protocol is two JSON exchanges::

    submit  {"merkle_root": hex}        -> {"submission_id": str, "status": "pending"}
    status  {"submission_id": str}      -> {"status": "pending"|"confirmed"|"failed",
                                            "anchor_ref"?: str, "confirmed_at"?: int}

:class:`MockAuthority` implements it in-process; :class:`MockAuthorityServer`
exposes the same mock over loopback HTTP for :class:`HttpAuthorityClient`.
Neither talks to a real ledger.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Protocol

from ..errors import AuthorityUnreachable

logger = logging.getLogger(__name__)


class AuthorityClient(Protocol):
    def submit(self, merkle_root: bytes) -> str: ...

    def status(self, submission_id: str) -> dict: ...


class MockAuthority:
    """Deterministic stand-in for a blockchain timestamping service.

    A submission is confirmed on the ``confirmation_delay_cycles``-th status
    query for it; ``None`` means it never leaves pending. ``failure_rate``
    is the probability (seeded) that a submission ends up failed instead.
    Set ``reachable = False`` to simulate an outage.
    """

    def __init__(
        self,
        confirmation_delay_cycles: int | None = 2,
        failure_rate: float = 0.0,
        seed: int = 0,
        state_path: str | Path | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.confirmation_delay_cycles = confirmation_delay_cycles
        self.failure_rate = failure_rate
        self.reachable = True
        self.clock = clock
        self.state_path = Path(state_path) if state_path else None
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._submissions: dict[str, dict] = {}
        self._counter = 0
        self._blocks = 0
        if self.state_path and self.state_path.exists():
            state = json.loads(self.state_path.read_text())
            self._submissions = state["submissions"]
            self._counter = state["counter"]
            self._blocks = state["blocks"]
            self._rng.setstate(_rng_state_from_json(state["rng"]))

    @property
    def submissions(self) -> dict[str, dict]:
        return self._submissions

    def _save(self) -> None:
        if self.state_path is None:
            return
        state = {
            "submissions": self._submissions,
            "counter": self._counter,
            "blocks": self._blocks,
            "rng": _rng_state_to_json(self._rng.getstate()),
        }
        tmp = self.state_path.with_suffix(self.state_path.suffix + ".tmp")
        tmp.write_text(json.dumps(state))
        tmp.replace(self.state_path)

    def _check_reachable(self) -> None:
        if not self.reachable:
            raise AuthorityUnreachable("mock authority is offline")

    def submit(self, merkle_root: bytes) -> str:
        self._check_reachable()
        with self._lock:
            self._counter += 1
            sid = f"mock-{self._counter:06d}"
            self._submissions[sid] = {
                "merkle_root": merkle_root.hex(),
                "queries": 0,
                "fails": self._rng.random() < self.failure_rate,
                "anchor_ref": None,
                "confirmed_at": None,
            }
            self._save()
        return sid

    def status(self, submission_id: str) -> dict:
        self._check_reachable()
        with self._lock:
            sub = self._submissions.get(submission_id)
            if sub is None:
                return {"status": "failed"}
            if sub["anchor_ref"] is not None:
                return {"status": "confirmed", "anchor_ref": sub["anchor_ref"], "confirmed_at": sub["confirmed_at"]}
            sub["queries"] += 1
            delay = self.confirmation_delay_cycles
            if delay is None or sub["queries"] < delay:
                self._save()
                return {"status": "pending"}
            if sub["fails"]:
                self._save()
                return {"status": "failed"}
            self._blocks += 1
            tx = hashlib.sha256(bytes.fromhex(sub["merkle_root"]) + submission_id.encode()).hexdigest()
            sub["anchor_ref"] = f"mock-block-{self._blocks}:{tx[:32]}"
            sub["confirmed_at"] = int(self.clock())
            self._save()
            return {"status": "confirmed", "anchor_ref": sub["anchor_ref"], "confirmed_at": sub["confirmed_at"]}

    def handle(self, endpoint: str, request: dict) -> dict:
        """JSON-level dispatch shared by the in-process and HTTP transports."""
        if endpoint == "submit":
            root = bytes.fromhex(request["merkle_root"])
            return {"submission_id": self.submit(root), "status": "pending"}
        if endpoint == "status":
            return self.status(str(request["submission_id"]))
        raise ValueError(f"unknown endpoint {endpoint!r}")


def _rng_state_to_json(state) -> list:
    version, internal, gauss = state
    return [version, list(internal), gauss]


def _rng_state_from_json(data) -> tuple:
    version, internal, gauss = data
    return (version, tuple(internal), gauss)


class HttpAuthorityClient:
    def __init__(self, base_url: str, timeout: float = 5.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post(self, endpoint: str, payload: dict) -> dict:
        req = urllib.request.Request(
            f"{self.base_url}/{endpoint}",
            data=json.dumps(payload).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise AuthorityUnreachable(f"{self.base_url}/{endpoint}: {exc}") from exc

    def submit(self, merkle_root: bytes) -> str:
        return self._post("submit", {"merkle_root": merkle_root.hex()})["submission_id"]

    def status(self, submission_id: str) -> dict:
        return self._post("status", {"submission_id": submission_id})


class MockAuthorityServer:
    """Serve a :class:`MockAuthority` on ``127.0.0.1`` in a background thread."""

    def __init__(self, authority: MockAuthority, port: int = 0) -> None:
        self.authority = authority
        mock = authority

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:
                endpoint = self.path.strip("/")
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = mock.handle(endpoint, json.loads(self.rfile.read(length) or b"{}"))
                    code = 200
                except AuthorityUnreachable as exc:
                    body, code = {"error": str(exc)}, 503
                except (ValueError, KeyError) as exc:
                    body, code = {"error": str(exc)}, 400
                raw = json.dumps(body).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, fmt, *args) -> None:
                logger.debug("mock authority: " + fmt, *args)

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockAuthorityServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockAuthorityServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
