"""JSON rendering of provenance objects (hex-encoded binary fields).

The same shape is used for single-object ingestion and inside rendered
provenance paths::

    {"kind": "execution", "choreography_instance_id": "...",
     "workflow_instance_id": "...", "model_hash": "<64 hex>",
     "input_hashes": [...], "output_hashes": [...], "timestamp": 1700000000,
     "predecessor_hashes": [...],
     "signatures": [{"key_id": "<32 hex>", "signature": "<128 hex>"}]}
"""

from __future__ import annotations

from typing import Any

from .encoding import Kind, ProvenanceObject, SignatureEntry
from .errors import MalformedDigest, MalformedObject


def object_to_json(obj: ProvenanceObject) -> dict[str, Any]:
    return {
        "kind": obj.kind.label,
        "choreography_instance_id": obj.choreography_instance_id,
        "workflow_instance_id": obj.workflow_instance_id,
        "model_hash": obj.model_hash.hex(),
        "input_hashes": [h.hex() for h in obj.input_hashes],
        "output_hashes": [h.hex() for h in obj.output_hashes],
        "timestamp": obj.timestamp,
        "predecessor_hashes": [h.hex() for h in obj.predecessor_hashes],
        "signatures": [
            {"key_id": s.key_id.hex(), "signature": s.signature.hex()} for s in obj.signatures
        ],
    }


def parse_hex(value: Any, size: int, what: str) -> bytes:
    if not isinstance(value, str):
        raise MalformedDigest(f"{what}: expected a hex string, got {type(value).__name__}")
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise MalformedDigest(f"{what}: not valid hex") from None
    if len(raw) != size:
        raise MalformedDigest(f"{what}: expected {size} bytes, got {len(raw)}")
    return raw


def object_from_json(data: dict[str, Any]) -> ProvenanceObject:
    if not isinstance(data, dict):
        raise MalformedObject("provenance object JSON must be an object")
    try:
        kind = Kind.from_label(data["kind"])
        sigs = [
            SignatureEntry(
                parse_hex(s["key_id"], 16, "signatures.key_id"),
                parse_hex(s["signature"], 64, "signatures.signature"),
            )
            for s in data.get("signatures", [])
        ]
        ts = data.get("timestamp", 0)
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise MalformedObject("timestamp must be an integer")
        return ProvenanceObject(
            kind=kind,
            choreography_instance_id=data["choreography_instance_id"],
            workflow_instance_id=data.get("workflow_instance_id", ""),
            model_hash=parse_hex(data["model_hash"], 32, "model_hash"),
            input_hashes=[parse_hex(h, 32, "input_hashes") for h in data.get("input_hashes", [])],
            output_hashes=[parse_hex(h, 32, "output_hashes") for h in data.get("output_hashes", [])],
            timestamp=ts,
            predecessor_hashes=[
                parse_hex(h, 32, "predecessor_hashes") for h in data.get("predecessor_hashes", [])
            ],
            signatures=sigs,
        )
    except KeyError as exc:
        raise MalformedObject(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (MalformedDigest, MalformedObject)):
            raise
        raise MalformedObject(str(exc)) from None
