"""Shared builders for tests: signers, random objects, fixture loading."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

from provholder.encoding import Kind, ProvenanceObject, generate_secret, sign_object
from provholder.identity import KeyObject, KeyStore, create_key_object
from provholder.jsonfmt import object_from_json

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def digest(label: str | bytes) -> bytes:
    return hashlib.sha256(label if isinstance(label, bytes) else label.encode()).digest()


@dataclass
class Signer:
    key: KeyObject
    secret: bytes

    @classmethod
    def fresh(cls, name: str = "tester", secret: bytes | None = None) -> "Signer":
        secret = secret or generate_secret()
        return cls(create_key_object(name, f"{name}@example.org", 1700000000, secret), secret)

    @classmethod
    def fixture(cls, label: str) -> "Signer":
        key = KeyObject.from_json(json.loads((FIXTURES / "keys" / f"{label}.key.json").read_text()))
        secret = bytes.fromhex(json.loads((FIXTURES / "keys" / f"{label}.secret.json").read_text())["secret"])
        return cls(key, secret)

    @property
    def id(self) -> bytes:
        return self.key.id

    def sign(self, obj: ProvenanceObject) -> ProvenanceObject:
        return sign_object(obj, self.key.id, self.secret)


def keystore(*signers: Signer, path=None) -> KeyStore:
    ks = KeyStore(path)
    for s in signers:
        ks.register(s.key)
    return ks


def make_object(
    signer: Signer,
    *,
    preds=(),
    kind: Kind = Kind.EXECUTION,
    chor: str = "choreo",
    wf: str = "wf",
    model: bytes | None = None,
    inputs=(),
    outputs=(),
    timestamp: int = 1700000000,
) -> ProvenanceObject:
    obj = ProvenanceObject(
        kind=kind,
        choreography_instance_id=chor,
        workflow_instance_id=wf,
        model_hash=model or digest(f"model {chor}/{wf}"),
        input_hashes=tuple(inputs),
        output_hashes=tuple(outputs),
        timestamp=timestamp,
        predecessor_hashes=tuple(preds),
    )
    return signer.sign(obj)


def random_object(rng: random.Random, signer: Signer, preds=()) -> ProvenanceObject:
    def hashes(n):
        return [rng.randbytes(32) for _ in range(n)]

    return make_object(
        signer,
        preds=preds,
        kind=rng.choice(list(Kind)),
        chor=f"c{rng.randrange(10**6)}",
        wf=rng.choice(["", f"w{rng.randrange(10**6)}"]),
        model=rng.randbytes(32),
        inputs=hashes(rng.randrange(4)),
        outputs=hashes(rng.randrange(4)),
        timestamp=rng.randrange(2**64),
    )


def fixture_object(name: str) -> ProvenanceObject:
    return object_from_json(json.loads((FIXTURES / "objects" / f"{name}.json").read_text()))


def random_dag(rng: random.Random, n: int, max_fan_in: int = 4, window: int | None = None) -> list[list[int]]:
    """Predecessor index lists for nodes 0..n-1; node i only points to earlier nodes.

    With ``window`` predecessors come from the ``window`` nodes just before
    ``i``, which gives long chains and ancestor sets spanning most of the graph.
    """
    preds = []
    for i in range(n):
        lo = 0 if window is None else max(0, i - window)
        k = rng.randint(0, min(max_fan_in, i - lo))
        preds.append(sorted(rng.sample(range(lo, i), k)))
    return preds


def ancestors(preds: list[list[int]], node: int) -> set[int]:
    seen, stack = set(), [node]
    while stack:
        cur = stack.pop()
        if cur in seen:
            continue
        seen.add(cur)
        stack.extend(preds[cur])
    return seen
