from __future__ import annotations

import abc
import time
from dataclasses import dataclass
from typing import Iterator, Union

from ..encoding import ProvenanceObject


@dataclass(frozen=True)
class ProviderReceipt:
    provider_id: str
    hash: bytes
    stored_at: int
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "provider_id": self.provider_id,
            "hash": self.hash.hex(),
            "stored_at": self.stored_at,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class CorruptItem:
    """Placeholder yielded by ``retrieve_all`` for a record that failed checks."""

    hash: bytes | None
    position: int
    reason: str


StreamItem = Union[ProvenanceObject, CorruptItem]


class Provider(abc.ABC):
    """Storage backend for provenance information.

    ``stores_objects`` tells the controller whether ``retrieve_one`` returns
    full provenance objects; only such providers take part in retrieval,
    cross-provider comparison and migration.
    """

    provider_id: str
    stores_objects: bool = True

    @abc.abstractmethod
    def record(self, obj: ProvenanceObject) -> ProviderReceipt: ...

    @abc.abstractmethod
    def retrieve_one(self, digest: bytes): ...

    @abc.abstractmethod
    def retrieve_all(self) -> Iterator: ...

    @abc.abstractmethod
    def delete(self, digest: bytes) -> bool: ...

    def contains(self, digest: bytes) -> bool:
        raise NotImplementedError

    def close(self) -> None:
        pass


def now() -> int:
    return int(time.time())
