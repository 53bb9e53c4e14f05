"""Ingestion adapter: XES event logs and single JSON objects in, provenance paths out.

Change events must be annotated explicitly. The adapter reads these
string attributes (hex for digests, signatures and key ids):

=========================  ================================================
``ph:kind``                ``change`` for adaptation events, ``execution``
                           (the default when absent) otherwise
``ph:change-type``         ``migration`` or ``ad-hoc``; opens a new
                           adaptation unit (a change event without it
                           continues the unit opened just before)
``ph:model``               executed model (runs) or full new model
                           (migrations)
``ph:diff``                change payload of an ad-hoc change
``ph:input``/``ph:output`` data digests; comma-separated or repeated
``ph:predecessor``         explicit predecessor provenance hashes
``ph:signature``           ed25519 signatures over the object's signing
                           payload, aligned with ``ph:keyid``
``ph:keyid``               16-byte signer key ids
``ph:choreography``        choreography instance id (event or trace level)
``ph:workflow``            workflow instance id; defaults to the trace name
=========================  ================================================

Signatures cover the predecessor list, so a signer relying on the
predecessor heuristic must sign the object as the adapter will build it.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .controller import Controller
from .encoding import DIGEST_SIZE, KEY_ID_SIZE, SIGNATURE_SIZE, Kind, ProvenanceObject, SignatureEntry
from .errors import (
    AdapterError,
    ConflictingAttribute,
    DuplicateObject,
    MalformedDigest,
    MalformedObject,
    MalformedQuery,
    MalformedXml,
    MissingConceptName,
    MissingRequiredAttribute,
    MissingSignature,
    MissingTimestamp,
    ProviderFailure,
    UnknownChangeType,
    UnknownPredecessor,
    ValidationFailed,
)
from .jsonfmt import object_from_json, parse_hex

logger = logging.getLogger(__name__)

_ATTRIBUTE_TAGS = {"string", "date", "int", "float", "boolean", "id", "list", "container"}
_LIST_SPLIT = re.compile(r"[\s,]+")
_RFC3339 = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[Tt ](\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?([Zz]|[+-]\d{2}:?\d{2})?$"
)


class Format(enum.Enum):
    XES_LOG = "xes"
    SINGLE_OBJECT_JSON = "json"


@dataclass
class LogEvent:
    trace_id: str
    concept_name: str
    time: int
    attributes: dict[str, str] = field(default_factory=dict)


class Trace(NamedTuple):
    trace_id: str
    events: list[LogEvent]
    attributes: dict[str, str] = {}


# -- parsing -----------------------------------------------------------------


def _local(tag: str) -> str:
    return tag.rpartition("}")[2]


def parse_rfc3339(value: str) -> int:
    """Epoch seconds (floored) for an RFC 3339 timestamp; naive values are UTC."""
    m = _RFC3339.match(value.strip())
    if not m:
        raise ValueError(f"not an RFC 3339 timestamp: {value!r}")
    year, month, day, hour, minute, second = (int(g) for g in m.groups()[:6])
    offset = m.group(8)
    tz = timezone.utc
    if offset and offset not in ("Z", "z"):
        sign = 1 if offset[0] == "+" else -1
        digits = offset[1:].replace(":", "")
        tz = timezone(sign * timedelta(hours=int(digits[:2]), minutes=int(digits[2:])))
    # fractional seconds are dropped, which floors for post-epoch instants
    return int(datetime(year, month, day, hour, minute, second, tzinfo=tz).timestamp())


def _attributes(element: ET.Element) -> dict[str, str]:
    attrs: dict[str, str] = {}
    for child in element:
        if _local(child.tag) not in _ATTRIBUTE_TAGS:
            continue
        key = child.get("key")
        if key is None:
            continue
        value = child.get("value", "")
        attrs[key] = f"{attrs[key]},{value}" if key in attrs else value
    return attrs


def parse_xes(document: bytes | str) -> list[Trace]:
    """Traces and their events in document order; unknown attributes are kept."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    if _local(root.tag) != "log":
        raise MalformedXml(f"root element is <{_local(root.tag)}>, expected <log>")

    traces = []
    for t_index, trace_el in enumerate(c for c in root if _local(c.tag) == "trace"):
        t_attrs = _attributes(trace_el)
        trace_id = t_attrs.get("concept:name") or f"trace-{t_index}"
        events = []
        for e_index, event_el in enumerate(c for c in trace_el if _local(c.tag) == "event"):
            attrs = _attributes(event_el)
            name = attrs.get("concept:name")
            if not name:
                raise MissingConceptName(e_index, trace_id)
            stamp = attrs.get("time:timestamp")
            if not stamp:
                raise MissingTimestamp(e_index, trace_id)
            try:
                when = parse_rfc3339(stamp)
            except (ValueError, OverflowError):
                raise MissingTimestamp(e_index, trace_id) from None
            if when < 0:
                raise MissingTimestamp(e_index, trace_id)
            events.append(LogEvent(trace_id, name, when, attrs))
        traces.append(Trace(trace_id, events, t_attrs))
    return traces


# -- classification ------------------------------------------------------------


class UnitKind(enum.Enum):
    EXECUTION_RUN = "execution-run"
    INSTANCE_MIGRATION = "instance-migration"
    AD_HOC_CHANGE = "ad-hoc-change"


_CHANGE_TYPES = {
    "migration": UnitKind.INSTANCE_MIGRATION,
    "instance-migration": UnitKind.INSTANCE_MIGRATION,
    "ad-hoc": UnitKind.AD_HOC_CHANGE,
    "adhoc": UnitKind.AD_HOC_CHANGE,
}

_OBJECT_KIND = {
    UnitKind.EXECUTION_RUN: Kind.EXECUTION,
    UnitKind.INSTANCE_MIGRATION: Kind.ADAPTATION_MIGRATION,
    UnitKind.AD_HOC_CHANGE: Kind.ADAPTATION_ADHOC,
}

# attribute that carries model_hash for each unit kind
_MODEL_ATTRIBUTE = {
    UnitKind.EXECUTION_RUN: "ph:model",
    UnitKind.INSTANCE_MIGRATION: "ph:model",
    UnitKind.AD_HOC_CHANGE: "ph:diff",
}


@dataclass
class ClassifiedUnit:
    kind: UnitKind
    events: list[LogEvent]
    choreography_instance_id: str
    workflow_instance_id: str
    trace_id: str = ""


def _first(events: Iterable[LogEvent], key: str, fallback: dict[str, str]) -> str | None:
    for ev in events:
        if ev.attributes.get(key):
            return ev.attributes[key]
    return fallback.get(key) or None


def classify_events(trace: Trace | Sequence[LogEvent], trace_attributes: dict[str, str] | None = None) -> list[ClassifiedUnit]:
    """Split a trace into adaptation units followed by one execution run.

    Every event ends up in exactly one unit. A trace without run events
    yields only its adaptation units.
    """
    if isinstance(trace, Trace):
        events, trace_attributes, trace_id = trace.events, trace.attributes, trace.trace_id
    else:
        events = list(trace)
        trace_id = events[0].trace_id if events else ""
    trace_attributes = trace_attributes or {}

    changes: list[list[LogEvent]] = []
    change_kinds: list[UnitKind] = []
    run: list[LogEvent] = []
    open_change = False
    for ev in events:
        kind_attr = ev.attributes.get("ph:kind", "execution")
        if kind_attr == "change":
            change_type = ev.attributes.get("ph:change-type")
            if change_type is not None:
                try:
                    change_kinds.append(_CHANGE_TYPES[change_type])
                except KeyError:
                    raise UnknownChangeType(f"unknown ph:change-type {change_type!r} on {ev.concept_name!r}") from None
                changes.append([ev])
                open_change = True
            elif open_change:
                changes[-1].append(ev)
            else:
                raise MissingRequiredAttribute(f"change event {ev.concept_name!r} has no ph:change-type")
        elif kind_attr == "execution":
            run.append(ev)
            open_change = False
        else:
            raise AdapterError(f"unknown ph:kind {kind_attr!r} on {ev.concept_name!r}")

    units = [(k, evs) for k, evs in zip(change_kinds, changes)]
    if run:
        units.append((UnitKind.EXECUTION_RUN, run))

    out = []
    for kind, evs in units:
        model_attr = _MODEL_ATTRIBUTE[kind]
        if _first(evs, model_attr, {}) is None:
            raise MissingRequiredAttribute(f"{kind.value} unit in trace {trace_id!r} lacks {model_attr}")
        chor = _first(evs, "ph:choreography", trace_attributes)
        if chor is None:
            raise MissingRequiredAttribute(f"trace {trace_id!r} has no ph:choreography")
        wf = _first(evs, "ph:workflow", trace_attributes) or trace_id
        out.append(ClassifiedUnit(kind, list(evs), chor, wf, trace_id))
    return out


# -- object construction ---------------------------------------------------------


def _values(events: Iterable[LogEvent], key: str) -> list[str]:
    out: list[str] = []
    for ev in events:
        raw = ev.attributes.get(key)
        if raw:
            out.extend(v for v in _LIST_SPLIT.split(raw.strip()) if v)
    return out


def _unique(values: Iterable[bytes]) -> list[bytes]:
    return list(dict.fromkeys(values))


def build_object(unit: ClassifiedUnit) -> ProvenanceObject:
    """Turn a classified unit into a provenance object carrying its signatures verbatim."""
    model_attr = _MODEL_ATTRIBUTE[unit.kind]
    models = _unique(parse_hex(v, DIGEST_SIZE, model_attr) for v in _values(unit.events, model_attr))
    if not models:
        raise MissingRequiredAttribute(f"{unit.kind.value} unit lacks {model_attr}")
    if len(models) > 1:
        raise ConflictingAttribute(f"{unit.kind.value} unit has {len(models)} different {model_attr} values")

    sigs = _values(unit.events, "ph:signature")
    key_ids = _values(unit.events, "ph:keyid")
    if not sigs or not key_ids:
        raise MissingSignature(f"{unit.kind.value} unit in trace {unit.trace_id!r} is unsigned")
    if len(sigs) != len(key_ids):
        raise MissingSignature(f"{len(sigs)} signatures but {len(key_ids)} key ids")
    signatures = [
        SignatureEntry(parse_hex(k, KEY_ID_SIZE, "ph:keyid"), parse_hex(s, SIGNATURE_SIZE, "ph:signature"))
        for k, s in zip(key_ids, sigs)
    ]
    try:
        return ProvenanceObject(
            kind=_OBJECT_KIND[unit.kind],
            choreography_instance_id=unit.choreography_instance_id,
            workflow_instance_id=unit.workflow_instance_id,
            model_hash=models[0],
            input_hashes=_unique(parse_hex(v, DIGEST_SIZE, "ph:input") for v in _values(unit.events, "ph:input")),
            output_hashes=_unique(parse_hex(v, DIGEST_SIZE, "ph:output") for v in _values(unit.events, "ph:output")),
            timestamp=unit.events[-1].time,
            predecessor_hashes=_unique(
                parse_hex(v, DIGEST_SIZE, "ph:predecessor") for v in _values(unit.events, "ph:predecessor")
            ),
            signatures=signatures,
        )
    except MalformedObject as exc:
        raise AdapterError(str(exc)) from None


# -- predecessor identification ----------------------------------------------------


@dataclass(frozen=True)
class IndexedObject:
    hash: bytes
    choreography_instance_id: str
    output_hashes: frozenset[bytes]
    timestamp: int


class RecordView:
    """What predecessor identification needs to know about recorded objects."""

    def __init__(self) -> None:
        self._items: list[IndexedObject] = []
        self._by_chor: dict[str, list[IndexedObject]] = {}

    @classmethod
    def from_controller(cls, controller: Controller) -> "RecordView":
        view = cls()
        for digest, obj in controller.iter_objects():
            view.add(digest, obj)
        return view

    def add(self, digest: bytes, obj: ProvenanceObject) -> None:
        item = IndexedObject(digest, obj.choreography_instance_id, frozenset(obj.output_hashes), obj.timestamp)
        self._items.append(item)
        self._by_chor.setdefault(item.choreography_instance_id, []).append(item)

    def in_choreography(self, choreography_id: str) -> list[IndexedObject]:
        return list(self._by_chor.get(choreography_id, ()))

    def __iter__(self):
        return iter(list(self._items))

    def __len__(self) -> int:
        return len(self._items)


def identify_predecessors(candidate: ProvenanceObject, index: RecordView) -> list[bytes]:
    """Predecessor hashes for ``candidate``.

    Explicit predecessors win. Otherwise the latest recorded objects of the
    same choreography instance whose outputs overlap the candidate's inputs
    are chosen (all of them when several share the latest timestamp).
    Otherwise the candidate is a genesis object.
    """
    if candidate.predecessor_hashes:
        return list(candidate.predecessor_hashes)
    inputs = set(candidate.input_hashes)
    if not inputs:
        return []
    matches = [
        item for item in index.in_choreography(candidate.choreography_instance_id)
        if item.output_hashes & inputs
    ]
    if not matches:
        return []
    latest = max(item.timestamp for item in matches)
    return [item.hash for item in matches if item.timestamp == latest]


# -- external operations ------------------------------------------------------------


@dataclass
class Outcome:
    index: int
    source: str
    kind: str | None
    status: str  # accepted | duplicate | rejected | error
    hash: bytes | None = None
    reason: str | None = None
    detail: str = ""
    receipts: list = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "source": self.source,
            "kind": self.kind,
            "status": self.status,
            "hash": self.hash.hex() if self.hash else None,
            "reason": self.reason,
            "detail": self.detail,
            "receipts": [r.to_json() for r in self.receipts],
        }


class Adapter:
    """External Collect and Retrieve operations on top of a controller."""

    def __init__(self, controller: Controller) -> None:
        self.controller = controller
        self._view: RecordView | None = None

    @property
    def view(self) -> RecordView:
        if self._view is None:
            self._view = RecordView.from_controller(self.controller)
        return self._view

    def _plan(self, raw: bytes | str, fmt: Format) -> list[tuple[str, str | None, ProvenanceObject | Exception]]:
        if fmt is Format.SINGLE_OBJECT_JSON:
            try:
                data = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise MalformedObject(f"not JSON: {exc}") from None
            obj = object_from_json(data)
            return [("json", obj.kind.label, obj)]

        plan: list[tuple[str, str | None, ProvenanceObject | Exception]] = []
        for trace in parse_xes(raw):
            try:
                units = classify_events(trace)
            except AdapterError as exc:
                plan.append((trace.trace_id, None, exc))
                continue
            for unit in units:
                label = _OBJECT_KIND[unit.kind].label
                try:
                    plan.append((trace.trace_id, label, build_object(unit)))
                except AdapterError as exc:
                    plan.append((trace.trace_id, label, exc))
        return plan

    def _choose(self, built: ProvenanceObject) -> ProvenanceObject:
        preds = identify_predecessors(built, self.view)
        if list(built.predecessor_hashes) == preds:
            return built
        linked = replace(built, predecessor_hashes=preds)
        # the heuristic guess only stands if the signers actually signed it
        if self.controller.validate(linked).ok or not self.controller.validate(built).ok:
            return linked
        return built

    def collect_external(self, raw: bytes | str, fmt: Format = Format.XES_LOG) -> list[Outcome]:
        """Parse, classify, build and collect every object in ``raw``.

        Outcomes are positionally aligned with the objects built. A document
        that cannot be parsed raises before anything is collected; problems
        with individual objects are reported in their outcome.
        """
        outcomes = []
        for i, (source, kind, item) in enumerate(self._plan(raw, fmt)):
            if isinstance(item, Exception):
                outcomes.append(Outcome(i, source, kind, "error", reason=type(item).__name__, detail=str(item)))
                continue
            obj = self._choose(item)
            digest = obj.provenance_hash()
            try:
                receipts = self.controller.collect(obj)
            except ValidationFailed as exc:
                outcomes.append(Outcome(i, source, kind, "rejected", digest, exc.report.status.value, str(exc)))
            except UnknownPredecessor as exc:
                outcomes.append(Outcome(i, source, kind, "rejected", digest, "unknown_predecessor", str(exc)))
            except DuplicateObject as exc:
                outcomes.append(Outcome(i, source, kind, "duplicate", digest, "duplicate_object", str(exc)))
            except ProviderFailure as exc:
                outcomes.append(Outcome(i, source, kind, "error", digest, "provider_failure", str(exc)))
            else:
                self.view.add(digest, obj)
                outcomes.append(Outcome(i, source, kind, "accepted", digest, receipts=receipts))
        return outcomes

    def collect_file(self, path: str | Path) -> list[Outcome]:
        path = Path(path)
        fmt = Format.SINGLE_OBJECT_JSON if path.suffix.lower() == ".json" else Format.XES_LOG
        return self.collect_external(path.read_bytes(), fmt)

    def retrieve_external(self, query: str) -> str:
        return json.dumps(self.retrieve_path(query).to_json(), indent=2)

    def retrieve_path(self, query: str):
        return self.controller.retrieve(parse_query(query))


def parse_query(query: str) -> bytes:
    q = query.strip().lower()
    if len(q) != 2 * DIGEST_SIZE or not re.fullmatch(r"[0-9a-f]+", q):
        raise MalformedQuery(f"expected {2 * DIGEST_SIZE} hex characters, got {query!r}")
    return bytes.fromhex(q)


def is_ingestible(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in (".xes", ".json", ".xml")


__all__ = [
    "Adapter",
    "ClassifiedUnit",
    "Format",
    "LogEvent",
    "Outcome",
    "RecordView",
    "Trace",
    "UnitKind",
    "build_object",
    "classify_events",
    "identify_predecessors",
    "parse_query",
    "parse_rfc3339",
    "parse_xes",
]
