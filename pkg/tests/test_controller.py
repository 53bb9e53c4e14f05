import random

import pytest

from provholder.controller import Controller, ObjectRecord, ValidationStatus, validate
from provholder.encoding import Kind, SignatureEntry
from provholder.errors import (
    CorruptRecord,
    DuplicateObject,
    IoFailure,
    ProviderFailure,
    TargetWriteFailure,
    UnknownObject,
    UnknownPredecessor,
    ValidationFailed,
)
from provholder.providers import MockAuthority, SimpleStorage, TimestampProvider
from tests.helpers import Signer, digest, keystore, make_object, random_dag


@pytest.fixture
def signer():
    return Signer.fresh("ctl")


@pytest.fixture
def ctl(tmp_path, signer):
    return Controller(keystore(signer), [SimpleStorage(tmp_path / "a", "a")], ObjectRecord(tmp_path / "rec.phr"))


def chain(signer, n):
    objs, prev = [], ()
    for i in range(n):
        o = make_object(signer, wf=f"w{i}", preds=prev)
        objs.append(o)
        prev = (o.provenance_hash(),)
    return objs


def flip_on_disk(store, h, at=12):
    off, _ = store.location(h)
    with open(store.data_path, "r+b") as fh:
        fh.seek(off + at)
        b = fh.read(1)[0]
        fh.seek(off + at)
        fh.write(bytes([b ^ 0x40]))


class TestValidate:
    def test_valid(self, signer):
        assert validate(make_object(signer), keystore(signer)).status is ValidationStatus.VALID

    def test_tampered_payload(self, signer):
        o = make_object(signer)
        bad = make_object(signer, wf="other")
        forged = type(o)(**{**bad.__dict__, "signatures": o.signatures})
        r = validate(forged, keystore(signer))
        assert r.status is ValidationStatus.SIGNATURE_INVALID and r.signatures == ((signer.id, False),)

    def test_unknown_signer(self, signer):
        assert validate(make_object(signer), keystore()).status is ValidationStatus.UNKNOWN_SIGNER

    def test_unknown_beats_invalid(self, signer):
        other = Signer.fresh("other")
        o = other.sign(make_object(signer))
        sigs = [SignatureEntry(s.key_id, bytes(64)) if s.key_id == signer.id else s for s in o.signatures]
        o = type(o)(**{**o.__dict__, "signatures": sigs})
        assert validate(o, keystore(signer)).status is ValidationStatus.UNKNOWN_SIGNER

    def test_unsigned_is_malformed(self, signer):
        assert validate(make_object(signer).unsigned(), keystore(signer)).status is ValidationStatus.MALFORMED


class TestCollect:
    def test_genesis(self, ctl, signer):
        receipts = ctl.collect(make_object(signer))
        assert len(receipts) == 1 and len(ctl.record) == 1

    def test_unknown_predecessor(self, ctl, signer):
        o = make_object(signer, preds=[digest("ghost")])
        with pytest.raises(UnknownPredecessor):
            ctl.collect(o)
        assert len(ctl.record) == 0 and not ctl.exists(o.provenance_hash())
        assert len(ctl.providers["a"]) == 0

    def test_duplicate(self, ctl, signer):
        o = make_object(signer)
        ctl.collect(o)
        with pytest.raises(DuplicateObject):
            ctl.collect(o)
        assert len(ctl.providers["a"]) == 1

    def test_rejected_leaves_no_trace(self, ctl):
        stranger = Signer.fresh("stranger")
        o = make_object(stranger)
        with pytest.raises(ValidationFailed) as info:
            ctl.collect(o)
        assert info.value.report.status is ValidationStatus.UNKNOWN_SIGNER
        assert not ctl.exists(o.provenance_hash())

    def test_provider_failure_rolls_back(self, tmp_path, signer):
        good = SimpleStorage(tmp_path / "a", "a")

        class Broken(SimpleStorage):
            def record(self, obj):
                raise IoFailure("disk on fire")

        ctl = Controller(keystore(signer), [good, Broken(tmp_path / "b", "b")])
        o = make_object(signer)
        with pytest.raises(ProviderFailure) as info:
            ctl.collect(o)
        assert info.value.provider_id == "b"
        assert not ctl.exists(o.provenance_hash()) and len(good) == 0

    def test_selection_by_kind(self, tmp_path, signer):
        a, b = SimpleStorage(tmp_path / "a", "a"), SimpleStorage(tmp_path / "b", "b")
        ctl = Controller(keystore(signer), [a, b], selection={Kind.ADAPTATION_ADHOC: ["b"]})
        ctl.collect(make_object(signer, kind=Kind.ADAPTATION_ADHOC))
        ctl.collect(make_object(signer, wf="x"))
        assert (len(a), len(b)) == (1, 2)

    def test_timestamp_provider_receives_hash(self, tmp_path, signer):
        ts = TimestampProvider(MockAuthority(), auto_flush=False)
        ctl = Controller(keystore(signer), [ts, SimpleStorage(tmp_path / "a", "a")])
        o = make_object(signer)
        receipts = ctl.collect(o)
        assert [r.provider_id for r in receipts] == ["a", "timestamp"]
        assert ts.unbatched == [o.provenance_hash()]


class TestRetrieve:
    def test_genesis(self, ctl, signer):
        o = make_object(signer)
        ctl.collect(o)
        path = ctl.retrieve(o.provenance_hash())
        assert len(path) == 1 and path.elements[0].status == "valid"

    def test_chain_order(self, ctl, signer):
        a, b, c = chain(signer, 3)
        for o in (a, b, c):
            ctl.collect(o)
        path = ctl.retrieve(c.provenance_hash())
        assert path.hashes == [o.provenance_hash() for o in (c, b, a)]
        assert path.origins == [a.provenance_hash()]
        assert path.elements[0].object.encode() == c.encode()

    def test_diamond_visits_once(self, ctl, signer):
        root = make_object(signer, wf="root")
        h = root.provenance_hash()
        left = make_object(signer, wf="l", preds=[h])
        right = make_object(signer, wf="r", preds=[h])
        tip = make_object(signer, wf="tip", preds=[left.provenance_hash(), right.provenance_hash()])
        for o in (root, left, right, tip):
            ctl.collect(o)
        path = ctl.retrieve(tip.provenance_hash())
        assert len(path) == 4 and len(set(path.hashes)) == 4
        for i, el in enumerate(path.elements[1:], 1):
            assert el.hash in next(e for e in path.elements[:i] if e.hash == el.parent).predecessors

    def test_unknown(self, ctl):
        with pytest.raises(UnknownObject):
            ctl.retrieve(digest("nope"))

    def test_discrepancy_flagged(self, tmp_path, signer):
        a, b = SimpleStorage(tmp_path / "a", "a"), SimpleStorage(tmp_path / "b", "b")
        ctl = Controller(keystore(signer), [a, b])
        objs = chain(signer, 3)
        for o in objs:
            ctl.collect(o)
        flip_on_disk(b, objs[1].provenance_hash())
        path = ctl.retrieve(objs[2].provenance_hash())
        assert path.discrepancies == [objs[1].provenance_hash()]
        assert path.elements[1].providers == {"a": "ok", "b": "corrupt"}
        assert path.elements[1].status == "valid"

    def test_all_copies_corrupt(self, ctl, signer):
        o = make_object(signer)
        ctl.collect(o)
        flip_on_disk(ctl.providers["a"], o.provenance_hash())
        el = ctl.retrieve(o.provenance_hash()).elements[0]
        assert el.status == "unavailable" and el.providers == {"a": "corrupt"}

    def test_provider_down(self, tmp_path, signer):
        class Down(SimpleStorage):
            def retrieve_one(self, digest):
                raise IoFailure("offline")

        ctl = Controller(keystore(signer), [Down(tmp_path / "a", "a")])
        o = make_object(signer)
        ctl.collect(o)
        with pytest.raises(ProviderFailure):
            ctl.retrieve(o.provenance_hash())

    def test_timestamp_status_reported(self, tmp_path, signer):
        ts = TimestampProvider(MockAuthority(confirmation_delay_cycles=1), auto_flush=False)
        ctl = Controller(keystore(signer), [SimpleStorage(tmp_path / "a", "a"), ts])
        o = make_object(signer)
        ctl.collect(o)
        assert ctl.retrieve(o.provenance_hash()).elements[0].timestamps == {"timestamp": "unbatched"}
        ts.flush_batch()
        ts.poll_confirmations()
        assert ctl.retrieve(o.provenance_hash()).elements[0].timestamps == {"timestamp": "confirmed_valid"}


class TestRecord:
    def test_persistence(self, tmp_path, signer):
        path = tmp_path / "rec.phr"
        rec = ObjectRecord(path)
        a, b = chain(signer, 2)
        rec.append(a.provenance_hash(), ())
        rec.append(b.provenance_hash(), (a.provenance_hash(),))
        again = ObjectRecord(path)
        assert again.items() == rec.items() and not again.corrupt

    def test_rejects_unknown_pred(self):
        with pytest.raises(UnknownPredecessor):
            ObjectRecord().append(digest("x"), (digest("y"),))

    def test_corrupt_record_rebuilt(self, tmp_path, signer):
        store = SimpleStorage(tmp_path / "a", "a")
        ctl = Controller(keystore(signer), [store], ObjectRecord(tmp_path / "rec.phr"))
        objs = chain(signer, 4)
        for o in objs:
            ctl.collect(o)
        (tmp_path / "rec.phr").write_bytes(b"garbage!" * 10)
        again = Controller(keystore(signer), [store], ObjectRecord(tmp_path / "rec.phr"))
        assert list(again.record) == [o.provenance_hash() for o in objs]
        assert again.retrieve(objs[-1].provenance_hash()).origins == [objs[0].provenance_hash()]

    def test_torn_tail(self, tmp_path, signer):
        path = tmp_path / "rec.phr"
        rec = ObjectRecord(path)
        rec.append(digest("a"), ())
        size = path.stat().st_size
        with open(path, "ab") as fh:
            fh.write(b"PHR1" + b"\0" * 10)
        again = ObjectRecord(path)
        assert list(again) == [digest("a")] and not again.corrupt
        assert path.stat().st_size == size


class TestMigrate:
    def setup_stores(self, tmp_path, signer, n=10):
        src, dst = SimpleStorage(tmp_path / "src", "src"), SimpleStorage(tmp_path / "dst", "dst")
        ctl = Controller(keystore(signer), [src, dst], selection={k: ["src"] for k in Kind})
        objs = chain(signer, n)
        for o in objs:
            ctl.collect(o)
        return ctl, src, dst, objs

    def test_copy(self, tmp_path, signer):
        ctl, src, dst, objs = self.setup_stores(tmp_path, signer, 50)
        report = ctl.migrate("src", "dst")
        assert len(report.migrated) == 50 and len(src) == 50 and len(dst) == 50
        assert {h: dst.retrieve_raw(h) for h in dst.hashes()} == {h: src.retrieve_raw(h) for h in src.hashes()}

    def test_purge(self, tmp_path, signer):
        ctl, src, dst, _ = self.setup_stores(tmp_path, signer)
        report = ctl.migrate("src", "dst", purge=True)
        assert len(src) == 0 and len(dst) == 10 and len(report.purged) == 10

    def test_corrupt_excluded(self, tmp_path, signer):
        ctl, src, dst, objs = self.setup_stores(tmp_path, signer)
        bad = objs[4].provenance_hash()
        flip_on_disk(src, bad)
        report = ctl.migrate("src", "dst", purge=True)
        assert len(report.migrated) == 9
        assert [e["hash"] for e in report.excluded] == [bad.hex()]
        assert src.hashes() == [bad]
        with pytest.raises(CorruptRecord):
            src.retrieve_one(bad)

    def test_unregistered_signer_excluded(self, tmp_path, signer):
        ctl, src, dst, _ = self.setup_stores(tmp_path, signer, 2)
        stranger = make_object(Signer.fresh("x"))
        src.record(stranger)
        report = ctl.migrate(src, dst)
        assert report.excluded[0]["reason"] == "unknown_signer" and len(report.migrated) == 2

    def test_same_store_refused(self, tmp_path, signer):
        ctl, src, _, _ = self.setup_stores(tmp_path, signer, 1)
        with pytest.raises(ValueError):
            ctl.migrate(src, SimpleStorage(tmp_path / "src", "alias"))

    def test_target_failure_leaves_source(self, tmp_path, signer):
        ctl, src, _, _ = self.setup_stores(tmp_path, signer, 3)

        class Full(SimpleStorage):
            def record(self, obj):
                raise IoFailure("full")

        with pytest.raises(TargetWriteFailure):
            ctl.migrate(src, Full(tmp_path / "full", "full"), purge=True)
        assert len(src) == 3

    def test_external_store_indexed(self, tmp_path, signer):
        other = SimpleStorage(tmp_path / "other", "other")
        for o in chain(signer, 3):
            other.record(o)
        ctl = Controller(keystore(signer), [SimpleStorage(tmp_path / "main", "main")])
        report = ctl.migrate(other, "main")
        assert report.indexed == 3 and len(ctl.record) == 3


def test_random_dag_retrieval(tmp_path, signer):
    rng = random.Random(7)
    preds = random_dag(rng, 120)
    ctl = Controller(keystore(signer), [SimpleStorage(tmp_path / "a", "a", durable=False)])
    hashes = []
    for i, ps in enumerate(preds):
        o = make_object(signer, wf=f"n{i}", preds=[hashes[p] for p in ps])
        ctl.collect(o)
        hashes.append(o.provenance_hash())
    path = ctl.retrieve(hashes[-1])
    assert len(path.hashes) == len(set(path.hashes))
