"""Realm lifecycle: creation, measurements, termination."""

import hashlib

import pytest

from micasim.digest import ZERO_DIGEST, extend_chain
from micasim.errors import GranuleNotDelegated, ImageTooLarge, RealmTerminated
from micasim.granules import FAULT, GRANULE_SIZE, HOST, GranuleTag
from micasim.monitor import Monitor
from micasim.realm import PRIVATE_IPA_BASE, EntryKind, RealmState


def _realm_with(mon, image, pas):
    for pa in pas:
        mon.delegate_granule(pa)
    return mon.create_realm(image, pas)


def test_identical_images_identical_rim_distinct_gid():
    mon = Monitor(num_granules=16)
    a = _realm_with(mon, b"same image", [0x0])
    b = _realm_with(mon, b"same image", [0x1000])
    assert mon.realms[a].rim == mon.realms[b].rim
    assert a != b


def test_rtt_layout_from_base():
    mon = Monitor(num_granules=16)
    gid = _realm_with(mon, b"x" * (2 * GRANULE_SIZE + 5), [0x0, 0x1000, 0x2000])
    rd = mon.realms[gid]
    entries = rd.entries_of_kind(EntryKind.PRIVATE)
    assert [e.ipa for e in entries] == [
        PRIVATE_IPA_BASE,
        PRIVATE_IPA_BASE + 0x1000,
        PRIVATE_IPA_BASE + 0x2000,
    ]
    assert all(e.kind is EntryKind.PRIVATE for e in entries)
    assert rd.state is RealmState.ACTIVE


def test_empty_image_realm():
    mon = Monitor(num_granules=16)
    gid = mon.create_realm(b"", [])
    rd = mon.realms[gid]
    assert rd.rtt == {}
    assert rd.rim != ZERO_DIGEST  # configuration-only measurement


def test_image_too_large():
    mon = Monitor(num_granules=16)
    mon.delegate_granule(0x0)
    with pytest.raises(ImageTooLarge):
        mon.create_realm(b"z" * (GRANULE_SIZE + 1), [0x0])


def test_create_requires_delegated():
    mon = Monitor(num_granules=16)
    with pytest.raises(GranuleNotDelegated):
        mon.create_realm(b"", [0x0])


def test_image_content_lands_in_granules():
    mon = Monitor(num_granules=16)
    image = bytes(range(256)) * 20  # 5120 bytes, crosses a granule
    gid = _realm_with(mon, image, [0x0, 0x1000])
    got = mon.realm_read(gid, PRIVATE_IPA_BASE) + mon.realm_read(gid, PRIVATE_IPA_BASE + 0x1000)
    assert got[: len(image)] == image


class TestMeasurements:
    def test_first_extension_from_zero(self):
        mon = Monitor(num_granules=16)
        gid = mon.create_realm(b"", [])
        value = hashlib.sha256(b"event").digest()
        mon.extend_rem(gid, value)
        assert mon.realms[gid].rem == hashlib.sha256(ZERO_DIGEST + value).digest()

    def test_order_sensitivity(self):
        mon = Monitor(num_granules=16)
        a = mon.create_realm(b"", [])
        b = mon.create_realm(b"", [])
        d1, d2 = hashlib.sha256(b"1").digest(), hashlib.sha256(b"2").digest()
        mon.extend_rem(a, d1)
        mon.extend_rem(a, d2)
        mon.extend_rem(b, d2)
        mon.extend_rem(b, d1)
        assert mon.realms[a].rem != mon.realms[b].rem

    def test_hundredfold_extension_matches_reference_fold(self):
        mon = Monitor(num_granules=16)
        gid = mon.create_realm(b"", [])
        value = hashlib.sha256(b"repeated").digest()
        for _ in range(100):
            mon.extend_rem(gid, value)
        expected = ZERO_DIGEST
        for _ in range(100):
            expected = hashlib.sha256(expected + value).digest()
        assert mon.realms[gid].rem == expected

    def test_extend_after_termination_fails(self):
        mon = Monitor(num_granules=16)
        gid = mon.create_realm(b"", [])
        mon.terminate_realm(gid)
        with pytest.raises(RealmTerminated):
            mon.extend_rem(gid, ZERO_DIGEST)

    def test_rim_never_changes(self):
        mon = Monitor(num_granules=16)
        gid = _realm_with(mon, b"img", [0x0])
        rim = mon.realms[gid].rim
        mon.extend_rem(gid, hashlib.sha256(b"x").digest())
        assert mon.realms[gid].rim == rim


class TestTermination:
    def test_idempotent(self):
        mon = Monitor(num_granules=16)
        gid = mon.create_realm(b"", [])
        mon.terminate_realm(gid)
        mon.terminate_realm(gid)  # no-op
        assert mon.realms[gid].state is RealmState.TERMINATED

    def test_private_granules_zeroed_from_host_view(self):
        mon = Monitor(num_granules=16)
        gid = _realm_with(mon, b"top secret" * 100, [0x0, 0x1000])
        assert mon.read_as(0x0, HOST) is FAULT
        mon.terminate_realm(gid)
        assert mon.read_as(0x0, HOST) == bytes(GRANULE_SIZE)
        assert mon.read_as(0x1000, HOST) == bytes(GRANULE_SIZE)

    def test_gid_not_reused(self):
        mon = Monitor(num_granules=16)
        a = mon.create_realm(b"", [])
        mon.terminate_realm(a)
        b = mon.create_realm(b"", [])
        assert b != a

    def test_system_wide_private_exclusivity(self):
        mon = Monitor(num_granules=16)
        a = _realm_with(mon, b"a", [0x0, 0x1000])
        b = _realm_with(mon, b"b", [0x2000, 0x3000])
        pas_a = {e.pa for e in mon.realms[a].entries_of_kind(EntryKind.PRIVATE)}
        pas_b = {e.pa for e in mon.realms[b].entries_of_kind(EntryKind.PRIVATE)}
        assert not pas_a & pas_b
        # a private granule cannot be given to a second realm
        with pytest.raises(GranuleNotDelegated):
            mon.create_realm(b"", [0x0])
