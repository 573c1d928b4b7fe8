"""Group attestation: staging, chunked retrieval, verification, sizes."""

import pytest

from conftest import build_two_peer_pair
from micasim.attestation import (
    TOKEN_BODY_OFFSET,
    HmacSigner,
    build_group_token,
    verify_group_token,
)
from micasim.errors import (
    BadSignature,
    DigestMismatch,
    InconsistentActivity,
    NoStagedToken,
    NonceMismatch,
)
from micasim.host import build_chain, token_size_table
from micasim.monitor import Monitor

NONCE = bytes(range(32))
OTHER_NONCE = bytes(31) + b"\x01"


def test_isolated_realm_is_group_of_one():
    mon = Monitor(num_granules=16)
    gid = mon.create_realm(b"", [])
    size = mon.rsi_attest_token_init_group(gid, NONCE)
    token = mon.staged_token_bytes(gid)
    assert len(token) == size
    group = verify_group_token(token, mon.signer, NONCE)
    assert [p.gid for p in group.peers] == [gid]
    assert group.peers[0].policy_self is None


def test_pair_token_covers_both_and_flags_active():
    h, a, b, doc_a, doc_b, _ = build_two_peer_pair()
    h.upload(a, doc_a)
    h.upload(b, doc_b)
    h.mon.rsi_attest_token_init_group(a, NONCE)
    token = h.mon.staged_token_bytes(a)
    group = verify_group_token(token, h.mon.signer, NONCE)
    assert [p.gid for p in group.peers] == sorted([a, b])
    (chan,) = [c for c in group.channels if c.name == "Mem1"]
    assert chan.active
    assert chan.peers == sorted([a, b])


def test_disjoint_pairs_stay_disjoint():
    from conftest import MEM1_GPA, PlatformHarness, rim_hex, two_peer_doc
    from micasim.granules import GRANULE_SIZE

    h = PlatformHarness(num_granules=256)
    quads = [h.realm(image=f"r{i}".encode()) for i in range(4)]
    a, b, c, d = quads
    pas_ab = [h.delegated(), h.delegated()]
    pas_cd = [h.delegated(), h.delegated()]
    h.share(pas_ab, (a, MEM1_GPA), (b, MEM1_GPA))
    h.share(pas_cd, (c, MEM1_GPA), (d, MEM1_GPA))
    size = 2 * GRANULE_SIZE
    h.upload(a, two_peer_doc("P1", rim_hex(h.mon, a), rim_hex(h.mon, b), size=size))
    h.upload(b, two_peer_doc("P2", rim_hex(h.mon, a), rim_hex(h.mon, b), size=size))
    h.upload(c, two_peer_doc("P1", rim_hex(h.mon, c), rim_hex(h.mon, d), size=size))
    h.upload(d, two_peer_doc("P2", rim_hex(h.mon, c), rim_hex(h.mon, d), size=size))
    h.mon.rsi_attest_token_init_group(a, NONCE)
    group = verify_group_token(h.mon.staged_token_bytes(a), h.mon.signer, NONCE)
    assert [p.gid for p in group.peers] == sorted([a, b])


class TestChunkedRetrieval:
    def test_chunk_arithmetic(self):
        mon = Monitor(num_granules=16)
        mon.delegate_granule(0x0)
        gid = mon.create_realm(b"", [0x0])
        mon._staged[gid] = (b"t" * 3000, 0)
        ipa = 0x4000_0000
        writes = []
        while True:
            n = mon.rsi_attest_token_continue_group(gid, ipa, 1024)
            writes.append(n)
            if n == 0:
                break
        assert writes == [1024, 1024, 952, 0]

    def test_drained_token_matches_staged(self):
        host, gids = build_chain(3)
        expected_size = host.mon.rsi_attest_token_init_group(gids[0], NONCE)
        staged = host.mon.staged_token_bytes(gids[0])
        token = host.fetch_group_token(gids[0], NONCE, chunk=500)
        assert len(token) == expected_size
        assert token == staged

    def test_reinit_restarts(self):
        host, gids = build_chain(2)
        host.mon.rsi_attest_token_init_group(gids[0], NONCE)
        host.mon.rsi_attest_token_continue_group(gids[0], host.scratch_ipa(gids[0]), 64)
        host.mon.rsi_attest_token_init_group(gids[0], NONCE)
        assert host.mon._staged[gids[0]][1] == 0

    def test_no_staged_token(self):
        mon = Monitor(num_granules=16)
        gid = mon.create_realm(b"", [])
        with pytest.raises(NoStagedToken):
            mon.rsi_attest_token_continue_group(gid, 0x4000_0000, 64)

    def test_buffer_outside_private_memory(self):
        mon = Monitor(num_granules=16)
        mon.delegate_granule(0x0)
        gid = mon.create_realm(b"", [0x0])
        mon.rsi_attest_token_init_group(gid, NONCE)
        with pytest.raises(NoStagedToken):
            mon.rsi_attest_token_continue_group(gid, 0xDEAD_0000, 64)


class TestVerification:
    def _token(self):
        host, gids = build_chain(3)
        host.mon.rsi_attest_token_init_group(gids[0], NONCE)
        return host, gids, host.mon.staged_token_bytes(gids[0])

    def test_good_token_reconstructs_chain(self):
        host, gids, token = self._token()
        group = verify_group_token(token, host.mon.signer, NONCE)
        assert [p.gid for p in group.peers] == gids
        by_name = {c.name: c for c in group.channels}
        assert by_name["L0"].peers == [gids[0], gids[1]]
        assert by_name["L1"].peers == [gids[1], gids[2]]
        assert all(c.active for c in group.channels)

    def test_flipped_policy_byte_fails_digest(self):
        host, gids, token = self._token()
        blob = host.mon.realms[gids[1]].policy_blob
        idx = token.index(blob)
        bad = bytearray(token)
        bad[idx + 20] ^= 0x01
        with pytest.raises(DigestMismatch):
            verify_group_token(bytes(bad), host.mon.signer, NONCE)

    def test_stale_nonce(self):
        host, gids, token = self._token()
        with pytest.raises(NonceMismatch):
            verify_group_token(token, host.mon.signer, OTHER_NONCE)

    def test_flipped_signature_bit(self):
        host, gids, token = self._token()
        bad = bytearray(token)
        bad[-1] ^= 0x80
        with pytest.raises(BadSignature):
            verify_group_token(bytes(bad), host.mon.signer, NONCE)

    def test_wrong_anchor(self):
        host, gids, token = self._token()
        with pytest.raises(BadSignature):
            verify_group_token(token, HmacSigner.from_seed("someone else"), NONCE)


def test_same_group_same_token_body():
    host, gids = build_chain(3)
    tokens = []
    for gid in gids:
        host.mon.rsi_attest_token_init_group(gid, NONCE)
        tokens.append(host.mon.staged_token_bytes(gid))
    bodies = {t[TOKEN_BODY_OFFSET:] for t in tokens}
    assert len(bodies) == 1
    initiators = {t[:TOKEN_BODY_OFFSET] for t in tokens}
    assert len(initiators) == 3  # only the initiator field differs


def test_signer_tamper_detection():
    signer = HmacSigner.from_seed("tamper")
    sig = signer.sign(b"message")
    assert signer.verify(b"message", sig)
    assert not signer.verify(b"messagf", sig)
    flipped = bytearray(sig)
    flipped[5] ^= 0x04
    assert not signer.verify(b"message", bytes(flipped))


class TestSizeLinearity:
    def test_first_differences_nearly_constant(self):
        rows = token_size_table(6)
        sizes = [s for _, s in rows]
        diffs = [b - a for a, b in zip(sizes, sizes[1:])]
        mean = sum(diffs) / len(diffs)
        assert all(abs(d - mean) / mean <= 0.10 for d in diffs)

    def test_increment_matches_record_cost(self):
        # per-realm increment ~= platform token + a ~450-byte policy blob
        host, gids = build_chain(3)
        rd = host.mon.realms[gids[1]]
        from micasim.attestation import make_platform_token

        pt = make_platform_token(
            host.mon.signer, rd.gid, rd.rim, rd.rem, host.mon.platform_id, NONCE
        )
        expected = len(pt.serialize()) + 450
        rows = token_size_table(6)
        sizes = [s for _, s in rows]
        diffs = [b - a for a, b in zip(sizes, sizes[1:])]
        mean = sum(diffs) / len(diffs)
        assert abs(mean - expected) / expected <= 0.30
