"""Policy text parsing, canonical encoding, decoding, and digests."""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TWO_PEER_DOC
from micasim.errors import (
    BadMagic,
    BadVersion,
    DuplicateMapping,
    DuplicatePeer,
    EmptyRange,
    PolicySyntaxError,
    PolicyTooLarge,
    SchemaError,
    TruncatedBlob,
)
from micasim.policy import (
    ANY,
    SELF,
    ChannelType,
    FilterAction,
    MappingSpec,
    MemChannelSpec,
    PeerSpec,
    PolicyConfig,
    TransChannelSpec,
    TransType,
    decode_policy,
    empty_policy_blob,
    encode_policy,
    parse_policy,
    policy_digest,
)


class TestTwoPeerDoc:
    def test_parses_verbatim(self):
        cfg = parse_policy(TWO_PEER_DOC)
        assert cfg.self_id == "P1"
        p1, p2 = cfg.peer("P1"), cfg.peer("P2")
        assert p1.is_gateway and not p1.strict
        assert not p2.is_gateway and p2.strict
        assert p1.expected_rim == (0xABCD).to_bytes(32, "big")
        assert p2.expected_rim == (0xEFAB).to_bytes(32, "big")

    def test_mem_channel_shape(self):
        cfg = parse_policy(TWO_PEER_DOC)
        (mem1,) = cfg.mem_channels
        assert mem1.name == "Mem1"
        assert mem1.size == 0x4000000
        assert mem1.type is ChannelType.PROTECTED
        assert mem1.mapping_for("P1").prot == frozenset("W")
        assert mem1.mapping_for("P2").prot == frozenset("R")
        assert mem1.mapping_for("P1").gpa == 0x18000000000
        any_m = mem1.any_mapping
        assert any_m.prot == frozenset("RW")
        assert any_m.count == -1

    def test_trans_channels(self):
        cfg = parse_policy(TWO_PEER_DOC)
        cf1 = next(c for c in cfg.trans_channels if c.name == "CF1")
        cf2 = next(c for c in cfg.trans_channels if c.name == "CF2")
        assert cf1.owner == "P2"
        assert cf1.type is TransType.EXCEPTION
        assert cf1.range == frozenset({1, 4})  # discrete ids, not an interval
        assert cf1.policy is FilterAction.ALLOW
        assert cf2.owner == "P1"
        assert cf2.type is TransType.CALL
        assert cf2.range == frozenset({0})
        assert cf2.policy is FilterAction.SCRUB

    def test_roundtrips_through_codec(self):
        cfg = parse_policy(TWO_PEER_DOC)
        blob = encode_policy(cfg)
        assert decode_policy(blob) == cfg

    def test_encoded_size_near_450_bytes(self):
        blob = encode_policy(parse_policy(TWO_PEER_DOC))
        assert 450 * 0.7 <= len(blob) <= 450 * 1.3


class TestParsing:
    def test_duplicate_peer(self):
        text = TWO_PEER_DOC.replace('"P2": { "hash": 0xefab', '"P1": { "hash": 0xefab')
        with pytest.raises(DuplicatePeer):
            parse_policy(text)

    def test_duplicate_mapping(self):
        text = TWO_PEER_DOC.replace(
            '"P2": { "gpa": 0x18000000000, "prot": "R" },',
            '"P1": { "gpa": 0x18000000000, "prot": "R" },',
        )
        with pytest.raises(DuplicateMapping):
            parse_policy(text)

    def test_minimal_isolation_document(self):
        cfg = parse_policy('{"Peers": {"Self": "A", "A": {}}}')
        assert cfg.self_id == "A"
        assert cfg.mem_channels == [] and cfg.trans_channels == []

    def test_syntax_error_carries_line(self):
        with pytest.raises(PolicySyntaxError) as err:
            parse_policy('{\n  "Peers": {\n    "Self": oops\n  }\n}')
        assert err.value.line == 3

    def test_empty_range_rejected(self):
        text = TWO_PEER_DOC.replace('"range": ["1", "4"],', '"range": [],')
        with pytest.raises(EmptyRange):
            parse_policy(text)

    def test_unknown_peer_in_mapping(self):
        text = TWO_PEER_DOC.replace('"P2": { "gpa"', '"P9": { "gpa"')
        with pytest.raises(SchemaError):
            parse_policy(text)

    def test_unaligned_gpa_rejected(self):
        text = TWO_PEER_DOC.replace("0x18000000000, \"prot\": \"W\"", "0x18000000001, \"prot\": \"W\"")
        with pytest.raises(SchemaError):
            parse_policy(text)

    def test_size_must_be_granule_multiple(self):
        text = TWO_PEER_DOC.replace('"size": 0x4000000', '"size": 0x4000001')
        with pytest.raises(SchemaError):
            parse_policy(text)

    def test_overlapping_trans_ranges_rejected(self):
        text = TWO_PEER_DOC.replace(
            '"CF2": {\n      "owner": "P1",\n      "type": "call"',
            '"CF2": {\n      "owner": "P2",\n      "type": "exception"',
        ).replace('"range": ["0"],', '"range": ["4"],')
        with pytest.raises(SchemaError):
            parse_policy(text)

    def test_non_gateway_self_cannot_map_unprotected(self):
        text = """
        { "Peers": {"Self": "A", "A": {"is_gateway": false}},
          "MemChannels": {"U": {"size": 0x1000, "type": "UNPROTECTED",
                                "mappings": {"SELF": {"prot": "RW"}}}} }
        """
        with pytest.raises(SchemaError):
            parse_policy(text)

    def test_non_gateway_self_cannot_allow_calls(self):
        text = """
        { "Peers": {"Self": "A", "A": {"is_gateway": false}},
          "TransChannels": {"C": {"owner": "SELF", "type": "call",
                                  "range": [3], "policy": "ALLOW"}} }
        """
        with pytest.raises(SchemaError):
            parse_policy(text)

    def test_non_gateway_self_may_allow_exceptions(self):
        text = """
        { "Peers": {"Self": "A", "A": {"is_gateway": false}},
          "TransChannels": {"C": {"owner": "SELF", "type": "exception",
                                  "range": [3], "policy": "ALLOW"}} }
        """
        cfg = parse_policy(text)
        assert cfg.trans_channels[0].policy is FilterAction.ALLOW

    def test_count_only_on_any(self):
        text = TWO_PEER_DOC.replace(
            '"P2": { "gpa": 0x18000000000, "prot": "R" }',
            '"P2": { "gpa": 0x18000000000, "prot": "R", "count": 3 }',
        )
        with pytest.raises(SchemaError):
            parse_policy(text)


# -- canonical form ----------------------------------------------------------


def test_encoding_ignores_field_order():
    reordered = """
    {
      "TransChannels": {
        "CF2": { "policy": "SCRUB", "range": ["0"], "type": "call", "owner": "P1" },
        "CF1": { "owner": "P2", "policy": "ALLOW", "type": "exception", "range": ["4", "1"] }
      },
      "MemChannels": {
        "Mem1": {
          "mappings": {
            "ANY": { "count": -1, "prot": "RW", "gpa": 0x18000000000 },
            "P2": { "prot": "R", "gpa": 0x18000000000 },
            "P1": { "prot": "W", "gpa": 0x18000000000 }
          },
          "type": "PROTECTED",
          "size": 0x4000000
        }
      },
      "Peers": {
        "P2": { "strict": true, "is_gateway": false, "hash": 0xefab },
        "P1": { "strict": false, "is_gateway": true, "hash": 0xabcd },
        "Self": "P1"
      }
    }
    """
    assert encode_policy(parse_policy(reordered)) == encode_policy(parse_policy(TWO_PEER_DOC))


def test_reencode_after_decode_is_stable():
    blob = encode_policy(parse_policy(TWO_PEER_DOC))
    assert encode_policy(decode_policy(blob)) == blob


# -- hypothesis round-trip ----------------------------------------------------

_ids = st.text(alphabet="ABCDEFGHab012", min_size=1, max_size=8)
_prots = st.sets(st.sampled_from("RWX"), min_size=1).map(frozenset)
_gpas = st.one_of(st.none(), st.integers(min_value=0, max_value=1 << 30).map(lambda v: v * 0x1000))


@st.composite
def _policies(draw):
    locals_ = sorted(draw(st.sets(_ids, min_size=1, max_size=4)))
    self_id = draw(st.sampled_from(locals_))
    peers = [
        PeerSpec(
            lid,
            draw(st.one_of(st.none(), st.binary(min_size=32, max_size=32))),
            draw(st.booleans()) if lid != self_id else True,
            draw(st.booleans()),
        )
        for lid in locals_
    ]
    mem = []
    for i in range(draw(st.integers(0, 3))):
        whos = draw(st.sets(st.sampled_from(locals_ + [SELF, ANY]), min_size=1, max_size=3))
        mappings = tuple(
            MappingSpec(
                who,
                draw(_prots),
                draw(_gpas),
                draw(st.integers(-2, 5)) if who == ANY and draw(st.booleans()) else None,
            )
            for who in sorted(whos)
        )
        mem.append(
            MemChannelSpec(
                f"ch{i}",
                draw(st.integers(1, 64)) * 0x1000,
                draw(st.sampled_from(list(ChannelType))),
                mappings,
            )
        )
    trans = []
    next_id = 0
    for i in range(draw(st.integers(0, 3))):
        ids = draw(st.sets(st.integers(0, 40), min_size=1, max_size=4))
        ids = frozenset(v + next_id for v in ids)
        next_id += 50  # keep same-owner ranges disjoint
        trans.append(
            TransChannelSpec(
                f"cf{i}",
                draw(st.sampled_from(locals_ + [SELF])),
                draw(st.sampled_from(list(TransType))),
                ids,
                draw(st.sampled_from(list(FilterAction))),
            )
        )
    return PolicyConfig(self_id, peers, mem, trans)


@settings(max_examples=120, deadline=None)
@given(_policies())
def test_decode_inverts_encode(cfg):
    blob = encode_policy(cfg)
    assert len(blob) <= 4096
    assert decode_policy(blob) == cfg
    # padding appended by descriptor storage must not change the result
    assert decode_policy(blob + bytes(64)) == cfg


# -- decode error surface ------------------------------------------------------


def test_bad_magic():
    blob = bytearray(encode_policy(parse_policy(TWO_PEER_DOC)))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagic):
        decode_policy(bytes(blob))


def test_bad_version():
    blob = bytearray(encode_policy(parse_policy(TWO_PEER_DOC)))
    blob[8] = 99
    with pytest.raises(BadVersion):
        decode_policy(bytes(blob))


def test_truncation_sweep_every_prefix():
    blob = encode_policy(parse_policy(TWO_PEER_DOC))
    for cut in range(len(blob)):
        prefix = blob[:cut]
        with pytest.raises((BadMagic, TruncatedBlob)):
            decode_policy(prefix)


def test_policy_too_large():
    peers = [PeerSpec("S", None, True, False)] + [
        PeerSpec(f"p{i:03d}") for i in range(90)
    ]
    cfg = PolicyConfig("S", peers)
    with pytest.raises(PolicyTooLarge):
        encode_policy(cfg)


def test_empty_policy_blob_shape():
    blob = empty_policy_blob()
    assert blob.startswith(b"MICAPOL1")
    assert len(blob) < 50


# -- digest --------------------------------------------------------------------


def _sha256_reference(message: bytes) -> bytes:
    """Independent SHA-256, straight from the FIPS 180-4 recurrences."""
    k = [
        0x428A2F98, 0x71374491, 0xB5C0FBCF, 0xE9B5DBA5, 0x3956C25B, 0x59F111F1,
        0x923F82A4, 0xAB1C5ED5, 0xD807AA98, 0x12835B01, 0x243185BE, 0x550C7DC3,
        0x72BE5D74, 0x80DEB1FE, 0x9BDC06A7, 0xC19BF174, 0xE49B69C1, 0xEFBE4786,
        0x0FC19DC6, 0x240CA1CC, 0x2DE92C6F, 0x4A7484AA, 0x5CB0A9DC, 0x76F988DA,
        0x983E5152, 0xA831C66D, 0xB00327C8, 0xBF597FC7, 0xC6E00BF3, 0xD5A79147,
        0x06CA6351, 0x14292967, 0x27B70A85, 0x2E1B2138, 0x4D2C6DFC, 0x53380D13,
        0x650A7354, 0x766A0ABB, 0x81C2C92E, 0x92722C85, 0xA2BFE8A1, 0xA81A664B,
        0xC24B8B70, 0xC76C51A3, 0xD192E819, 0xD6990624, 0xF40E3585, 0x106AA070,
        0x19A4C116, 0x1E376C08, 0x2748774C, 0x34B0BCB5, 0x391C0CB3, 0x4ED8AA4A,
        0x5B9CCA4F, 0x682E6FF3, 0x748F82EE, 0x78A5636F, 0x84C87814, 0x8CC70208,
        0x90BEFFFA, 0xA4506CEB, 0xBEF9A3F7, 0xC67178F2,
    ]
    h = [
        0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A,
        0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19,
    ]
    mask = 0xFFFFFFFF

    def rotr(x, n):
        return ((x >> n) | (x << (32 - n))) & mask

    data = message + b"\x80"
    data += bytes((56 - len(data) % 64) % 64)
    data += (len(message) * 8).to_bytes(8, "big")
    for block_start in range(0, len(data), 64):
        w = list(struct.unpack(">16I", data[block_start : block_start + 64]))
        for t in range(16, 64):
            s0 = rotr(w[t - 15], 7) ^ rotr(w[t - 15], 18) ^ (w[t - 15] >> 3)
            s1 = rotr(w[t - 2], 17) ^ rotr(w[t - 2], 19) ^ (w[t - 2] >> 10)
            w.append((w[t - 16] + s0 + w[t - 7] + s1) & mask)
        a, b, c, d, e, f, g, hh = h
        for t in range(64):
            s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25)
            ch = (e & f) ^ (~e & g)
            t1 = (hh + s1 + ch + k[t] + w[t]) & mask
            s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22)
            maj = (a & b) ^ (a & c) ^ (b & c)
            t2 = (s0 + maj) & mask
            hh, g, f, e, d, c, b, a = g, f, e, (d + t1) & mask, c, b, a, (t1 + t2) & mask
        h = [(x + y) & mask for x, y in zip(h, (a, b, c, d, e, f, g, hh))]
    return b"".join(x.to_bytes(4, "big") for x in h)


def test_digest_of_empty_blob():
    assert policy_digest(b"") == _sha256_reference(b"")


def test_digest_matches_independent_implementation():
    blob = encode_policy(parse_policy(TWO_PEER_DOC))
    assert policy_digest(blob) == _sha256_reference(blob)
    assert policy_digest(blob[:100]) == _sha256_reference(blob[:100])


def test_single_prot_bit_changes_digest():
    cfg = parse_policy(TWO_PEER_DOC)
    flipped = parse_policy(TWO_PEER_DOC.replace('"prot": "R" }', '"prot": "RX" }'))
    assert policy_digest(encode_policy(cfg)) != policy_digest(encode_policy(flipped))
