"""Platform tokens, group tokens, and their verifier.

A group token covers the connected component of the initiating realm
under active channels: one record per member, each holding the member's
platform token, its committed policy blob, and activity flags for every
channel its policy declares.  All members of one group receive
byte-identical token bodies for the same nonce; only the initiator field
in the header differs.

Signing is pluggable.  The default test backend is a deterministic keyed
digest (HMAC-SHA256) so scenarios replay bit-exactly; the Signer protocol
leaves room for real asymmetric platform keys.  docs/token-binary.md
documents the byte layout (magic ``MICAGRP1``).
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Tuple

from . import digest as dg
from .errors import (
    BadMagic,
    BadSignature,
    BadVersion,
    DigestMismatch,
    InconsistentActivity,
    NonceMismatch,
    TruncatedBlob,
)
from .policy import ChannelType, decode_policy, policy_digest

TOKEN_MAGIC = b"MICAGRP1"
TOKEN_VERSION = 1

_NAME_WIDTH = 32


class Signer(Protocol):
    algorithm: str

    def sign(self, data: bytes) -> bytes: ...

    def verify(self, data: bytes, signature: bytes) -> bool: ...


class HmacSigner:
    """Deterministic keyed-digest backend for tests and scenarios."""

    algorithm = "hmac-sha256"

    def __init__(self, key: bytes):
        self.key = key

    @classmethod
    def from_seed(cls, seed: str) -> "HmacSigner":
        return cls(hashlib.sha256(b"micasim-signer:" + seed.encode("utf-8")).digest())

    def sign(self, data: bytes) -> bytes:
        return hmac.new(self.key, data, hashlib.sha256).digest()

    def verify(self, data: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(data), signature)


def _pack_str16(text: str) -> bytes:
    encoded = text.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded


def _pack_name(text: str) -> bytes:
    encoded = text.encode("utf-8")
    return encoded + bytes(_NAME_WIDTH - len(encoded))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedBlob(f"token truncated at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str16(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def blob16(self) -> bytes:
        return self.take(self.u16())

    def name(self) -> str:
        return self.take(_NAME_WIDTH).rstrip(b"\x00").decode("utf-8")


# ---------------------------------------------------------------------------
# Platform token
# ---------------------------------------------------------------------------


@dataclass
class PlatformToken:
    gid: int
    rim: bytes
    rem: bytes
    platform_id: str
    nonce: bytes
    signature: bytes = b""

    def signed_body(self) -> bytes:
        return (
            struct.pack("<Q", self.gid)
            + self.rim
            + self.rem
            + _pack_str16(self.platform_id)
            + self.nonce
        )

    def serialize(self) -> bytes:
        return self.signed_body() + struct.pack("<H", len(self.signature)) + self.signature


def make_platform_token(signer: Signer, gid, rim, rem, platform_id, nonce) -> PlatformToken:
    token = PlatformToken(gid, rim, rem, platform_id, nonce)
    token.signature = signer.sign(token.signed_body())
    return token


def _parse_platform_token(data: bytes) -> PlatformToken:
    cur = _Cursor(data)
    gid = cur.u64()
    rim = cur.take(32)
    rem = cur.take(32)
    platform_id = cur.str16()
    nonce = cur.take(32)
    signature = cur.blob16()
    return PlatformToken(gid, rim, rem, platform_id, nonce, signature)


# ---------------------------------------------------------------------------
# Group token
# ---------------------------------------------------------------------------


@dataclass
class GroupRecord:
    gid: int
    platform_token: PlatformToken
    rem_before_commit: Optional[bytes]  # None when no policy committed
    policy_blob: Optional[bytes]
    channel_flags: List[Tuple[str, bool]]

    def serialize(self) -> bytes:
        pt = self.platform_token.serialize()
        out = struct.pack("<Q", self.gid)
        out += struct.pack("<H", len(pt)) + pt
        if self.policy_blob is not None:
            out += b"\x01" + self.rem_before_commit
            out += struct.pack("<I", len(self.policy_blob)) + self.policy_blob
        else:
            out += b"\x00"
        out += struct.pack("<H", len(self.channel_flags))
        for name, active in self.channel_flags:
            out += _pack_name(name) + (b"\x01" if active else b"\x00")
        return out


def _channel_flags(mon, rd) -> List[Tuple[str, bool]]:
    """Activity flags for every channel the realm's policy declares.

    Flags are a property of the channel, not of the declaring record, so
    tracking-only declarations carry the same value as the participant's.
    """
    flags: List[Tuple[str, bool]] = []
    for ch in sorted(rd.policy.mem_channels, key=lambda c: c.name):
        if ch.type is ChannelType.UNPROTECTED:
            # live once any committed realm holds the guest side; the host
            # side always exists
            active = any(
                peer.live
                and peer.policy is not None
                and (peer_ch := peer.policy.channel(ch.name)) is not None
                and peer_ch.type is ChannelType.UNPROTECTED
                and peer.policy.self_mapping(peer_ch) is not None
                for peer in mon.realms.values()
            )
            flags.append((ch.name, active))
            continue
        pas = rd.channel_pas.get(ch.name)
        if pas is not None:
            rt = mon.find_runtime(ch.name, set(pas))
            flags.append((ch.name, bool(rt and rt.active)))
        else:
            matches = [rt for rt in mon.channels if rt.name == ch.name]
            flags.append((ch.name, matches[0].active if len(matches) == 1 else False))
    return flags


def build_group_token(mon, initiator_gid: int, nonce: bytes) -> bytes:
    """Serialize the group attestation for the initiator's component."""
    members = mon.group_members(initiator_gid)
    records = []
    for gid in members:
        rd = mon.realms[gid]
        pt = make_platform_token(
            mon.signer, gid, rd.rim, rd.rem, mon.platform_id, nonce
        )
        records.append(
            GroupRecord(
                gid=gid,
                platform_token=pt,
                rem_before_commit=rd.rem_before_commit if rd.policy_blob else None,
                policy_blob=rd.policy_blob,
                channel_flags=_channel_flags(mon, rd) if rd.policy else [],
            )
        )
    record_bytes = b"".join(r.serialize() for r in records)
    group_digest = dg.digest(record_bytes)
    signature = mon.signer.sign(group_digest)

    out = bytearray(TOKEN_MAGIC)
    out += struct.pack("<B", TOKEN_VERSION)
    out += struct.pack("<Q", initiator_gid)
    out += nonce
    out += struct.pack("<H", len(records))
    out += record_bytes
    out += group_digest
    out += struct.pack("<H", len(signature)) + signature
    return bytes(out)


# Offset of the order-independent body: magic + version + initiator field.
TOKEN_BODY_OFFSET = len(TOKEN_MAGIC) + 1 + 8


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------


@dataclass
class VerifiedPeer:
    gid: int
    rim: bytes
    rem: bytes
    policy_self: Optional[str]
    is_gateway: bool
    channels: List[Tuple[str, bool]]


@dataclass
class ChannelReport:
    name: str
    active: bool
    peers: List[int]  # gids whose policies participate in the channel


@dataclass
class VerifiedGroup:
    initiator: int
    nonce: bytes
    peers: List[VerifiedPeer]
    channels: List[ChannelReport]

    def to_report(self) -> dict:
        return {
            "initiator": self.initiator,
            "nonce": self.nonce.hex(),
            "peers": [
                {
                    "gid": p.gid,
                    "rim": p.rim.hex(),
                    "rem": p.rem.hex(),
                    "self": p.policy_self,
                    "is_gateway": p.is_gateway,
                    "channels": [{"name": n, "active": a} for n, a in p.channels],
                }
                for p in self.peers
            ],
            "channels": [
                {"name": c.name, "active": c.active, "peers": c.peers}
                for c in self.channels
            ],
        }


def verify_group_token(token: bytes, anchor: Signer, expected_nonce: bytes) -> VerifiedGroup:
    """Check signatures, digests, freshness and flag consistency."""
    if len(token) < len(TOKEN_MAGIC) or token[: len(TOKEN_MAGIC)] != TOKEN_MAGIC:
        raise BadMagic("not a group token")
    cur = _Cursor(token)
    cur.take(len(TOKEN_MAGIC))
    version = cur.u8()
    if version != TOKEN_VERSION:
        raise BadVersion(f"unsupported token version {version}")
    initiator = cur.u64()
    nonce = cur.take(32)
    count = cur.u16()
    records_start = cur.pos

    peers: List[VerifiedPeer] = []
    raw_records: List[Tuple[int, Optional[bytes], Optional[bytes], List[Tuple[str, bool]], PlatformToken]] = []
    for _ in range(count):
        gid = cur.u64()
        pt = _parse_platform_token(cur.blob16())
        has_policy = cur.u8()
        rem_before = None
        blob = None
        if has_policy:
            rem_before = cur.take(32)
            blob = cur.take(cur.u32())
        flags = []
        for _ in range(cur.u16()):
            name = cur.name()
            flags.append((name, bool(cur.u8())))
        raw_records.append((gid, rem_before, blob, flags, pt))
    records_end = cur.pos
    group_digest = cur.take(32)
    signature = cur.blob16()

    if not anchor.verify(group_digest, signature):
        raise BadSignature("group signature does not verify")
    if dg.digest(token[records_start:records_end]) != group_digest:
        raise DigestMismatch("group digest does not cover the records")
    if nonce != expected_nonce:
        raise NonceMismatch("token nonce differs from the expected nonce")

    flag_by_name = {}
    channel_peers = {}
    for gid, rem_before, blob, flags, pt in raw_records:
        if not anchor.verify(pt.signed_body(), pt.signature):
            raise BadSignature(f"platform token of realm {gid} does not verify")
        if pt.nonce != expected_nonce:
            raise NonceMismatch(f"platform token of realm {gid} has a stale nonce")
        if pt.gid != gid:
            raise DigestMismatch(f"record and platform token disagree on realm id {gid}")
        policy_self = None
        is_gateway = False
        if blob is not None:
            if dg.extend_chain(rem_before, policy_digest(blob)) != pt.rem:
                raise DigestMismatch(
                    f"realm {gid}: measurement does not extend to the policy digest"
                )
            cfg = decode_policy(blob)
            policy_self = cfg.self_id
            is_gateway = cfg.self_peer.is_gateway
            for ch in cfg.mem_channels:
                if cfg.self_mapping(ch) is not None:
                    channel_peers.setdefault(ch.name, set()).add(gid)
        for name, active in flags:
            if flag_by_name.setdefault(name, active) != active:
                raise InconsistentActivity(
                    f"channel {name!r} flagged both active and inactive"
                )
        peers.append(VerifiedPeer(gid, pt.rim, pt.rem, policy_self, is_gateway, flags))

    channels = [
        ChannelReport(name, flag_by_name[name], sorted(channel_peers.get(name, set())))
        for name in sorted(flag_by_name)
    ]
    return VerifiedGroup(initiator, nonce, peers, channels)
