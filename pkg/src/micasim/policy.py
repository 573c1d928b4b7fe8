"""Tenant policy documents: text form, canonical binary form, digest.

The text form is JSON shaped like the documents tenants embed in their
guest images: a ``Peers`` object with a ``Self`` designation, a
``MemChannels`` object and a ``TransChannels`` object.  Real policy files
in the wild carry hex integer literals, trailing commas and the odd
missing comma, so the reader is deliberately tolerant of those while
still reporting the first hard violation with a line number.

The binary form (magic ``MICAPOL1``) is canonical: a deterministic
function of the semantic content only, independent of key order in the
text.  docs/policy-binary.md describes the exact byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from . import digest as dg
from .errors import (
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
from .granules import GRANULE_SIZE

MAGIC = b"MICAPOL1"
VERSION = 1
PD_BUDGET = 4096

SELF = "SELF"
ANY = "ANY"

_ID_WIDTH = 16
_NAME_WIDTH = 32

_RIGHT_BITS = {"R": 1, "W": 2, "X": 4}
RIGHTS_ORDER = "RWX"


def parse_prot(text: str) -> frozenset:
    """A prot string is any subset of "RWX" in that letter order."""
    seen = []
    for ch in text:
        if ch not in _RIGHT_BITS or ch in seen:
            raise ValueError(f"bad prot string {text!r}")
        seen.append(ch)
    if "".join(sorted(seen, key=RIGHTS_ORDER.index)) != text:
        raise ValueError(f"prot letters out of order in {text!r}")
    if not seen:
        raise ValueError("empty prot")
    return frozenset(seen)


def format_prot(rights: frozenset) -> str:
    return "".join(ch for ch in RIGHTS_ORDER if ch in rights)


def prot_to_mask(rights: frozenset) -> int:
    return sum(_RIGHT_BITS[ch] for ch in rights)


def mask_to_prot(mask: int) -> frozenset:
    if mask & ~7:
        raise SchemaError("prot", f"bad rights mask {mask:#x}")
    return frozenset(ch for ch, bit in _RIGHT_BITS.items() if mask & bit)


class ChannelType(Enum):
    PROTECTED = "PROTECTED"
    UNPROTECTED = "UNPROTECTED"


class TransType(Enum):
    CALL = "call"
    EXCEPTION = "exception"


class FilterAction(Enum):
    ALLOW = "ALLOW"
    SCRUB = "SCRUB"
    BLOCK = "BLOCK"


# The platform preemption event: always scrubbed, never blocked, so a
# policy cannot let a realm hog a core by silencing it.
FORCED_SCRUB_EVENT = (TransType.EXCEPTION, 0)


@dataclass(frozen=True)
class PeerSpec:
    local_id: str
    expected_rim: Optional[bytes] = None
    is_gateway: bool = False
    strict: bool = False


@dataclass(frozen=True)
class MappingSpec:
    who: str  # local id, SELF, or ANY
    prot: frozenset
    gpa: Optional[int] = None
    count: Optional[int] = None  # ANY only; negative means unlimited


@dataclass(frozen=True)
class MemChannelSpec:
    name: str
    size: int
    type: ChannelType
    mappings: Tuple[MappingSpec, ...]

    @property
    def n_granules(self) -> int:
        return self.size // GRANULE_SIZE

    def mapping_for(self, who: str) -> Optional[MappingSpec]:
        for m in self.mappings:
            if m.who == who:
                return m
        return None

    @property
    def any_mapping(self) -> Optional[MappingSpec]:
        return self.mapping_for(ANY)


@dataclass(frozen=True)
class TransChannelSpec:
    name: str
    owner: str  # local id or SELF
    type: TransType
    range: frozenset  # event ids
    policy: FilterAction


@dataclass
class PolicyConfig:
    self_id: str
    peers: List[PeerSpec] = field(default_factory=list)
    mem_channels: List[MemChannelSpec] = field(default_factory=list)
    trans_channels: List[TransChannelSpec] = field(default_factory=list)

    def peer(self, local_id: str) -> Optional[PeerSpec]:
        for p in self.peers:
            if p.local_id == local_id:
                return p
        return None

    @property
    def self_peer(self) -> PeerSpec:
        p = self.peer(self.self_id)
        assert p is not None
        return p

    def channel(self, name: str) -> Optional[MemChannelSpec]:
        for ch in self.mem_channels:
            if ch.name == name:
                return ch
        return None

    def is_self(self, who: str) -> bool:
        return who == SELF or who == self.self_id

    def self_mapping(self, ch: MemChannelSpec) -> Optional[MappingSpec]:
        for m in ch.mappings:
            if self.is_self(m.who):
                return m
        return None

    def participating_channels(self) -> List[MemChannelSpec]:
        return [ch for ch in self.mem_channels if self.self_mapping(ch) is not None]

    def trans_for(self, kind: TransType, event_id: int) -> Optional[TransChannelSpec]:
        """The self-owned control-flow spec covering (kind, id), if any."""
        for tc in self.trans_channels:
            if self.is_self(tc.owner) and tc.type is kind and event_id in tc.range:
                return tc
        return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyConfig):
            return NotImplemented
        return (
            self.self_id == other.self_id
            and sorted(self.peers, key=lambda p: p.local_id)
            == sorted(other.peers, key=lambda p: p.local_id)
            and sorted(self.mem_channels, key=lambda c: c.name)
            == sorted(other.mem_channels, key=lambda c: c.name)
            and sorted(self.trans_channels, key=lambda c: c.name)
            == sorted(other.trans_channels, key=lambda c: c.name)
        )


# ---------------------------------------------------------------------------
# Tolerant JSON reader
# ---------------------------------------------------------------------------
#
# Accepts standard JSON plus: 0x-prefixed hex integers, trailing commas,
# and missing commas between members/elements.  Objects are returned as
# lists of (key, value, line) so duplicate keys survive for detection.


class _Token:
    __slots__ = ("kind", "value", "line")

    def __init__(self, kind, value, line):
        self.kind = kind
        self.value = value
        self.line = line


def _tokenize(text: str):
    tokens = []
    i, line, n = 0, 1, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            i += 1
        elif ch in " \t\r":
            i += 1
        elif ch in "{}[]:,":
            tokens.append(_Token(ch, ch, line))
            i += 1
        elif ch == '"':
            j = i + 1
            buf = []
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    if j + 1 >= n:
                        raise PolicySyntaxError("unterminated escape", line)
                    esc = text[j + 1]
                    mapped = {'"': '"', "\\": "\\", "/": "/", "n": "\n", "t": "\t", "r": "\r"}.get(esc)
                    if mapped is None:
                        raise PolicySyntaxError(f"unsupported escape \\{esc}", line)
                    buf.append(mapped)
                    j += 2
                elif text[j] == "\n":
                    raise PolicySyntaxError("newline in string", line)
                else:
                    buf.append(text[j])
                    j += 1
            if j >= n:
                raise PolicySyntaxError("unterminated string", line)
            tokens.append(_Token("string", "".join(buf), line))
            i = j + 1
        elif ch.isdigit() or ch == "-":
            j = i + 1 if ch == "-" else i
            if text[j : j + 2].lower() == "0x":
                k = j + 2
                while k < n and text[k] in "0123456789abcdefABCDEF":
                    k += 1
                if k == j + 2:
                    raise PolicySyntaxError("bad hex literal", line)
                value = int(text[j + 2 : k], 16)
            else:
                k = j
                while k < n and text[k].isdigit():
                    k += 1
                if k == j:
                    raise PolicySyntaxError("bad number", line)
                value = int(text[j:k])
            if ch == "-":
                value = -value
            tokens.append(_Token("number", value, line))
            i = k
        elif ch.isalpha():
            k = i
            while k < n and text[k].isalpha():
                k += 1
            word = text[i:k]
            if word in ("true", "false"):
                tokens.append(_Token("bool", word == "true", line))
            elif word == "null":
                tokens.append(_Token("null", None, line))
            else:
                raise PolicySyntaxError(f"unexpected word {word!r}", line)
            i = k
        else:
            raise PolicySyntaxError(f"unexpected character {ch!r}", line)
    tokens.append(_Token("eof", None, line))
    return tokens


class _Reader:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind) -> _Token:
        tok = self.next()
        if tok.kind != kind:
            raise PolicySyntaxError(f"expected {kind!r}, found {tok.kind!r}", tok.line)
        return tok

    def value(self):
        tok = self.peek()
        if tok.kind == "{":
            return self.object()
        if tok.kind == "[":
            return self.array()
        if tok.kind in ("string", "number", "bool", "null"):
            return self.next().value
        raise PolicySyntaxError(f"unexpected token {tok.kind!r}", tok.line)

    def object(self):
        self.expect("{")
        pairs = []
        while True:
            tok = self.peek()
            if tok.kind == "}":
                self.next()
                return pairs
            if tok.kind == ",":  # stray or trailing comma
                self.next()
                continue
            key = self.expect("string")
            self.expect(":")
            pairs.append((key.value, self.value(), key.line))

    def array(self):
        self.expect("[")
        items = []
        while True:
            tok = self.peek()
            if tok.kind == "]":
                self.next()
                return items
            if tok.kind == ",":
                self.next()
                continue
            items.append(self.value())


def _read_document(text: str):
    reader = _Reader(_tokenize(text))
    tok = reader.peek()
    if tok.kind != "{":
        raise PolicySyntaxError("policy document must be an object", tok.line)
    doc = reader.object()
    tail = reader.peek()
    if tail.kind != "eof":
        raise PolicySyntaxError("trailing content after document", tail.line)
    return doc


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


def _as_pairs(value, path):
    if not isinstance(value, list) or (value and not isinstance(value[0], tuple)):
        raise SchemaError(path, "expected an object")
    return value


def _pairs_to_dict(pairs, path):
    out = {}
    for key, value, _line in pairs:
        if key in out:
            raise SchemaError(path, f"duplicate key {key!r}")
        out[key] = value
    return out


def _expected_rim(value, path) -> bytes:
    """Full 32-byte value; short ints/hex strings are zero-extended abbreviations."""
    if isinstance(value, bool):
        raise SchemaError(path, "hash must be an integer or hex string")
    if isinstance(value, int):
        if value < 0:
            raise SchemaError(path, "hash must be non-negative")
        number = value
    elif isinstance(value, str):
        text = value[2:] if value.lower().startswith("0x") else value
        try:
            number = int(text, 16)
        except ValueError:
            raise SchemaError(path, f"hash is not hex: {value!r}") from None
    else:
        raise SchemaError(path, "hash must be an integer or hex string")
    try:
        return number.to_bytes(dg.DIGEST_SIZE, "big")
    except OverflowError:
        raise SchemaError(path, "hash wider than 32 bytes") from None


def _check_id(text, path, width=_ID_WIDTH):
    if not isinstance(text, str) or not text:
        raise SchemaError(path, "identifier must be a non-empty string")
    encoded = text.encode("utf-8")
    if len(encoded) > width or b"\x00" in encoded:
        raise SchemaError(path, f"identifier {text!r} too long (max {width} bytes)")
    return text


def _parse_peers(pairs) -> Tuple[str, List[PeerSpec]]:
    self_id = None
    peers: List[PeerSpec] = []
    seen = set()
    for key, value, _line in pairs:
        if key == "Self":
            if self_id is not None:
                raise SchemaError("Peers.Self", "Self named more than once")
            if not isinstance(value, str):
                raise SchemaError("Peers.Self", "Self must name a peer id")
            self_id = value
            continue
        _check_id(key, f"Peers.{key}")
        if key in (SELF, ANY):
            raise SchemaError(f"Peers.{key}", "reserved identifier")
        if key in seen:
            raise DuplicatePeer(f"peer {key!r} declared twice")
        seen.add(key)
        fields = _pairs_to_dict(_as_pairs(value, f"Peers.{key}"), f"Peers.{key}")
        rim = None
        if "hash" in fields and fields["hash"] is not None:
            rim = _expected_rim(fields["hash"], f"Peers.{key}.hash")
        is_gateway = fields.get("is_gateway", False)
        strict = fields.get("strict", False)
        if not isinstance(is_gateway, bool) or not isinstance(strict, bool):
            raise SchemaError(f"Peers.{key}", "is_gateway/strict must be booleans")
        unknown = set(fields) - {"hash", "is_gateway", "strict"}
        if unknown:
            raise SchemaError(f"Peers.{key}", f"unknown fields {sorted(unknown)}")
        peers.append(PeerSpec(key, rim, is_gateway, strict))
    if self_id is None:
        raise SchemaError("Peers", "no Self designation")
    if not any(p.local_id == self_id for p in peers):
        raise SchemaError("Peers.Self", f"Self names undeclared peer {self_id!r}")
    return self_id, peers


def _parse_gpa(value, path) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise SchemaError(path, "gpa must be a non-negative integer")
    if value % GRANULE_SIZE != 0:
        raise SchemaError(path, f"gpa {value:#x} not granule-aligned")
    return value


def _parse_mem_channel(name, value, peer_ids) -> MemChannelSpec:
    path = f"MemChannels.{name}"
    _check_id(name, path, width=_NAME_WIDTH)
    fields = _pairs_to_dict(_as_pairs(value, path), path)
    size = fields.get("size")
    if isinstance(size, bool) or not isinstance(size, int) or size <= 0:
        raise SchemaError(f"{path}.size", "size must be a positive integer")
    if size % GRANULE_SIZE != 0 or size < GRANULE_SIZE:
        raise SchemaError(f"{path}.size", "size must be a positive multiple of the granule size")
    type_text = fields.get("type")
    if not isinstance(type_text, str) or type_text.upper() not in ("PROTECTED", "UNPROTECTED"):
        raise SchemaError(f"{path}.type", "type must be PROTECTED or UNPROTECTED")
    ch_type = ChannelType[type_text.upper()]

    mappings: List[MappingSpec] = []
    seen = set()
    raw = fields.get("mappings")
    if raw is None:
        raise SchemaError(f"{path}.mappings", "missing mappings")
    for who, entry, _line in _as_pairs(raw, f"{path}.mappings"):
        mpath = f"{path}.mappings.{who}"
        if who != SELF and who != ANY:
            _check_id(who, mpath)
            if who not in peer_ids:
                raise SchemaError(mpath, f"unknown peer {who!r}")
        if who in seen:
            raise DuplicateMapping(f"{mpath}: mapping declared twice")
        seen.add(who)
        entry_fields = _pairs_to_dict(_as_pairs(entry, mpath), mpath)
        prot_text = entry_fields.get("prot")
        if not isinstance(prot_text, str):
            raise SchemaError(f"{mpath}.prot", "prot must be a string")
        try:
            prot = parse_prot(prot_text)
        except ValueError as exc:
            raise SchemaError(f"{mpath}.prot", str(exc)) from None
        gpa = None
        if entry_fields.get("gpa") is not None:
            gpa = _parse_gpa(entry_fields["gpa"], f"{mpath}.gpa")
        count = None
        if "count" in entry_fields:
            if who != ANY:
                raise SchemaError(f"{mpath}.count", "count is only valid on ANY mappings")
            count = entry_fields["count"]
            if isinstance(count, bool) or not isinstance(count, int):
                raise SchemaError(f"{mpath}.count", "count must be an integer")
        unknown = set(entry_fields) - {"prot", "gpa", "count"}
        if unknown:
            raise SchemaError(mpath, f"unknown fields {sorted(unknown)}")
        mappings.append(MappingSpec(who, prot, gpa, count))
    unknown = set(fields) - {"size", "type", "mappings"}
    if unknown:
        raise SchemaError(path, f"unknown fields {sorted(unknown)}")
    # canonical mapping order, matching the binary form
    return MemChannelSpec(name, size, ch_type, tuple(sorted(mappings, key=lambda m: m.who)))


def _parse_trans_channel(name, value, peer_ids) -> TransChannelSpec:
    path = f"TransChannels.{name}"
    _check_id(name, path, width=_NAME_WIDTH)
    fields = _pairs_to_dict(_as_pairs(value, path), path)
    owner = fields.get("owner")
    if owner != SELF:
        _check_id(owner, f"{path}.owner")
        if owner not in peer_ids:
            raise SchemaError(f"{path}.owner", f"unknown peer {owner!r}")
    type_text = fields.get("type")
    if not isinstance(type_text, str) or type_text.lower() not in ("call", "exception"):
        raise SchemaError(f"{path}.type", "type must be call or exception")
    action_text = fields.get("policy")
    if not isinstance(action_text, str) or action_text.upper() not in ("ALLOW", "SCRUB", "BLOCK"):
        raise SchemaError(f"{path}.policy", "policy must be allow, scrub, or block")
    raw_range = fields.get("range")
    if not isinstance(raw_range, list) or (raw_range and isinstance(raw_range[0], tuple)):
        raise SchemaError(f"{path}.range", "range must be a list of event ids")
    ids = set()
    for item in raw_range:
        if isinstance(item, str):
            try:
                item = int(item, 0)
            except ValueError:
                raise SchemaError(f"{path}.range", f"bad event id {item!r}") from None
        if isinstance(item, bool) or not isinstance(item, int) or item < 0:
            raise SchemaError(f"{path}.range", "event ids must be non-negative integers")
        ids.add(item)
    if not ids:
        raise EmptyRange(f"{path}.range is empty")
    unknown = set(fields) - {"owner", "type", "range", "policy"}
    if unknown:
        raise SchemaError(path, f"unknown fields {sorted(unknown)}")
    return TransChannelSpec(
        name, owner, TransType[type_text.upper()], frozenset(ids), FilterAction[action_text.upper()]
    )


def _check_config(cfg: PolicyConfig) -> None:
    """Structural invariants that span sections."""
    by_owner_type: Dict[Tuple[str, TransType], set] = {}
    for tc in cfg.trans_channels:
        owner = cfg.self_id if tc.owner == SELF else tc.owner
        key = (owner, tc.type)
        prior = by_owner_type.setdefault(key, set())
        if prior & tc.range:
            raise SchemaError(
                f"TransChannels.{tc.name}.range",
                f"overlaps another {tc.type.value} policy for owner {owner!r}",
            )
        prior |= tc.range

    if not cfg.self_peer.is_gateway:
        for ch in cfg.mem_channels:
            if ch.type is ChannelType.UNPROTECTED and cfg.self_mapping(ch) is not None:
                raise SchemaError(
                    f"MemChannels.{ch.name}",
                    "non-gateway Self cannot map an unprotected channel",
                )
        for tc in cfg.trans_channels:
            if (
                cfg.is_self(tc.owner)
                and tc.type is TransType.CALL
                and tc.policy is FilterAction.ALLOW
            ):
                raise SchemaError(
                    f"TransChannels.{tc.name}",
                    "non-gateway Self cannot allow host calls",
                )


def parse_policy(text: Union[str, bytes]) -> PolicyConfig:
    """Parse a policy document, or raise the first violation found."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PolicySyntaxError(f"not UTF-8: {exc}", 0) from None
    doc = _pairs_to_dict(_read_document(text), "$")
    unknown = set(doc) - {"Peers", "MemChannels", "TransChannels"}
    if unknown:
        raise SchemaError("$", f"unknown sections {sorted(unknown)}")
    if "Peers" not in doc:
        raise SchemaError("$", "missing Peers section")
    self_id, peers = _parse_peers(_as_pairs(doc["Peers"], "Peers"))
    peer_ids = {p.local_id for p in peers}

    mem_channels: List[MemChannelSpec] = []
    names = set()
    for name, value, _line in _as_pairs(doc.get("MemChannels", []), "MemChannels"):
        if name in names:
            raise SchemaError(f"MemChannels.{name}", "duplicate channel name")
        names.add(name)
        mem_channels.append(_parse_mem_channel(name, value, peer_ids))

    trans_channels: List[TransChannelSpec] = []
    tnames = set()
    for name, value, _line in _as_pairs(doc.get("TransChannels", []), "TransChannels"):
        if name in tnames:
            raise SchemaError(f"TransChannels.{name}", "duplicate channel name")
        tnames.add(name)
        trans_channels.append(_parse_trans_channel(name, value, peer_ids))

    cfg = PolicyConfig(self_id, peers, mem_channels, trans_channels)
    _check_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Canonical binary codec
# ---------------------------------------------------------------------------


def _pack_fixed(text: str, width: int) -> bytes:
    encoded = text.encode("utf-8")
    return encoded + bytes(width - len(encoded))


def _unpack_fixed(raw: bytes) -> str:
    return raw.rstrip(b"\x00").decode("utf-8")


def _encode_sections(cfg: PolicyConfig) -> List[bytes]:
    peers = bytearray()
    peers += _pack_fixed(cfg.self_id, _ID_WIDTH)
    peers += struct.pack("<H", len(cfg.peers))
    for p in sorted(cfg.peers, key=lambda p: p.local_id):
        flags = (p.is_gateway << 0) | (p.strict << 1) | ((p.expected_rim is not None) << 2)
        peers += _pack_fixed(p.local_id, _ID_WIDTH)
        peers += struct.pack("<B", flags)
        peers += p.expected_rim if p.expected_rim is not None else dg.ZERO_DIGEST

    mem = bytearray()
    mem += struct.pack("<H", len(cfg.mem_channels))
    for ch in sorted(cfg.mem_channels, key=lambda c: c.name):
        mem += _pack_fixed(ch.name, _NAME_WIDTH)
        mem += struct.pack("<QB", ch.size, 0 if ch.type is ChannelType.PROTECTED else 1)
        mem += struct.pack("<H", len(ch.mappings))
        for m in sorted(ch.mappings, key=lambda m: m.who):
            flags = ((m.gpa is not None) << 0) | ((m.count is not None) << 1)
            mem += _pack_fixed(m.who, _ID_WIDTH)
            mem += struct.pack("<BQB", flags, m.gpa or 0, prot_to_mask(m.prot))
            mem += struct.pack("<q", m.count if m.count is not None else 0)

    trans = bytearray()
    trans += struct.pack("<H", len(cfg.trans_channels))
    for tc in sorted(cfg.trans_channels, key=lambda c: c.name):
        trans += _pack_fixed(tc.name, _NAME_WIDTH)
        trans += _pack_fixed(tc.owner, _ID_WIDTH)
        trans += struct.pack(
            "<BB",
            0 if tc.type is TransType.CALL else 1,
            {FilterAction.ALLOW: 0, FilterAction.SCRUB: 1, FilterAction.BLOCK: 2}[tc.policy],
        )
        ids = sorted(tc.range)
        trans += struct.pack("<H", len(ids))
        for event_id in ids:
            trans += struct.pack("<Q", event_id)

    return [bytes(peers), bytes(mem), bytes(trans)]


def encode_policy(cfg: PolicyConfig) -> bytes:
    """Canonical blob; byte-identical for semantically equal documents."""
    out = bytearray(MAGIC)
    out += struct.pack("<B", VERSION)
    for body in _encode_sections(cfg):
        out += struct.pack("<I", len(body))
        out += body
    if len(out) > PD_BUDGET:
        raise PolicyTooLarge(f"encoded policy is {len(out)} bytes (budget {PD_BUDGET})")
    return bytes(out)


def empty_policy_blob() -> bytes:
    """The placeholder written into a fresh policy-descriptor granule."""
    out = bytearray(MAGIC)
    out += struct.pack("<B", VERSION)
    bodies = [_pack_fixed("", _ID_WIDTH) + struct.pack("<H", 0), struct.pack("<H", 0), struct.pack("<H", 0)]
    for body in bodies:
        out += struct.pack("<I", len(body))
        out += body
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedBlob(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]


def decode_policy(blob: bytes) -> PolicyConfig:
    """Inverse of encode_policy.  Trailing bytes (PD padding) are ignored."""
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagic("blob does not start with the policy magic")
    cur = _Cursor(blob)
    cur.take(len(MAGIC))
    version = cur.u8()
    if version != VERSION:
        raise BadVersion(f"unsupported policy version {version}")

    sections = []
    for _ in range(3):
        length = cur.u32()
        sections.append(_Cursor(cur.take(length)))

    peers_cur, mem_cur, trans_cur = sections
    self_id = _unpack_fixed(peers_cur.take(_ID_WIDTH))
    peers = []
    for _ in range(peers_cur.u16()):
        local_id = _unpack_fixed(peers_cur.take(_ID_WIDTH))
        flags = peers_cur.u8()
        rim = peers_cur.take(dg.DIGEST_SIZE)
        peers.append(
            PeerSpec(local_id, rim if flags & 4 else None, bool(flags & 1), bool(flags & 2))
        )

    mem_channels = []
    for _ in range(mem_cur.u16()):
        name = _unpack_fixed(mem_cur.take(_NAME_WIDTH))
        size = mem_cur.u64()
        type_byte = mem_cur.u8()
        if type_byte not in (0, 1):
            raise SchemaError(f"blob.{name}", f"bad channel type byte {type_byte}")
        mappings = []
        for _ in range(mem_cur.u16()):
            who = _unpack_fixed(mem_cur.take(_ID_WIDTH))
            flags = mem_cur.u8()
            gpa = mem_cur.u64()
            prot = mask_to_prot(mem_cur.u8())
            count = mem_cur.i64()
            mappings.append(
                MappingSpec(
                    who,
                    prot,
                    gpa if flags & 1 else None,
                    count if flags & 2 else None,
                )
            )
        mem_channels.append(
            MemChannelSpec(
                name, size, ChannelType.PROTECTED if type_byte == 0 else ChannelType.UNPROTECTED, tuple(mappings)
            )
        )

    trans_channels = []
    for _ in range(trans_cur.u16()):
        name = _unpack_fixed(trans_cur.take(_NAME_WIDTH))
        owner = _unpack_fixed(trans_cur.take(_ID_WIDTH))
        type_byte = trans_cur.u8()
        action_byte = trans_cur.u8()
        if type_byte not in (0, 1) or action_byte not in (0, 1, 2):
            raise SchemaError(f"blob.{name}", "bad trans channel bytes")
        ids = frozenset(trans_cur.u64() for _ in range(trans_cur.u16()))
        trans_channels.append(
            TransChannelSpec(
                name,
                owner,
                TransType.CALL if type_byte == 0 else TransType.EXCEPTION,
                ids,
                [FilterAction.ALLOW, FilterAction.SCRUB, FilterAction.BLOCK][action_byte],
            )
        )

    cfg = PolicyConfig(self_id, peers, mem_channels, trans_channels)
    _validate_decoded(cfg)
    return cfg


def _validate_decoded(cfg: PolicyConfig) -> None:
    """Re-check the structural invariants on a decoded blob.

    A realm hands the monitor a raw blob, so the text-parser checks cannot
    be assumed to have run.
    """
    if not cfg.self_id or cfg.peer(cfg.self_id) is None:
        raise SchemaError("Peers.Self", "blob names no valid Self peer")
    seen = set()
    for p in cfg.peers:
        _check_id(p.local_id, f"Peers.{p.local_id}")
        if p.local_id in (SELF, ANY):
            raise SchemaError(f"Peers.{p.local_id}", "reserved identifier")
        if p.local_id in seen:
            raise DuplicatePeer(f"peer {p.local_id!r} declared twice")
        seen.add(p.local_id)
    peer_ids = seen
    names = set()
    for ch in cfg.mem_channels:
        path = f"MemChannels.{ch.name}"
        _check_id(ch.name, path, width=_NAME_WIDTH)
        if ch.name in names:
            raise SchemaError(path, "duplicate channel name")
        names.add(ch.name)
        if ch.size < GRANULE_SIZE or ch.size % GRANULE_SIZE != 0:
            raise SchemaError(f"{path}.size", "size must be a positive multiple of the granule size")
        whos = set()
        for m in ch.mappings:
            mpath = f"{path}.mappings.{m.who}"
            if m.who not in (SELF, ANY) and m.who not in peer_ids:
                raise SchemaError(mpath, f"unknown peer {m.who!r}")
            if m.who in whos:
                raise DuplicateMapping(f"{mpath}: mapping declared twice")
            whos.add(m.who)
            if not m.prot:
                raise SchemaError(f"{mpath}.prot", "empty prot")
            if m.gpa is not None and (m.gpa < 0 or m.gpa % GRANULE_SIZE != 0):
                raise SchemaError(f"{mpath}.gpa", "gpa not granule-aligned")
            if m.count is not None and m.who != ANY:
                raise SchemaError(f"{mpath}.count", "count is only valid on ANY mappings")
    tnames = set()
    for tc in cfg.trans_channels:
        path = f"TransChannels.{tc.name}"
        _check_id(tc.name, path, width=_NAME_WIDTH)
        if tc.name in tnames:
            raise SchemaError(path, "duplicate channel name")
        tnames.add(tc.name)
        if tc.owner != SELF and tc.owner not in peer_ids:
            raise SchemaError(f"{path}.owner", f"unknown peer {tc.owner!r}")
        if not tc.range:
            raise EmptyRange(f"{path}.range is empty")
        for event_id in tc.range:
            if event_id < 0:
                raise SchemaError(f"{path}.range", "event ids must be non-negative")
    _check_config(cfg)


def policy_digest(blob: bytes) -> bytes:
    """Platform digest of a canonical policy blob."""
    return dg.digest(blob)
