"""The untrusted host/VMM side of the platform.

Mirrors how a hypervisor drives the monitor: it allocates backing memory,
declares memory slots with an attribute (private, private-shared for
protected channels, or plain shared), performs the per-granule calls, and
relays policy uploads and attestation requests on behalf of realm
userspace.  Slot bookkeeping is host-local; enforcement stays in the
monitor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from .attestation import HmacSigner
from .errors import ScenarioError
from .granules import GRANULE_SIZE
from .monitor import Monitor
from .policy import PolicyConfig, encode_policy, parse_policy
from .realm import EntryKind


class SlotAttribute(Enum):
    PRIVATE = "private"
    PRIVATE_SHARED = "private_shared"
    SHARED = "shared"


@dataclass
class MemorySlot:
    realm: int
    ipa: int
    n_granules: int
    attribute: SlotAttribute
    pas: List[int]
    channel: Optional[str] = None  # exactly one protected channel per private-shared slot


class Host:
    """One untrusted VMM instance driving one monitor."""

    def __init__(
        self,
        monitor: Optional[Monitor] = None,
        num_granules: int = 1024,
        signer_seed: str = "micasim-default",
    ):
        self.mon = monitor or Monitor(
            num_granules=num_granules, signer=HmacSigner.from_seed(signer_seed)
        )
        self.slots: List[MemorySlot] = []
        self._next_pa = 0
        self._regions: Dict[str, List[int]] = {}  # shared backing, keyed by name

    # -- memory ----------------------------------------------------------------

    def alloc(self, n: int) -> List[int]:
        pas = []
        for _ in range(n):
            pa = self._next_pa
            self._next_pa += GRANULE_SIZE
            if pa >= self.mon.space.limit:
                raise ScenarioError("host ran out of physical granules")
            pas.append(pa)
        return pas

    def _region(self, name: str, n: int, delegate: bool) -> List[int]:
        pas = self._regions.get(name)
        if pas is None:
            pas = self.alloc(n)
            if delegate:
                for pa in pas:
                    self.mon.delegate_granule(pa)
            self._regions[name] = pas
        if len(pas) != n:
            raise ScenarioError(f"region {name!r} redeclared with a different size")
        return pas

    # -- realm setup -------------------------------------------------------------

    def new_realm(self, image: bytes, n_private: int, with_pd: bool = True, sgt_granules: int = 1) -> int:
        pas = self.alloc(n_private)
        for pa in pas:
            self.mon.delegate_granule(pa)
        gid = self.mon.create_realm(image, pas)
        from .realm import PRIVATE_IPA_BASE

        self.slots.append(
            MemorySlot(gid, PRIVATE_IPA_BASE, n_private, SlotAttribute.PRIVATE, pas)
        )
        if with_pd:
            (pd,) = self.alloc(1)
            self.mon.delegate_granule(pd)
            self.mon.rmi_realm_pd(gid, pd)
        for _ in range(sgt_granules):
            (sgt,) = self.alloc(1)
            self.mon.delegate_granule(sgt)
            self.mon.rmi_sgt(sgt)
        return gid

    def map_protected_channel(self, gid: int, channel: str, ipa: int, n_granules: int) -> List[int]:
        """Pre-mark and map the shared granules backing one protected channel."""
        pas = self._region(channel, n_granules, delegate=True)
        for i, pa in enumerate(pas):
            self.mon.rmi_data_create_unknown_shared(gid, pa, ipa + i * GRANULE_SIZE)
        self.slots.append(
            MemorySlot(gid, ipa, n_granules, SlotAttribute.PRIVATE_SHARED, pas, channel)
        )
        return pas

    def map_unprotected_region(
        self, gid: int, region: str, ipa: int, n_granules: int, rights=frozenset("RW")
    ) -> List[int]:
        pas = self._region(region, n_granules, delegate=False)
        for i, pa in enumerate(pas):
            self.mon.rmi_map_unprotected(gid, pa, ipa + i * GRANULE_SIZE, frozenset(rights))
        self.slots.append(
            MemorySlot(gid, ipa, n_granules, SlotAttribute.SHARED, pas, region)
        )
        return pas

    def region_pas(self, name: str) -> List[int]:
        return list(self._regions[name])

    # -- guest services ------------------------------------------------------------

    def scratch_ipa(self, gid: int) -> int:
        entries = self.mon.realms[gid].entries_of_kind(EntryKind.PRIVATE)
        if not entries:
            raise ScenarioError(f"realm {gid} has no private memory for scratch use")
        return entries[-1].ipa

    def upload_policy(self, gid: int, policy: Union[str, bytes, PolicyConfig]):
        """Encode, place in guest scratch memory, and issue the upload call."""
        if isinstance(policy, PolicyConfig):
            blob = encode_policy(policy)
        elif isinstance(policy, bytes):
            blob = policy
        else:
            blob = encode_policy(parse_policy(policy))
        scratch = self.scratch_ipa(gid)
        if self.mon.realm_write(gid, scratch, blob) is not True:
            raise ScenarioError(f"realm {gid} cannot stage its policy blob")
        return self.mon.rsi_upload_policy(gid, scratch)

    def fetch_group_token(self, gid: int, nonce: bytes, chunk: int = 1024) -> bytes:
        """Run the init/continue attestation pair and reassemble the token."""
        total = self.mon.rsi_attest_token_init_group(gid, nonce)
        scratch = self.scratch_ipa(gid)
        out = bytearray()
        while True:
            step = min(chunk, GRANULE_SIZE)
            wrote = self.mon.rsi_attest_token_continue_group(gid, scratch, step)
            if wrote == 0:
                break
            out += self.mon.realm_read(gid, scratch, wrote)
        if len(out) != total:
            raise ScenarioError(f"token drain size mismatch: {len(out)} != {total}")
        return bytes(out)


# ---------------------------------------------------------------------------
# Chain topologies, used by the attestation-size table and its tests
# ---------------------------------------------------------------------------

CHAIN_CHANNEL_GPA = 0x2000_0000
CHAIN_LINK_GRANULES = 1


def _chain_doc(index: int, n: int, rims: List[str]) -> str:
    """Feed-forward policy for link ``index`` of an ``n``-realm chain."""
    peers: Dict[str, object] = {"Self": f"N{index}"}
    peers[f"N{index}"] = {"is_gateway": False, "strict": False}
    channels: Dict[str, object] = {}

    def link_gpa(link: int) -> int:
        return CHAIN_CHANNEL_GPA + link * 0x10000

    if index > 0:
        peers[f"N{index - 1}"] = {
            "hash": rims[index - 1],
            "is_gateway": False,
            "strict": False,
        }
        channels[f"L{index - 1}"] = {
            "size": CHAIN_LINK_GRANULES * GRANULE_SIZE,
            "type": "PROTECTED",
            "mappings": {
                f"N{index - 1}": {"gpa": link_gpa(index - 1), "prot": "W"},
                "SELF": {"gpa": link_gpa(index - 1), "prot": "R"},
            },
        }
    if index < n - 1:
        peers[f"N{index + 1}"] = {
            "hash": rims[index + 1],
            "is_gateway": False,
            "strict": False,
        }
        channels[f"L{index}"] = {
            "size": CHAIN_LINK_GRANULES * GRANULE_SIZE,
            "type": "PROTECTED",
            "mappings": {
                "SELF": {"gpa": link_gpa(index), "prot": "W"},
                f"N{index + 1}": {"gpa": link_gpa(index), "prot": "R"},
            },
        }
    return json.dumps({"Peers": peers, "MemChannels": channels, "TransChannels": {}})


def build_chain(n: int, signer_seed: str = "chain") -> Tuple[Host, List[int]]:
    """A committed feed-forward chain of n realms with all links active."""
    host = Host(num_granules=max(64, 16 * n), signer_seed=signer_seed)
    gids = [host.new_realm(f"chain-node-{i}".encode(), 2) for i in range(n)]
    for link in range(n - 1):
        gpa = CHAIN_CHANNEL_GPA + link * 0x10000
        host.map_protected_channel(gids[link], f"L{link}", gpa, CHAIN_LINK_GRANULES)
        host.map_protected_channel(gids[link + 1], f"L{link}", gpa, CHAIN_LINK_GRANULES)
    rims = [host.mon.realms[g].rim.hex() for g in gids]
    for i, gid in enumerate(gids):
        host.upload_policy(gid, _chain_doc(i, n, rims))
    return host, gids


def token_size_table(max_realms: int, signer_seed: str = "chain") -> List[Tuple[int, int]]:
    """(n, token size) for chains of 1..max_realms, nonce held constant."""
    rows = []
    nonce = bytes(range(32))
    for n in range(1, max_realms + 1):
        host, gids = build_chain(n, signer_seed=signer_seed)
        size = host.mon.rsi_attest_token_init_group(gids[0], nonce)
        rows.append((n, size))
    return rows
