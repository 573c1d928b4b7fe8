"""Shared fixtures: the reference two-peer policy document and platform builders."""

import pytest

from micasim.granules import GRANULE_SIZE
from micasim.monitor import Monitor
from micasim.policy import encode_policy, parse_policy
from micasim.realm import PRIVATE_IPA_BASE, EntryKind

# The canonical two-peer example document, kept byte-for-byte as it ships
# in the project docs: hex literals, trailing commas, and a missing comma
# after the "type" lines, all of which the tolerant reader must accept.
TWO_PEER_DOC = """\
{
  "Peers": {
    "Self": "P1",
    "P1": { "hash": 0xabcd, "is_gateway": true, "strict": false},
    "P2": { "hash": 0xefab, "is_gateway": false, "strict": true},
  },
  "MemChannels": {
    "Mem1": {
      "size": 0x4000000,
      "type": "PROTECTED",
      "mappings": {
        "P1": { "gpa": 0x18000000000, "prot": "W" },
        "P2": { "gpa": 0x18000000000, "prot": "R" },
        "ANY": { "gpa": 0x18000000000, "prot": "RW", "count": -1 },
      }
    },
  },
  "TransChannels": {
    "CF1": {
      "owner": "P2",
      "type": "exception"
      "range": ["1", "4"],
      "policy": "ALLOW"
    },
    "CF2": {
      "owner": "P1",
      "type": "call"
      "range": ["0"],
      "policy": "SCRUB"
    },
  }
}
"""

MEM1_GPA = 0x18000000000
MEM1_SIZE = 0x4000000


class PlatformHarness:
    """Low-level helper around a Monitor for direct call-surface tests."""

    def __init__(self, num_granules=256):
        self.mon = Monitor(num_granules=num_granules)
        self._next = 0

    def alloc(self, n=1):
        """Fresh normal-world granule addresses, never handed out twice."""
        pas = []
        for _ in range(n):
            pa = self._next * GRANULE_SIZE
            self._next += 1
            if pa >= self.mon.space.limit:
                raise RuntimeError("harness out of granules")
            pas.append(pa)
        return pas if n > 1 else pas[0]

    def delegated(self, n=1):
        pas = self.alloc(n) if n > 1 else [self.alloc()]
        for pa in pas:
            self.mon.delegate_granule(pa)
        return pas if n > 1 else pas[0]

    def realm(self, image=b"", n_private=2, with_pd=True, sgt_granules=1):
        gid = self.mon.create_realm(image, self.delegated(n_private))
        if with_pd:
            self.mon.rmi_realm_pd(gid, self.delegated())
        for _ in range(sgt_granules):
            self.mon.rmi_sgt(self.delegated())
        return gid

    def share(self, pas, *realm_ipas):
        """Map the same granules into several realms: (gid, base_ipa) pairs."""
        for gid, base in realm_ipas:
            for i, pa in enumerate(pas):
                self.mon.rmi_data_create_unknown_shared(gid, pa, base + i * GRANULE_SIZE)

    def upload(self, gid, text):
        """Write an encoded policy into realm scratch space and upload it."""
        blob = text if isinstance(text, bytes) else encode_policy(parse_policy(text))
        scratch = scratch_ipa(self.mon, gid)
        assert self.mon.realm_write(gid, scratch, blob) is True
        return self.mon.rsi_upload_policy(gid, scratch)


@pytest.fixture
def harness():
    return PlatformHarness()


def scratch_ipa(mon, gid):
    """Last private granule of a realm, used as upload/attest scratch."""
    entries = mon.realms[gid].entries_of_kind(EntryKind.PRIVATE)
    return entries[-1].ipa


def rim_hex(mon, gid):
    return mon.realms[gid].rim.hex()


def two_peer_doc(self_id, rim_p1, rim_p2, size=None):
    """The reference document with real measurements and an optional size."""
    text = (
        TWO_PEER_DOC.replace('"Self": "P1"', f'"Self": "{self_id}"')
        .replace("0xabcd", f'"{rim_p1}"')
        .replace("0xefab", f'"{rim_p2}"')
    )
    if size is not None:
        text = text.replace("0x4000000", hex(size))
    return text


def build_two_peer_pair(size_granules=2, num_granules=256):
    """Two realms sharing Mem1 granules, policies not yet uploaded.

    Returns (harness, gid_a, gid_b, doc_a, doc_b, channel_pas).
    """
    h = PlatformHarness(num_granules)
    a = h.realm(image=b"peer-one")
    b = h.realm(image=b"peer-two")
    pas = h.delegated(size_granules) if size_granules > 1 else [h.delegated()]
    h.share(pas, (a, MEM1_GPA), (b, MEM1_GPA))
    size = size_granules * GRANULE_SIZE
    doc_a = two_peer_doc("P1", rim_hex(h.mon, a), rim_hex(h.mon, b), size=size)
    doc_b = two_peer_doc("P2", rim_hex(h.mon, a), rim_hex(h.mon, b), size=size)
    return h, a, b, doc_a, doc_b, pas
