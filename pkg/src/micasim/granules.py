"""Simulated physical memory: fixed-size granules with ownership tags.

Each granule carries exactly one tag (the protection-table entry) and real
byte content, so leakage tests can assert on data rather than only on
permissions.  Tag transitions that move a granule across the
protected/unprotected boundary zero the content.

The space itself only knows tags and bytes.  Whether a particular viewer
may touch a granule also depends on realm mapping state, so the
access-check entry points live on the monitor; the helpers here implement
the tag-level part of the rule.
"""

from __future__ import annotations

from enum import Enum
from typing import Dict, Optional

from .errors import AlreadyDelegated, NotDelegated, OutOfRange

GRANULE_SIZE = 4096
DEFAULT_NUM_GRANULES = 1024

ZERO_GRANULE = bytes(GRANULE_SIZE)


class GranuleTag(Enum):
    NORMAL_UNDELEGATED = "normal"
    DELEGATED = "delegated"
    REALM_PRIVATE = "realm_private"
    PROTECTED_SHARED = "protected_shared"
    PD = "pd"
    SGT = "sgt"
    UNPROTECTED = "unprotected"


# Tags on the unprotected side of the boundary: content visible to the host.
HOST_VISIBLE_TAGS = frozenset({GranuleTag.NORMAL_UNDELEGATED, GranuleTag.UNPROTECTED})


class Fault:
    """Access-denied sentinel returned by read/write paths (not raised)."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "FAULT"

    def __bool__(self) -> bool:
        return False


FAULT = Fault()


class Host:
    """Viewer id for the untrusted host/VMM."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "HOST"


HOST = Host()


class GranuleSpace:
    """All simulated physical memory of one platform instance.

    Content is stored sparsely: granules absent from the content map read
    as all zeros.  This keeps platform snapshots cheap for the flow oracle.
    """

    def __init__(self, num_granules: int = DEFAULT_NUM_GRANULES):
        if num_granules < 1:
            raise ValueError("need at least one granule")
        self.num_granules = num_granules
        self._tags = [GranuleTag.NORMAL_UNDELEGATED] * num_granules
        self._content: Dict[int, bytes] = {}

    @property
    def limit(self) -> int:
        return self.num_granules * GRANULE_SIZE

    def index(self, pa: int) -> int:
        if pa % GRANULE_SIZE != 0:
            raise OutOfRange(f"pa {pa:#x} is not granule-aligned")
        if not 0 <= pa < self.limit:
            raise OutOfRange(f"pa {pa:#x} outside [0, {self.limit:#x})")
        return pa // GRANULE_SIZE

    def all_pas(self):
        return range(0, self.limit, GRANULE_SIZE)

    # -- tags ---------------------------------------------------------------

    def tag(self, pa: int) -> GranuleTag:
        return self._tags[self.index(pa)]

    def set_tag(self, pa: int, tag: GranuleTag) -> None:
        """Retag, zeroing whenever the protected/unprotected boundary is crossed."""
        i = self.index(pa)
        old = self._tags[i]
        if (old in HOST_VISIBLE_TAGS) != (tag in HOST_VISIBLE_TAGS):
            self._content.pop(i, None)
        self._tags[i] = tag

    def tag_counts(self) -> Dict[GranuleTag, int]:
        counts = {tag: 0 for tag in GranuleTag}
        for tag in self._tags:
            counts[tag] += 1
        return counts

    # -- delegation ---------------------------------------------------------

    def delegate(self, pa: int) -> None:
        i = self.index(pa)
        if self._tags[i] is not GranuleTag.NORMAL_UNDELEGATED:
            raise AlreadyDelegated(f"pa {pa:#x} is {self._tags[i].value}")
        self._content.pop(i, None)
        self._tags[i] = GranuleTag.DELEGATED

    def undelegate(self, pa: int) -> None:
        i = self.index(pa)
        if self._tags[i] is not GranuleTag.DELEGATED:
            raise NotDelegated(f"pa {pa:#x} is {self._tags[i].value}")
        self._content.pop(i, None)
        self._tags[i] = GranuleTag.NORMAL_UNDELEGATED

    # -- raw content (no permission checks) ----------------------------------

    def read_raw(self, pa: int, offset: int = 0, size: Optional[int] = None) -> bytes:
        i = self.index(pa)
        data = self._content.get(i, ZERO_GRANULE)
        if size is None:
            size = GRANULE_SIZE - offset
        if offset < 0 or size < 0 or offset + size > GRANULE_SIZE:
            raise OutOfRange("read crosses granule boundary")
        return data[offset : offset + size]

    def write_raw(self, pa: int, data: bytes, offset: int = 0) -> None:
        i = self.index(pa)
        if offset < 0 or offset + len(data) > GRANULE_SIZE:
            raise OutOfRange("write crosses granule boundary")
        current = bytearray(self._content.get(i, ZERO_GRANULE))
        current[offset : offset + len(data)] = data
        if current == ZERO_GRANULE:
            self._content.pop(i, None)
        else:
            self._content[i] = bytes(current)

    def zero(self, pa: int) -> None:
        self._content.pop(self.index(pa), None)

    def is_zero(self, pa: int) -> bool:
        return self.index(pa) not in self._content

    def content_snapshot(self) -> Dict[int, bytes]:
        """Current nonzero contents keyed by pa; cheap, values are immutable."""
        return {i * GRANULE_SIZE: data for i, data in self._content.items()}
