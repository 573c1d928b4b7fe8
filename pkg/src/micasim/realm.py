"""Per-realm state: lifecycle, stage-2 mappings, measurements.

A realm descriptor is pure bookkeeping; every transition is driven by the
monitor.  The stage-2 table maps granule-aligned guest addresses to
physical granules with an entry kind and the rights granted so far.
Rights on protected-shared entries start empty and are only raised when
the realm's policy commits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from . import digest as dg
from .granules import GRANULE_SIZE
from .policy import PolicyConfig

# Guest-physical base at which private image memory is mapped.
PRIVATE_IPA_BASE = 0x4000_0000

PRIVATE_RIGHTS = frozenset({"R", "W", "X"})


class RealmState(Enum):
    NEW = "new"
    ACTIVE = "active"
    LOCKED_DOWN = "locked_down"
    POLICY_COMMITTED = "policy_committed"
    TERMINATED = "terminated"


class EntryKind(Enum):
    PRIVATE = "private"
    PROTECTED_SHARED = "protected_shared"
    UNPROTECTED = "unprotected"


@dataclass
class RttEntry:
    ipa: int
    pa: int
    rights: frozenset
    kind: EntryKind


@dataclass
class RealmDescriptor:
    gid: int
    state: RealmState = RealmState.NEW
    rim: bytes = dg.ZERO_DIGEST
    rem: bytes = dg.ZERO_DIGEST
    pd: Optional[int] = None
    policy: Optional[PolicyConfig] = None
    policy_blob: Optional[bytes] = None
    rem_before_commit: Optional[bytes] = None
    rtt: Dict[int, RttEntry] = field(default_factory=dict)
    # pa -> guest addresses mapping it, kept in sync with rtt
    pa_index: Dict[int, List[int]] = field(default_factory=dict)
    # channel name -> backing pas in guest-address order, set at commit
    channel_pas: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def live(self) -> bool:
        return self.state is not RealmState.TERMINATED

    @property
    def frozen(self) -> bool:
        """Host mutations of the stage-2 table are refused in these states."""
        return self.state in (RealmState.LOCKED_DOWN, RealmState.POLICY_COMMITTED)

    def map(self, entry: RttEntry) -> None:
        self.rtt[entry.ipa] = entry
        self.pa_index.setdefault(entry.pa, []).append(entry.ipa)

    def unmap(self, ipa: int) -> None:
        entry = self.rtt.pop(ipa)
        ipas = self.pa_index[entry.pa]
        ipas.remove(ipa)
        if not ipas:
            del self.pa_index[entry.pa]

    def clear_rtt(self) -> None:
        self.rtt.clear()
        self.pa_index.clear()

    def entry_at(self, ipa: int) -> Optional[RttEntry]:
        return self.rtt.get(ipa)

    def entries_for_pa(self, pa: int) -> List[RttEntry]:
        return [self.rtt[ipa] for ipa in sorted(self.pa_index.get(pa, ()))]

    def entry_for_pa(self, pa: int) -> Optional[RttEntry]:
        entries = self.entries_for_pa(pa)
        return entries[0] if entries else None

    def maps_pa(self, pa: int) -> bool:
        return bool(self.pa_index.get(pa))

    def entries_of_kind(self, kind: EntryKind) -> List[RttEntry]:
        return sorted(
            (e for e in self.rtt.values() if e.kind is kind), key=lambda e: e.ipa
        )

    def translate(self, ipa: int) -> Optional[RttEntry]:
        """Entry covering an arbitrary (possibly unaligned) guest address."""
        return self.rtt.get(ipa - ipa % GRANULE_SIZE)
