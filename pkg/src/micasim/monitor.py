"""The platform monitor: realm lifecycle, the call surface, enforcement.

One Monitor instance is one platform.  All entry points run under a single
logical serialization (plain Python calls on one object), so a call
sequence fully determines the final state and the event log.

Call logging: every management call and every filtered host transition is
appended to a structured log (one record per call) which scenario golden
files serialize as line-delimited JSON.  Events delivered to the host are
additionally mirrored in ``host_events``; blocked transitions never appear
there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple, Union

from . import attestation
from . import digest as dg
from .errors import (
    AliasedInRealm,
    AnyExhausted,
    BadBlob,
    GranuleNotDelegated,
    ImageTooLarge,
    InUse,
    IpaOccupied,
    LockedDown,
    MonitorCallError,
    NoPd,
    NoStagedToken,
    NotDelegated,
    OutOfRange,
    PdAlreadySet,
    PolicyError,
    PolicyRefused,
    RealmTerminated,
    RightsExceedAny,
    SecondUpload,
    SgtFull,
    UnknownRealm,
)
from .granules import (
    FAULT,
    GRANULE_SIZE,
    HOST,
    HOST_VISIBLE_TAGS,
    Fault,
    GranuleSpace,
    GranuleTag,
    Host,
)
from .policy import (
    FilterAction,
    PolicyConfig,
    TransType,
    decode_policy,
    empty_policy_blob,
    policy_digest,
    FORCED_SCRUB_EVENT,
)
from .realm import (
    PRIVATE_IPA_BASE,
    PRIVATE_RIGHTS,
    EntryKind,
    RealmDescriptor,
    RealmState,
    RttEntry,
)
from .validation import validate_policy

# Shared-granule-table geometry: 8-byte granule address plus four fixed
# 26-byte mapper entries per row.
SGT_ROW_SIZE = 112
SGT_ROWS_PER_GRANULE = GRANULE_SIZE // SGT_ROW_SIZE  # 36
SGT_MAX_MAPPERS = 4

PLATFORM_ID = "micasim.cca.sim.v1"

Viewer = Union[Host, int]


@dataclass
class SgtEntry:
    gid: int
    ipa: int
    granted: frozenset = frozenset()
    validated: bool = False


@dataclass
class SgtRow:
    pa: int
    channel: Optional[str] = None
    entries: List[SgtEntry] = field(default_factory=list)

    def entry(self, gid: int) -> Optional[SgtEntry]:
        for e in self.entries:
            if e.gid == gid:
                return e
        return None


@dataclass
class ChannelRuntime:
    name: str
    pas: List[int]
    size: int
    anchor_gid: int
    any_prot: Optional[frozenset] = None
    any_remaining: Optional[int] = None  # negative: unlimited
    any_joined: Set[int] = field(default_factory=set)
    live_validated: Set[int] = field(default_factory=set)
    active: bool = False

    @property
    def pa_set(self) -> Set[int]:
        return set(self.pas)


@dataclass
class ExitEvent:
    realm: int
    kind: TransType
    event_id: int
    payload: Tuple[int, ...] = ()


@dataclass
class FilterVerdict:
    action: FilterAction
    delivered: Optional[Tuple[int, ...]]  # None iff blocked


def _jsonable(value):
    if isinstance(value, bytes):
        if len(value) <= 48:
            return value.hex()
        return f"sha256:{dg.digest(value).hex()[:16]}/len={len(value)}"
    if isinstance(value, frozenset):
        return "".join(sorted(value))
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Host):
        return "host"
    return value


class EventLog:
    def __init__(self):
        self.records: List[dict] = []

    def emit(self, call: str, realm: Optional[int] = None, result="ok", **args) -> None:
        self.records.append(
            {
                "seq": len(self.records),
                "call": call,
                "realm": realm,
                "args": {k: _jsonable(v) for k, v in sorted(args.items())},
                "result": _jsonable(result),
            }
        )

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records) + "\n"


class Monitor:
    """The trusted platform firmware of one simulated machine."""

    def __init__(
        self,
        num_granules: int = 1024,
        signer: Optional[attestation.Signer] = None,
        platform_id: str = PLATFORM_ID,
    ):
        self.space = GranuleSpace(num_granules)
        self.realms: Dict[int, RealmDescriptor] = {}
        self.sgt_rows: Dict[int, SgtRow] = {}
        self.sgt_granules: List[int] = []
        self.channels: List[ChannelRuntime] = []
        self.signer = signer or attestation.HmacSigner.from_seed("micasim-default")
        self.platform_id = platform_id
        self.log = EventLog()
        self.host_events: List[dict] = []
        self._next_gid = 1
        self._staged: Dict[int, Tuple[bytes, int]] = {}

    # -- helpers -------------------------------------------------------------

    def _realm(self, gid: int) -> RealmDescriptor:
        rd = self.realms.get(gid)
        if rd is None:
            raise UnknownRealm(f"no realm {gid}")
        return rd

    def _live_realm(self, gid: int) -> RealmDescriptor:
        rd = self._realm(gid)
        if not rd.live:
            raise RealmTerminated(f"realm {gid} is terminated")
        return rd

    def live_realms(self) -> List[RealmDescriptor]:
        return [rd for rd in self.realms.values() if rd.live]

    def sgt_row_capacity(self) -> int:
        return SGT_ROWS_PER_GRANULE * len(self.sgt_granules)

    def runtime_for_pa(self, pa: int) -> Optional[ChannelRuntime]:
        for rt in self.channels:
            if pa in rt.pa_set:
                return rt
        return None

    def find_runtime(self, name: str, pa_set: Set[int]) -> Optional[ChannelRuntime]:
        for rt in self.channels:
            if rt.name == name and rt.pa_set == pa_set:
                return rt
        return None

    def channel_active(self, name: str) -> bool:
        return any(rt.active for rt in self.channels if rt.name == name)

    def active_channels(self) -> Set[str]:
        return {rt.name for rt in self.channels if rt.active}

    # -- granule ownership -----------------------------------------------------

    def delegate_granule(self, pa: int) -> None:
        self.space.delegate(pa)
        self.log.emit("rmi_granule_delegate", pa=pa)

    def undelegate_granule(self, pa: int) -> None:
        tag = self.space.tag(pa)
        if tag in (
            GranuleTag.REALM_PRIVATE,
            GranuleTag.PROTECTED_SHARED,
            GranuleTag.PD,
            GranuleTag.SGT,
        ):
            raise InUse(f"pa {pa:#x} holds realm state ({tag.value})")
        if tag is GranuleTag.UNPROTECTED:
            if any(rd.maps_pa(pa) for rd in self.live_realms()):
                raise InUse(f"pa {pa:#x} is mapped by a live realm")
            raise NotDelegated(f"pa {pa:#x} is {tag.value}")
        self.space.undelegate(pa)
        self.log.emit("rmi_granule_undelegate", pa=pa)

    # -- permission-checked access ----------------------------------------------

    def _realm_rights(self, rd: RealmDescriptor, entry: RttEntry) -> frozenset:
        if entry.kind is EntryKind.PRIVATE:
            return PRIVATE_RIGHTS
        if entry.kind is EntryKind.UNPROTECTED:
            return entry.rights
        row = self.sgt_rows.get(entry.pa)
        e = row.entry(rd.gid) if row else None
        if e is None or not e.validated:
            return frozenset()
        rt = self.runtime_for_pa(entry.pa)
        if rt is None or not rt.active:
            return frozenset()
        return e.granted

    def read_as(self, pa: int, viewer: Viewer) -> Union[bytes, Fault]:
        """Whole-granule read through the protection checks."""
        if isinstance(viewer, Host):
            if self.space.tag(pa) in HOST_VISIBLE_TAGS:
                return self.space.read_raw(pa)
            return FAULT
        rd = self._realm(viewer)
        if not rd.live:
            return FAULT
        if not any("R" in self._realm_rights(rd, e) for e in rd.entries_for_pa(pa)):
            return FAULT
        return self.space.read_raw(pa)

    def write_as(self, pa: int, viewer: Viewer, data: bytes, offset: int = 0):
        if isinstance(viewer, Host):
            if self.space.tag(pa) in HOST_VISIBLE_TAGS:
                self.space.write_raw(pa, data, offset)
                return True
            return FAULT
        rd = self._realm(viewer)
        if not rd.live:
            return FAULT
        if not any("W" in self._realm_rights(rd, e) for e in rd.entries_for_pa(pa)):
            return FAULT
        self.space.write_raw(pa, data, offset)
        return True

    def realm_read(self, gid: int, ipa: int, size: int = GRANULE_SIZE):
        """Guest-address read; faults on unmapped or right-less addresses."""
        rd = self._realm(gid)
        if not rd.live:
            return FAULT
        entry = rd.translate(ipa)
        if entry is None or "R" not in self._realm_rights(rd, entry):
            return FAULT
        return self.space.read_raw(entry.pa, ipa - entry.ipa, size)

    def realm_write(self, gid: int, ipa: int, data: bytes):
        rd = self._realm(gid)
        if not rd.live:
            return FAULT
        entry = rd.translate(ipa)
        if entry is None or "W" not in self._realm_rights(rd, entry):
            return FAULT
        self.space.write_raw(entry.pa, data, ipa - entry.ipa)
        return True

    def host_read(self, pa: int):
        return self.read_as(pa, HOST)

    def host_write(self, pa: int, data: bytes, offset: int = 0):
        return self.write_as(pa, HOST, data, offset)

    # -- realm lifecycle ---------------------------------------------------------

    def create_realm(self, image: bytes, private_granules: List[int]) -> int:
        for pa in private_granules:
            if self.space.tag(pa) is not GranuleTag.DELEGATED:
                raise GranuleNotDelegated(f"pa {pa:#x} is {self.space.tag(pa).value}")
        capacity = len(private_granules) * GRANULE_SIZE
        if len(image) > capacity:
            raise ImageTooLarge(f"image is {len(image)} bytes, capacity {capacity}")
        gid = self._next_gid
        self._next_gid += 1
        rd = RealmDescriptor(
            gid=gid,
            state=RealmState.ACTIVE,
            rim=dg.initial_measurement(image, len(private_granules), PRIVATE_IPA_BASE),
        )
        for i, pa in enumerate(private_granules):
            ipa = PRIVATE_IPA_BASE + i * GRANULE_SIZE
            self.space.set_tag(pa, GranuleTag.REALM_PRIVATE)
            chunk = image[i * GRANULE_SIZE : (i + 1) * GRANULE_SIZE]
            if chunk:
                self.space.write_raw(pa, chunk)
            rd.map(RttEntry(ipa, pa, PRIVATE_RIGHTS, EntryKind.PRIVATE))
        self.realms[gid] = rd
        self.log.emit(
            "rmi_realm_create",
            realm=gid,
            granules=len(private_granules),
            rim=rd.rim,
        )
        return gid

    def extend_rem(self, gid: int, value: bytes) -> None:
        rd = self._live_realm(gid)
        rd.rem = dg.extend_chain(rd.rem, value)
        self.log.emit("rsi_measurement_extend", realm=gid, value=value)

    def terminate_realm(self, gid: int) -> None:
        rd = self._realm(gid)
        if not rd.live:
            return
        for entry in sorted(rd.rtt.values(), key=lambda e: e.ipa):
            if entry.kind is EntryKind.PRIVATE:
                self.space.set_tag(entry.pa, GranuleTag.NORMAL_UNDELEGATED)
            elif entry.kind is EntryKind.PROTECTED_SHARED:
                row = self.sgt_rows.get(entry.pa)
                if row is not None:
                    row.entries = [e for e in row.entries if e.gid != gid]
                    if not row.entries:
                        del self.sgt_rows[entry.pa]
                        self.space.zero(entry.pa)
                        self.space.set_tag(entry.pa, GranuleTag.DELEGATED)
        rd.clear_rtt()
        if rd.pd is not None:
            self.space.set_tag(rd.pd, GranuleTag.NORMAL_UNDELEGATED)
            rd.pd = None
        for rt in self.channels:
            rt.any_joined.discard(gid)
        rd.state = RealmState.TERMINATED
        self._staged.pop(gid, None)
        self._recompute_activation()
        self.log.emit("realm_terminate", realm=gid)

    # -- channel plumbing RMIs ------------------------------------------------------

    def rmi_realm_pd(self, gid: int, pa: int) -> None:
        rd = self._live_realm(gid)
        if rd.frozen:
            raise LockedDown(f"realm {gid} is locked down")
        if rd.pd is not None:
            raise PdAlreadySet(f"realm {gid} already has a policy descriptor")
        if self.space.tag(pa) is not GranuleTag.DELEGATED:
            raise GranuleNotDelegated(f"pa {pa:#x} is {self.space.tag(pa).value}")
        self.space.set_tag(pa, GranuleTag.PD)
        self.space.write_raw(pa, empty_policy_blob())
        rd.pd = pa
        self.log.emit("rmi_realm_pd", realm=gid, pa=pa)

    def rmi_sgt(self, pa: int) -> None:
        if self.space.tag(pa) is not GranuleTag.DELEGATED:
            raise GranuleNotDelegated(f"pa {pa:#x} is {self.space.tag(pa).value}")
        self.space.set_tag(pa, GranuleTag.SGT)
        self.sgt_granules.append(pa)
        self.log.emit("rmi_sgt", pa=pa, capacity=self.sgt_row_capacity())

    def rmi_data_create_unknown_shared(self, gid: int, pa: int, ipa: int) -> None:
        rd = self._live_realm(gid)
        if rd.frozen:
            raise LockedDown(f"realm {gid} is locked down")
        if ipa % GRANULE_SIZE != 0:
            raise OutOfRange(f"ipa {ipa:#x} is not granule-aligned")
        if ipa in rd.rtt:
            raise IpaOccupied(f"ipa {ipa:#x} already mapped in realm {gid}")
        tag = self.space.tag(pa)
        if tag is GranuleTag.DELEGATED:
            if len(self.sgt_rows) >= self.sgt_row_capacity():
                raise SgtFull(
                    f"{len(self.sgt_rows)} rows, capacity {self.sgt_row_capacity()}"
                )
            self.space.set_tag(pa, GranuleTag.PROTECTED_SHARED)
            self.sgt_rows[pa] = SgtRow(pa=pa)
        elif tag is not GranuleTag.PROTECTED_SHARED:
            raise GranuleNotDelegated(f"pa {pa:#x} is {tag.value}")
        row = self.sgt_rows[pa]
        if rd.maps_pa(pa) or row.entry(gid) is not None:
            raise AliasedInRealm(f"pa {pa:#x} already mapped once in realm {gid}")
        if len(row.entries) >= SGT_MAX_MAPPERS:
            raise SgtFull(f"pa {pa:#x} already has {SGT_MAX_MAPPERS} mappers")
        row.entries.append(SgtEntry(gid=gid, ipa=ipa))
        rd.map(RttEntry(ipa, pa, frozenset(), EntryKind.PROTECTED_SHARED))
        self.log.emit("rmi_data_create_unknown_shared", realm=gid, pa=pa, ipa=ipa)

    def rmi_map_unprotected(self, gid: int, pa: int, ipa: int, rights: frozenset) -> None:
        rd = self._live_realm(gid)
        if rd.frozen:
            raise LockedDown(f"realm {gid} is locked down")
        if ipa % GRANULE_SIZE != 0:
            raise OutOfRange(f"ipa {ipa:#x} is not granule-aligned")
        if ipa in rd.rtt:
            raise IpaOccupied(f"ipa {ipa:#x} already mapped in realm {gid}")
        tag = self.space.tag(pa)
        if tag not in (GranuleTag.NORMAL_UNDELEGATED, GranuleTag.UNPROTECTED):
            raise GranuleNotDelegated(f"pa {pa:#x} is {tag.value}, not host memory")
        if not rights:
            raise OutOfRange("unprotected mapping needs at least one right")
        self.space.set_tag(pa, GranuleTag.UNPROTECTED)
        rd.map(RttEntry(ipa, pa, frozenset(rights), EntryKind.UNPROTECTED))
        self.log.emit(
            "rmi_map_unprotected", realm=gid, pa=pa, ipa=ipa, rights=frozenset(rights)
        )

    # -- policy upload ------------------------------------------------------------

    def _read_private_span(self, rd: RealmDescriptor, ipa: int, size: int) -> Optional[bytes]:
        out = bytearray()
        cursor = ipa
        while len(out) < size:
            entry = rd.translate(cursor)
            if entry is None or entry.kind is not EntryKind.PRIVATE:
                return bytes(out) if out else None
            offset = cursor - entry.ipa
            take = min(GRANULE_SIZE - offset, size - len(out))
            out += self.space.read_raw(entry.pa, offset, take)
            cursor += take
        return bytes(out)

    def _write_private_span(self, rd: RealmDescriptor, ipa: int, data: bytes) -> bool:
        cursor = ipa
        pos = 0
        while pos < len(data):
            entry = rd.translate(cursor)
            if entry is None or entry.kind is not EntryKind.PRIVATE:
                return False
            offset = cursor - entry.ipa
            take = min(GRANULE_SIZE - offset, len(data) - pos)
            self.space.write_raw(entry.pa, data[pos : pos + take], offset)
            cursor += take
            pos += take
        return True

    def rsi_upload_policy(self, gid: int, blob_ipa: int):
        rd = self._realm(gid)
        if not rd.live:
            raise RealmTerminated(f"realm {gid} is terminated")
        if rd.state is RealmState.POLICY_COMMITTED:
            raise SecondUpload(f"realm {gid} already committed a policy")
        if rd.state is not RealmState.ACTIVE:
            raise MonitorCallError(f"realm {gid} is {rd.state.value}")
        if rd.pd is None:
            raise NoPd(f"realm {gid} has no policy descriptor")

        rd.state = RealmState.LOCKED_DOWN
        self.log.emit("rsi_upload_policy", realm=gid, blob_ipa=blob_ipa, result="locked_down")

        from .policy import PD_BUDGET

        blob = self._read_private_span(rd, blob_ipa, PD_BUDGET)
        if blob is None:
            self.terminate_realm(gid)
            raise BadBlob(f"blob address {blob_ipa:#x} is not in private memory")
        self.space.zero(rd.pd)
        self.space.write_raw(rd.pd, blob[:GRANULE_SIZE])
        try:
            cfg = decode_policy(blob)
        except PolicyError as exc:
            self.terminate_realm(gid)
            raise BadBlob(f"undecodable policy blob: {exc}") from exc

        report = validate_policy(self, rd, cfg)
        if not report.ok:
            self.log.emit("policy_validation", realm=gid, result=report.summary())
            self.terminate_realm(gid)
            raise PolicyRefused(report)

        blob = blob[: _blob_length(blob)]
        self._commit_policy(rd, cfg, blob, report)
        self.log.emit(
            "policy_validation",
            realm=gid,
            result="committed",
            activates=sorted(report.will_activate),
        )
        return report

    def _commit_policy(self, rd, cfg, blob, report) -> None:
        rd.rem_before_commit = rd.rem
        rd.rem = dg.extend_chain(rd.rem, policy_digest(blob))
        rd.policy = cfg
        rd.policy_blob = blob
        rd.state = RealmState.POLICY_COMMITTED

        for ipa in report.unmap_unprotected:
            rd.unmap(ipa)
        for ipa, rights in report.covered_unprotected.items():
            rd.rtt[ipa].rights = rights

        for name, binding in sorted(report.bindings.items()):
            ch = cfg.channel(name)
            rt = self.find_runtime(name, set(binding.pas))
            if rt is None:
                any_m = ch.any_mapping
                rt = ChannelRuntime(
                    name=name,
                    pas=list(binding.pas),
                    size=ch.size,
                    anchor_gid=rd.gid,
                    any_prot=any_m.prot if any_m else None,
                    any_remaining=(
                        any_m.count if any_m and any_m.count is not None else (-1 if any_m else None)
                    ),
                )
                self.channels.append(rt)
            rd.channel_pas[name] = list(binding.pas)
            admitted = report.admitted.get(name, False)
            for pa in binding.pas:
                row = self.sgt_rows[pa]
                row.channel = name
                entry = row.entry(rd.gid)
                entry.granted = binding.self_prot
                entry.validated = admitted
            for pa in binding.pas:
                for rtt_entry in rd.entries_for_pa(pa):
                    rtt_entry.rights = binding.self_prot
        self._recompute_activation()

    def connect_any(self, gid: int, channel: str):
        rd = self._live_realm(gid)
        if rd.policy is None or rd.policy.channel(channel) is None:
            raise MonitorCallError(
                f"realm {gid} has no committed policy declaring channel {channel!r}"
            )
        pas = rd.channel_pas.get(channel)
        if pas is None:
            raise MonitorCallError(f"realm {gid} has no granules bound to {channel!r}")
        rt = self.find_runtime(channel, set(pas))
        if rt is None:
            raise MonitorCallError(f"channel {channel!r} has no runtime")
        already = all(
            (row := self.sgt_rows.get(pa)) and (e := row.entry(gid)) and e.validated
            for pa in pas
        )
        if already:
            return
        if rt.any_prot is None:
            raise AnyExhausted(f"channel {channel!r} admits no unnamed peers")
        self_prot = rd.policy.self_mapping(rd.policy.channel(channel)).prot
        if not self_prot <= rt.any_prot:
            raise RightsExceedAny(
                f"channel {channel!r}: requesting beyond the ANY grant"
            )
        if rt.any_remaining == 0:
            raise AnyExhausted(f"channel {channel!r}: ANY counter exhausted")
        if rt.any_remaining is not None and rt.any_remaining > 0:
            rt.any_remaining -= 1
        rt.any_joined.add(gid)
        for pa in pas:
            row = self.sgt_rows[pa]
            entry = row.entry(gid)
            entry.validated = True
        self._recompute_activation()
        self.log.emit("connect_any", realm=gid, channel=channel, remaining=rt.any_remaining)

    def _recompute_activation(self) -> None:
        for rt in self.channels:
            validated: Optional[Set[int]] = None
            for pa in rt.pas:
                row = self.sgt_rows.get(pa)
                gids = {
                    e.gid
                    for e in (row.entries if row else [])
                    if e.validated and self.realms[e.gid].live
                }
                validated = gids if validated is None else validated & gids
            rt.live_validated = validated or set()
            was = rt.active
            rt.active = len(rt.live_validated) >= 2
            if rt.active != was:
                self.log.emit(
                    "channel_state",
                    channel=rt.name,
                    result="active" if rt.active else "inactive",
                )

    # -- control-flow filter ---------------------------------------------------------

    def realm_exit(self, event: ExitEvent) -> FilterVerdict:
        rd = self._realm(event.realm)
        forced = (event.kind, event.event_id) == FORCED_SCRUB_EVENT
        if not rd.live:
            verdict = FilterVerdict(FilterAction.BLOCK, None)
        elif rd.state is not RealmState.POLICY_COMMITTED:
            verdict = FilterVerdict(FilterAction.ALLOW, tuple(event.payload))
        else:
            tc = rd.policy.trans_for(event.kind, event.event_id)
            action = tc.policy if tc is not None else FilterAction.BLOCK
            if forced and action is FilterAction.BLOCK:
                action = FilterAction.SCRUB
            if action is FilterAction.ALLOW:
                verdict = FilterVerdict(action, tuple(event.payload))
            elif action is FilterAction.SCRUB:
                registers = [0] * max(len(event.payload), 1)
                registers[0] = event.event_id
                verdict = FilterVerdict(action, tuple(registers))
            else:
                verdict = FilterVerdict(action, None)
        self.log.emit(
            "realm_exit",
            realm=event.realm,
            kind=event.kind.value,
            event_id=event.event_id,
            result=verdict.action.value,
        )
        if verdict.action is not FilterAction.BLOCK:
            self.host_events.append(
                {
                    "realm": event.realm,
                    "kind": event.kind.value,
                    "event_id": event.event_id,
                    "payload": list(verdict.delivered),
                }
            )
        return verdict

    # -- group attestation --------------------------------------------------------------

    def group_members(self, gid: int) -> List[int]:
        """Connected component of gid over active channels."""
        seen = {gid}
        queue = [gid]
        while queue:
            current = queue.pop()
            for rt in self.channels:
                if rt.active and current in rt.live_validated:
                    for peer in rt.live_validated:
                        if peer not in seen:
                            seen.add(peer)
                            queue.append(peer)
        return sorted(seen)

    def rsi_attest_token_init_group(self, gid: int, nonce: bytes) -> int:
        rd = self._live_realm(gid)
        if rd.state not in (RealmState.ACTIVE, RealmState.POLICY_COMMITTED):
            raise MonitorCallError(f"realm {gid} is {rd.state.value}")
        if len(nonce) != 32:
            raise MonitorCallError("nonce must be 32 bytes")
        token = attestation.build_group_token(self, gid, nonce)
        self._staged[gid] = (token, 0)
        self.log.emit(
            "rsi_attest_token_init_group",
            realm=gid,
            nonce=nonce,
            result=len(token),
        )
        return len(token)

    def rsi_attest_token_continue_group(self, gid: int, buffer_ipa: int, max_bytes: int) -> int:
        rd = self._live_realm(gid)
        staged = self._staged.get(gid)
        if staged is None:
            raise NoStagedToken(f"realm {gid} has no staged token")
        token, offset = staged
        entry = rd.translate(buffer_ipa)
        if entry is None or entry.kind is not EntryKind.PRIVATE:
            raise NoStagedToken(f"buffer {buffer_ipa:#x} is not in private memory")
        chunk = token[offset : offset + max_bytes]
        if not chunk:
            del self._staged[gid]
            self.log.emit("rsi_attest_token_continue_group", realm=gid, result=0)
            return 0
        if not self._write_private_span(rd, buffer_ipa, chunk):
            raise NoStagedToken(f"buffer at {buffer_ipa:#x} is not fully private")
        self._staged[gid] = (token, offset + len(chunk))
        self.log.emit("rsi_attest_token_continue_group", realm=gid, result=len(chunk))
        return len(chunk)

    def staged_token_bytes(self, gid: int) -> bytes:
        """Simulator convenience: the full staged token without chunked copies."""
        staged = self._staged.get(gid)
        if staged is None:
            raise NoStagedToken(f"realm {gid} has no staged token")
        return staged[0]


def _blob_length(blob: bytes) -> int:
    """Length of the self-delimiting policy blob inside a padded buffer."""
    pos = 9  # magic + version
    for _ in range(3):
        if pos + 4 > len(blob):
            return len(blob)
        section = int.from_bytes(blob[pos : pos + 4], "little")
        pos += 4 + section
    return min(pos, len(blob))
