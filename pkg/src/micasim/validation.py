"""Policy validation: the checks run when a realm uploads its policy.

Validation is a pure planning pass.  It inspects the uploading realm's
stage-2 table, the shared-granule table, and every already-committed
policy, and produces a report: either a list of failures (the caller then
terminates the realm) or the full set of state changes to apply.  Nothing
here mutates platform state, which is what makes failed uploads leave the
system exactly as it was.

Peer resolution follows two routes: an expected measurement declared for
the peer, or the sharing relation recorded in the shared-granule table.
Resolution that cannot pick a single live realm is a failure, not a
guess.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

from .granules import GRANULE_SIZE
from .policy import (
    ANY,
    ChannelType,
    FilterAction,
    MemChannelSpec,
    PolicyConfig,
    TransType,
    format_prot,
)
from .realm import EntryKind, RealmDescriptor


class FailureCode(Enum):
    AMBIGUOUS_PEER = "ambiguous_peer"
    SIZE_MISMATCH = "size_mismatch"
    DUPLICATE_PA = "duplicate_pa"
    RIGHTS_ESCALATION = "rights_escalation"
    STRICT_VIOLATION = "strict_violation"
    GATEWAY_VIOLATION = "gateway_violation"
    MISSING_SHARED_MARKING = "missing_shared_marking"
    ANY_EXHAUSTED = "any_exhausted"
    GPA_MISMATCH = "gpa_mismatch"


@dataclass
class ValidationFailure:
    code: FailureCode
    detail: str


@dataclass
class ChannelBinding:
    """A protected channel matched to the granules backing it in this realm."""

    name: str
    pas: List[int]  # guest-address order
    base_ipa: int
    self_prot: frozenset


@dataclass
class ValidationReport:
    realm: int
    failures: List[ValidationFailure] = field(default_factory=list)
    unmap_unprotected: List[int] = field(default_factory=list)
    covered_unprotected: Dict[int, frozenset] = field(default_factory=dict)
    bindings: Dict[str, ChannelBinding] = field(default_factory=dict)
    resolutions: Dict[str, Optional[int]] = field(default_factory=dict)
    admitted: Dict[str, bool] = field(default_factory=dict)
    will_activate: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, code: FailureCode, detail: str) -> None:
        self.failures.append(ValidationFailure(code, detail))

    def summary(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"{f.code.value}: {f.detail}" for f in self.failures)


def _contiguous_runs(entries) -> List[List]:
    runs: List[List] = []
    for entry in entries:
        if runs and entry.ipa == runs[-1][-1].ipa + GRANULE_SIZE:
            runs[-1].append(entry)
        else:
            runs.append([entry])
    return runs


def _claim_region(entries_by_ipa, base: int, count: int, claimed: Set[int]):
    """Entries at [base, base + count granules), or None if any is missing/taken."""
    picked = []
    for i in range(count):
        ipa = base + i * GRANULE_SIZE
        entry = entries_by_ipa.get(ipa)
        if entry is None or ipa in claimed:
            return None
        picked.append(entry)
    return picked


def _bind_channels(report, rd, cfg, kind, channels) -> Dict[str, List]:
    """Match declared channels of one kind against the realm's mappings.

    Channels with an explicit guest address claim their region first; the
    rest take the first exact-fit contiguous run, in name order.  Returns
    channel name -> claimed entries.
    """
    entries = rd.entries_of_kind(kind)
    by_ipa = {e.ipa: e for e in entries}
    claimed: Set[int] = set()
    out: Dict[str, List] = {}

    with_gpa = [ch for ch in channels if cfg.self_mapping(ch).gpa is not None]
    without = [ch for ch in channels if cfg.self_mapping(ch).gpa is None]
    for ch in sorted(with_gpa, key=lambda c: c.name):
        m = cfg.self_mapping(ch)
        picked = _claim_region(by_ipa, m.gpa, ch.n_granules, claimed)
        if picked is None:
            if kind is EntryKind.PROTECTED_SHARED:
                report.fail(
                    FailureCode.MISSING_SHARED_MARKING,
                    f"channel {ch.name!r}: no protected-shared region of "
                    f"{ch.n_granules} granules at {m.gpa:#x}",
                )
            continue
        claimed.update(e.ipa for e in picked)
        out[ch.name] = picked
    for ch in sorted(without, key=lambda c: c.name):
        picked = None
        for run in _contiguous_runs([e for e in entries if e.ipa not in claimed]):
            if len(run) == ch.n_granules:
                picked = run
                break
        if picked is None:
            if kind is EntryKind.PROTECTED_SHARED:
                report.fail(
                    FailureCode.MISSING_SHARED_MARKING,
                    f"channel {ch.name!r}: no unclaimed run of {ch.n_granules} granules",
                )
            continue
        claimed.update(e.ipa for e in picked)
        out[ch.name] = picked

    if kind is EntryKind.PROTECTED_SHARED:
        leftover = [e for e in entries if e.ipa not in claimed]
        if leftover:
            report.fail(
                FailureCode.MISSING_SHARED_MARKING,
                f"{len(leftover)} protected-shared granules not described by any channel "
                f"(first at ipa {leftover[0].ipa:#x})",
            )
    else:
        report.unmap_unprotected = [e.ipa for e in entries if e.ipa not in claimed]
    return out


def _sharer_gids(mon, rd, pas) -> Set[int]:
    gids: Set[int] = set()
    for pa in pas:
        row = mon.sgt_rows.get(pa)
        if row is None:
            continue
        for e in row.entries:
            if e.gid != rd.gid and mon.realms[e.gid].live:
                gids.add(e.gid)
    return gids


def _resolve_peer(mon, rd, cfg, local_id, bindings) -> Tuple[Optional[int], Optional[str]]:
    """Resolve a declared peer to a realm id.

    Returns (gid, failure detail).  gid None with no detail means the peer
    is simply not present yet (channels stay inactive).
    """
    decl = cfg.peer(local_id)
    chan_pas: List[int] = []
    for name, binding in bindings.items():
        ch = cfg.channel(name)
        if ch is not None and ch.mapping_for(local_id) is not None:
            chan_pas.extend(binding.pas)
    sharers = _sharer_gids(mon, rd, chan_pas)

    if decl.expected_rim is not None:
        cands = [
            r.gid
            for r in mon.realms.values()
            if r.live and r.gid != rd.gid and r.rim == decl.expected_rim
        ]
        if not cands:
            return None, None
        if len(cands) == 1:
            return cands[0], None
        narrowed = [g for g in cands if g in sharers]
        if len(narrowed) == 1:
            return narrowed[0], None
        return None, f"{len(cands)} realms match the measurement declared for {local_id!r}"

    if not sharers:
        return None, None
    any_joined: Set[int] = set()
    for rt in mon.channels:
        any_joined |= rt.any_joined
    cands = sharers - any_joined
    committed = {g for g in cands if mon.realms[g].policy is not None}
    pending = cands - committed
    if len(pending) > 1 or len(committed) > 1:
        return None, (
            f"cannot pick a single realm for {local_id!r}: "
            f"{len(committed)} committed and {len(pending)} pending sharers"
        )
    if len(committed) == 1:
        return next(iter(committed)), None
    return None, None  # at most one pending sharer: wait for its upload


def local_id_for(t_cfg: PolicyConfig, rim: bytes, channel: Optional[MemChannelSpec]) -> Optional[str]:
    """Which local id in t_cfg denotes the realm with this measurement.

    Measurement match wins; otherwise, on a specific channel, a single
    rim-less named mapping is taken to denote the counterpart.
    """
    matches = [
        p.local_id
        for p in t_cfg.peers
        if p.expected_rim == rim and p.local_id != t_cfg.self_id
    ]
    if len(matches) == 1:
        return matches[0]
    if matches:
        return None
    if channel is None:
        return None
    rimless = [
        m.who
        for m in channel.mappings
        if m.who not in (ANY, t_cfg.self_id, "SELF")
        and t_cfg.peer(m.who) is not None
        and t_cfg.peer(m.who).expected_rim is None
    ]
    if len(rimless) == 1:
        return rimless[0]
    return None


def _check_pair(report, mon, rd, cfg, t_rd, my_local_for_t: Optional[str]) -> None:
    """Every cross-policy compatibility rule for one committed counterpart."""
    t_cfg = t_rd.policy

    # Channel attribute agreement wherever both documents describe a name.
    for ch in cfg.mem_channels:
        t_ch = t_cfg.channel(ch.name)
        if t_ch is None:
            continue
        if ch.size != t_ch.size:
            report.fail(
                FailureCode.SIZE_MISMATCH,
                f"channel {ch.name!r}: {ch.size:#x} here vs {t_ch.size:#x} in realm {t_rd.gid}",
            )
        if ch.type is not t_ch.type:
            report.fail(
                FailureCode.SIZE_MISMATCH,
                f"channel {ch.name!r}: type differs from realm {t_rd.gid}",
            )

    # Rights and addresses on channels whose granules both realms map.
    t_pas = {pa for pas in t_rd.channel_pas.values() for pa in pas}
    shared_names = [
        name for name, binding in report.bindings.items() if set(binding.pas) & t_pas
    ]
    for name in shared_names:
        ch = cfg.channel(name)
        t_ch = t_cfg.channel(name)
        my_m = cfg.self_mapping(ch)
        if t_ch is None:
            report.fail(
                FailureCode.RIGHTS_ESCALATION,
                f"realm {t_rd.gid} shares the granules of {name!r} but its policy "
                f"does not describe that channel",
            )
            continue
        my_local = local_id_for(t_cfg, rd.rim, t_ch)
        grant = t_ch.mapping_for(my_local) if my_local else None
        if grant is not None:
            if not my_m.prot <= grant.prot:
                report.fail(
                    FailureCode.RIGHTS_ESCALATION,
                    f"channel {name!r}: requesting {format_prot(my_m.prot)} but realm "
                    f"{t_rd.gid} grants {format_prot(grant.prot)}",
                )
            if grant.gpa is not None and my_m.gpa is not None and grant.gpa != my_m.gpa:
                report.fail(
                    FailureCode.GPA_MISMATCH,
                    f"channel {name!r}: mapped at {my_m.gpa:#x} but realm {t_rd.gid} "
                    f"expects {grant.gpa:#x}",
                )
        else:
            t_any = t_ch.any_mapping
            if t_any is None:
                report.fail(
                    FailureCode.RIGHTS_ESCALATION,
                    f"channel {name!r}: realm {t_rd.gid} neither names this realm nor "
                    f"admits unnamed peers",
                )
            elif t_any.gpa is not None and my_m.gpa is not None and t_any.gpa != my_m.gpa:
                report.fail(
                    FailureCode.GPA_MISMATCH,
                    f"channel {name!r}: mapped at {my_m.gpa:#x} but the ANY mapping of "
                    f"realm {t_rd.gid} expects {t_any.gpa:#x}",
                )
        # Reverse direction: the counterpart's standing rights must be
        # admitted by the uploader's document too.
        t_self_m = t_cfg.self_mapping(t_ch)
        if t_self_m is None:
            continue
        t_local = my_local_for_t
        rev_grant = ch.mapping_for(t_local) if t_local else None
        if rev_grant is None:
            rev_any = ch.any_mapping
            if rev_any is None:
                report.fail(
                    FailureCode.RIGHTS_ESCALATION,
                    f"channel {name!r}: realm {t_rd.gid} already holds access this "
                    f"policy does not admit",
                )
            elif not t_self_m.prot <= rev_any.prot:
                report.fail(
                    FailureCode.RIGHTS_ESCALATION,
                    f"channel {name!r}: realm {t_rd.gid} holds "
                    f"{format_prot(t_self_m.prot)}, beyond this policy's ANY grant",
                )
        else:
            if not t_self_m.prot <= rev_grant.prot:
                report.fail(
                    FailureCode.RIGHTS_ESCALATION,
                    f"channel {name!r}: realm {t_rd.gid} holds {format_prot(t_self_m.prot)} "
                    f"but this policy grants it {format_prot(rev_grant.prot)}",
                )
            if (
                rev_grant.gpa is not None
                and t_self_m.gpa is not None
                and rev_grant.gpa != t_self_m.gpa
            ):
                report.fail(
                    FailureCode.GPA_MISMATCH,
                    f"channel {name!r}: realm {t_rd.gid} maps at {t_self_m.gpa:#x}, "
                    f"this policy expects {rev_grant.gpa:#x}",
                )


def _check_properties(report, rd, cfg, t_rd, declared_local: str) -> None:
    """Peer-property agreement with a named, resolved counterpart."""
    t_cfg = t_rd.policy
    decl = cfg.peer(declared_local)

    if decl.is_gateway != t_cfg.self_peer.is_gateway:
        report.fail(
            FailureCode.GATEWAY_VIOLATION,
            f"peer {declared_local!r} declared "
            f"{'gateway' if decl.is_gateway else 'non-gateway'} but realm {t_rd.gid} "
            f"committed the opposite",
        )
    if not decl.is_gateway:
        for ch in t_cfg.mem_channels:
            if ch.type is ChannelType.UNPROTECTED and t_cfg.self_mapping(ch) is not None:
                report.fail(
                    FailureCode.GATEWAY_VIOLATION,
                    f"non-gateway peer {declared_local!r} maps unprotected channel {ch.name!r}",
                )
        for tc in t_cfg.trans_channels:
            if (
                t_cfg.is_self(tc.owner)
                and tc.type is TransType.CALL
                and tc.policy is FilterAction.ALLOW
            ):
                report.fail(
                    FailureCode.GATEWAY_VIOLATION,
                    f"non-gateway peer {declared_local!r} allows host calls ({tc.name!r})",
                )
    if decl.strict:
        my_names = {ch.name for ch in cfg.mem_channels}
        t_part = {ch.name for ch in t_cfg.participating_channels()}
        missing = t_part - my_names
        if missing:
            report.fail(
                FailureCode.STRICT_VIOLATION,
                f"strict peer {declared_local!r} holds channels not captured here: "
                f"{sorted(missing)}",
            )
        my_ids = {p.local_id for p in cfg.peers}
        extra = {p.local_id for p in t_cfg.peers} - my_ids
        if extra:
            report.fail(
                FailureCode.STRICT_VIOLATION,
                f"strict peer {declared_local!r} declares peers not captured here: "
                f"{sorted(extra)}",
            )

    # Reverse: does the counterpart's document constrain this realm?
    my_local = local_id_for(t_cfg, rd.rim, None)
    if my_local is None:
        return
    t_decl = t_cfg.peer(my_local)
    if t_decl is None:
        return
    if t_decl.is_gateway != cfg.self_peer.is_gateway:
        report.fail(
            FailureCode.GATEWAY_VIOLATION,
            f"realm {t_rd.gid} declared this realm "
            f"{'gateway' if t_decl.is_gateway else 'non-gateway'}, policy says otherwise",
        )
    if not t_decl.is_gateway:
        for ch in cfg.mem_channels:
            if ch.type is ChannelType.UNPROTECTED and cfg.self_mapping(ch) is not None:
                report.fail(
                    FailureCode.GATEWAY_VIOLATION,
                    f"realm {t_rd.gid} declared this realm non-gateway but it maps "
                    f"unprotected channel {ch.name!r}",
                )
    if t_decl.strict:
        t_names = {ch.name for ch in t_cfg.mem_channels}
        missing = {ch.name for ch in cfg.participating_channels()} - t_names
        if missing:
            report.fail(
                FailureCode.STRICT_VIOLATION,
                f"realm {t_rd.gid} declared this realm strict; channels "
                f"{sorted(missing)} are not captured by its policy",
            )
        extra = {p.local_id for p in cfg.peers} - {p.local_id for p in t_cfg.peers}
        if extra:
            report.fail(
                FailureCode.STRICT_VIOLATION,
                f"realm {t_rd.gid} declared this realm strict; peers {sorted(extra)} "
                f"are not captured by its policy",
            )


def validate_policy(mon, rd: RealmDescriptor, cfg: PolicyConfig) -> ValidationReport:
    """Plan the commit of cfg for rd, or report why it must be refused."""
    report = ValidationReport(realm=rd.gid)

    protected = [
        ch
        for ch in cfg.mem_channels
        if ch.type is ChannelType.PROTECTED and cfg.self_mapping(ch) is not None
    ]
    unprotected = [
        ch
        for ch in cfg.mem_channels
        if ch.type is ChannelType.UNPROTECTED and cfg.self_mapping(ch) is not None
    ]

    bound = _bind_channels(report, rd, cfg, EntryKind.PROTECTED_SHARED, protected)
    for name, entries in bound.items():
        ch = cfg.channel(name)
        report.bindings[name] = ChannelBinding(
            name=name,
            pas=[e.pa for e in entries],
            base_ipa=entries[0].ipa,
            self_prot=cfg.self_mapping(ch).prot,
        )

    covered = _bind_channels(report, rd, cfg, EntryKind.UNPROTECTED, unprotected)
    for name, entries in covered.items():
        prot = cfg.self_mapping(cfg.channel(name)).prot
        for e in entries:
            report.covered_unprotected[e.ipa] = prot

    # Geometry against already-bound channels.
    for name, binding in sorted(report.bindings.items()):
        pa_set = set(binding.pas)
        for rt in mon.channels:
            overlap = pa_set & rt.pa_set
            if not overlap:
                continue
            if rt.name != name:
                report.fail(
                    FailureCode.DUPLICATE_PA,
                    f"granule {min(overlap):#x} already backs channel {rt.name!r}, "
                    f"claimed again by {name!r}",
                )
            elif pa_set != rt.pa_set:
                report.fail(
                    FailureCode.DUPLICATE_PA,
                    f"channel {name!r} binds a different granule set than the "
                    f"committed one",
                )
            elif binding.self_prot and rt.size != cfg.channel(name).size:
                report.fail(
                    FailureCode.SIZE_MISMATCH,
                    f"channel {name!r}: declared {cfg.channel(name).size:#x}, "
                    f"committed runtime is {rt.size:#x}",
                )

    # Peer resolution, in deterministic order.
    named_locals = sorted(
        {p.local_id for p in cfg.peers if p.local_id != cfg.self_id}
    )
    used: Dict[int, str] = {}
    for local in named_locals:
        gid, problem = _resolve_peer(mon, rd, cfg, local, report.bindings)
        if problem is not None:
            report.fail(FailureCode.AMBIGUOUS_PEER, problem)
        if gid is not None and gid in used:
            report.fail(
                FailureCode.AMBIGUOUS_PEER,
                f"locals {used[gid]!r} and {local!r} both resolve to realm {gid}",
            )
        if gid is not None:
            used[gid] = local
        report.resolutions[local] = gid

    # Compatibility against every committed counterpart: resolved named
    # peers, plus any committed realm sharing the bound granules.
    counterparts: Set[int] = set()
    for local, gid in report.resolutions.items():
        if gid is not None and mon.realms[gid].policy is not None:
            counterparts.add(gid)
    for binding in report.bindings.values():
        for gid in _sharer_gids(mon, rd, binding.pas):
            if mon.realms[gid].policy is not None:
                counterparts.add(gid)

    local_by_gid = {gid: local for local, gid in report.resolutions.items() if gid}
    for gid in sorted(counterparts):
        t_rd = mon.realms[gid]
        _check_pair(report, mon, rd, cfg, t_rd, local_by_gid.get(gid))
        if gid in local_by_gid:
            _check_properties(report, rd, cfg, t_rd, local_by_gid[gid])

    # Admission: a channel joins immediately unless a committed participant
    # covers this realm only through its ANY mapping, in which case the
    # explicit connect step (with its counter) is required.
    for name, binding in report.bindings.items():
        committed_sharers = {
            gid
            for gid in _sharer_gids(mon, rd, binding.pas)
            if mon.realms[gid].policy is not None
        }
        admitted = True
        for gid in committed_sharers:
            t_cfg = mon.realms[gid].policy
            t_ch = t_cfg.channel(name)
            if t_ch is None or t_cfg.self_mapping(t_ch) is None:
                continue
            my_local = local_id_for(t_cfg, rd.rim, t_ch)
            if my_local is None or t_ch.mapping_for(my_local) is None:
                admitted = False
        report.admitted[name] = admitted

    if report.ok:
        report.will_activate = _activation_preview(mon, rd, report)
    return report


def _activation_preview(mon, rd, report) -> List[str]:
    names = []
    for name, binding in report.bindings.items():
        if not report.admitted.get(name):
            continue
        validated: Optional[Set[int]] = None
        for pa in binding.pas:
            row = mon.sgt_rows.get(pa)
            gids = {
                e.gid
                for e in (row.entries if row else [])
                if e.validated and mon.realms[e.gid].live
            }
            gids.add(rd.gid)
            validated = gids if validated is None else validated & gids
        if validated and len(validated) >= 2:
            names.append(name)
    return sorted(names)
