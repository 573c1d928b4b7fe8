"""Brute-force information-flow oracle.

Computes, for every (source realm, sink in {host} + realms) pair, whether
bytes written by the source can be read by the sink, by actually writing
tagged byte patterns through an access-legality check reimplemented here
from the raw tables (stage-2 entries, shared-granule rows, granule tags).
It deliberately does not consult the monitor's validator or its channel
runtimes: activation is recomputed per granule from the validated flags.

``monitor_reachability`` derives the same matrix from the monitor's own
runtime view (active channels, granted rights, unprotected coverage); the
two must agree on every final state, which is the cross-implementation
check the test suite leans on.
"""

from __future__ import annotations

from typing import Dict, List, Set, Union

from .granules import GRANULE_SIZE, GranuleTag
from .monitor import Monitor
from .realm import EntryKind

HOST_KEY = "host"

Sink = Union[int, str]
FlowMatrix = Dict[int, Dict[Sink, bool]]


def _pattern(gid: int) -> bytes:
    return gid.to_bytes(8, "little") * (GRANULE_SIZE // 8)


def _row_live_validated(mon: Monitor, pa: int) -> Set[int]:
    row = mon.sgt_rows.get(pa)
    if row is None:
        return set()
    return {
        e.gid for e in row.entries if e.validated and mon.realms[e.gid].live
    }


def _raw_rights(mon: Monitor, gid: int, entry) -> frozenset:
    """Access legality from first principles, per granule."""
    if entry.kind is EntryKind.PRIVATE:
        return frozenset("RWX")
    if entry.kind is EntryKind.UNPROTECTED:
        return entry.rights
    row = mon.sgt_rows.get(entry.pa)
    mine = row.entry(gid) if row else None
    if mine is None or not mine.validated:
        return frozenset()
    if len(_row_live_validated(mon, entry.pa)) < 2:
        return frozenset()
    return mine.granted


def _writable_pas(mon: Monitor, gid: int) -> Set[int]:
    rd = mon.realms[gid]
    return {
        e.pa for e in rd.rtt.values() if "W" in _raw_rights(mon, gid, e)
    }


def _readable_pas(mon: Monitor, gid: int) -> Set[int]:
    rd = mon.realms[gid]
    return {
        e.pa for e in rd.rtt.values() if "R" in _raw_rights(mon, gid, e)
    }


def _host_readable_pas(mon: Monitor) -> Set[int]:
    return {
        pa
        for pa in mon.space.all_pas()
        if mon.space.tag(pa) in (GranuleTag.NORMAL_UNDELEGATED, GranuleTag.UNPROTECTED)
    }


def flow_matrix(mon: Monitor) -> FlowMatrix:
    """Exhaustive write/read simulation over the final mapping state.

    Each source writes its tag pattern to every granule it can, on a copy
    of the platform's contents; each sink then reads every granule it can
    and looks for the tag.
    """
    sources = sorted(rd.gid for rd in mon.live_realms())
    host_readable = _host_readable_pas(mon)
    readable = {gid: _readable_pas(mon, gid) for gid in sources}
    base = mon.space.content_snapshot()
    matrix: FlowMatrix = {}
    for src in sources:
        pattern = _pattern(src)
        contents = dict(base)
        for pa in _writable_pas(mon, src):
            contents[pa] = pattern
        row: Dict[Sink, bool] = {}
        for sink in sources:
            if sink == src:
                continue
            row[sink] = any(contents.get(pa) == pattern for pa in readable[sink])
        row[HOST_KEY] = any(contents.get(pa) == pattern for pa in host_readable)
        matrix[src] = row
    return matrix


def recomputed_active_channels(mon: Monitor) -> Set[str]:
    """Active set derived from the shared-granule rows alone."""
    by_channel: Dict[str, List[int]] = {}
    for pa, row in mon.sgt_rows.items():
        if row.channel is not None:
            by_channel.setdefault(row.channel, []).append(pa)
    active = set()
    for name, pas in by_channel.items():
        common: Set[int] = set.intersection(
            *(_row_live_validated(mon, pa) for pa in pas)
        )
        if len(common) >= 2:
            active.add(name)
    return active


def monitor_reachability(mon: Monitor) -> FlowMatrix:
    """The matrix the monitor's own bookkeeping implies.

    Edges: active protected channels taking writers to readers, plus
    unprotected granules taking writers to the host and to any realm
    holding a read mapping of the same granule.
    """
    sources = sorted(rd.gid for rd in mon.live_realms())
    matrix: FlowMatrix = {
        src: {**{sink: False for sink in sources if sink != src}, HOST_KEY: False}
        for src in sources
    }

    for rt in mon.channels:
        if not rt.active:
            continue
        writers, readers = set(), set()
        for pa in rt.pas:
            row = mon.sgt_rows.get(pa)
            for e in row.entries if row else ():
                if e.gid in rt.live_validated:
                    if "W" in e.granted:
                        writers.add(e.gid)
                    if "R" in e.granted:
                        readers.add(e.gid)
        for w in writers:
            for r in readers:
                if w != r and w in matrix:
                    matrix[w][r] = True

    unprot_writers: Dict[int, Set[int]] = {}
    unprot_readers: Dict[int, Set[int]] = {}
    for gid in sources:
        for e in mon.realms[gid].rtt.values():
            if e.kind is not EntryKind.UNPROTECTED:
                continue
            if "W" in e.rights:
                unprot_writers.setdefault(e.pa, set()).add(gid)
                matrix[gid][HOST_KEY] = True
            if "R" in e.rights:
                unprot_readers.setdefault(e.pa, set()).add(gid)
    for pa, writers in unprot_writers.items():
        for w in writers:
            for r in unprot_readers.get(pa, set()):
                if w != r:
                    matrix[w][r] = True
    return matrix


def gateway_confinement_holds(mon: Monitor, matrix: FlowMatrix) -> bool:
    """No committed non-gateway realm may have a flow edge to the host."""
    for gid, row in matrix.items():
        rd = mon.realms[gid]
        if rd.policy is not None and not rd.policy.self_peer.is_gateway:
            if row.get(HOST_KEY):
                return False
    return True
