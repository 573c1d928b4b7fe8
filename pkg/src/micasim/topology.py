"""Seeded random platform topologies and a direct-rule outcome checker.

The generator emits small deployments (up to four realms, up to four
channels) as a declarative spec: realm images, the regions the host
pre-marks, one policy document per realm, and an upload order.  A defect
can be injected to force one specific validation failure.

``drive_topology`` executes a spec against a real monitor.
``brute_check`` predicts the outcome of the same spec by enumerating every
mapping pair and testing each compatibility rule directly, with no graph
traversal and no shared code with the monitor's validator.  The test suite
requires the two to agree on upload verdicts, the final active-channel
set, and the information-flow matrix.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from . import digest as dg
from .errors import BadBlob, PolicyRefused
from .granules import GRANULE_SIZE
from .host import Host
from .oracle import HOST_KEY, FlowMatrix
from .policy import ChannelType, PolicyConfig, parse_policy

RIM_PLACEHOLDER = "@rim:"


@dataclass
class TopologySpec:
    seed: int
    realms: List[Tuple[str, str]]  # (name, image tag); equal tags, equal identity
    protected_maps: List[Tuple[str, str, int, int]]  # (realm, region, gpa, granules)
    unprotected_maps: List[Tuple[str, str, int, int]]
    docs: Dict[str, str]
    upload_order: List[str]
    defect: Optional[str] = None


@dataclass
class Outcome:
    committed: Set[str] = field(default_factory=set)
    terminated: Dict[str, Set[str]] = field(default_factory=dict)
    active: Set[str] = field(default_factory=set)


# ---------------------------------------------------------------------------
# Monitor-side driver
# ---------------------------------------------------------------------------


def _resolve_rims(doc: str, host: Host, gids: Dict[str, int]) -> str:
    for name, gid in gids.items():
        doc = doc.replace(RIM_PLACEHOLDER + name, host.mon.realms[gid].rim.hex())
    return doc


def drive_topology(spec: TopologySpec, signer_seed: str = "topology"):
    """Run the spec on a fresh platform; returns (host, gids, Outcome)."""
    host = Host(num_granules=256, signer_seed=signer_seed)
    gids: Dict[str, int] = {}
    for name, image in spec.realms:
        gids[name] = host.new_realm(image.encode(), 2)
    for realm, region, gpa, n in spec.protected_maps:
        host.map_protected_channel(gids[realm], region, gpa, n)
    for realm, region, gpa, n in spec.unprotected_maps:
        host.map_unprotected_region(gids[realm], region, gpa, n)
    outcome = Outcome()
    for name in spec.upload_order:
        doc = _resolve_rims(spec.docs[name], host, gids)
        try:
            host.upload_policy(gids[name], doc)
            outcome.committed.add(name)
        except PolicyRefused as exc:
            outcome.terminated[name] = {f.code.name for f in exc.report.failures}
        except BadBlob:
            outcome.terminated[name] = {"BAD_BLOB"}
    outcome.active = host.mon.active_channels()
    return host, gids, outcome


# ---------------------------------------------------------------------------
# Independent outcome checker
# ---------------------------------------------------------------------------


def _sym_rim(image_tag: str) -> bytes:
    return dg.digest(b"sym-rim:" + image_tag.encode())


def _parse_with_sym_rims(doc: str, spec: TopologySpec) -> PolicyConfig:
    for name, image in spec.realms:
        doc = doc.replace(RIM_PLACEHOLDER + name, _sym_rim(image).hex())
    return parse_policy(doc)


class _Checker:
    """Predicts per-upload verdicts by direct pairwise rule enumeration."""

    def __init__(self, spec: TopologySpec):
        self.spec = spec
        self.images = dict(spec.realms)
        self.rims = {name: _sym_rim(img) for name, img in spec.realms}
        self.docs = {name: _parse_with_sym_rims(spec.docs[name], spec) for name in spec.docs}
        # realm -> region -> (gpa, granules)
        self.maps: Dict[str, Dict[str, Tuple[int, int]]] = {}
        for realm, region, gpa, n in spec.protected_maps:
            self.maps.setdefault(realm, {})[region] = (gpa, n)
        self.unprot: Dict[str, List[Tuple[str, int, int]]] = {}
        for realm, region, gpa, n in spec.unprotected_maps:
            self.unprot.setdefault(realm, []).append((region, gpa, n))
        self.committed: Set[str] = set()
        self.terminated: Dict[str, Set[str]] = {}
        # realm -> channel name -> region, fixed at commit
        self.bindings: Dict[str, Dict[str, str]] = {}

    # -- helpers ----------------------------------------------------------

    def live(self, name: str) -> bool:
        return name not in self.terminated

    def doc(self, name: str) -> PolicyConfig:
        return self.docs[name]

    def sharers_of_regions(self, me: str, regions: Set[str]) -> Set[str]:
        out = set()
        for other, has in self.maps.items():
            if other != me and self.live(other) and regions & set(has):
                out.add(other)
        return out

    def entry_for(self, their_doc: PolicyConfig, their_name: str, ch_name: str, my_rim: bytes):
        """The mapping in their channel that covers the realm with my_rim."""
        ch = their_doc.channel(ch_name)
        if ch is None:
            return None
        matches = [
            p.local_id
            for p in their_doc.peers
            if p.expected_rim == my_rim and p.local_id != their_doc.self_id
        ]
        if len(matches) == 1:
            return ch.mapping_for(matches[0])
        if matches:
            return None
        rimless = [
            m.who
            for m in ch.mappings
            if m.who not in ("ANY", "SELF", their_doc.self_id)
            and their_doc.peer(m.who) is not None
            and their_doc.peer(m.who).expected_rim is None
        ]
        if len(rimless) == 1:
            return ch.mapping_for(rimless[0])
        return None

    # -- the per-upload rule walk -------------------------------------------

    def check_upload(self, me: str) -> Set[str]:
        doc = self.doc(me)
        fails: Set[str] = set()
        my_maps = dict(self.maps.get(me, {}))

        # channel-to-region matching by declared address and size
        binding: Dict[str, str] = {}
        used: Set[str] = set()
        for ch in doc.mem_channels:
            if ch.type is not ChannelType.PROTECTED or doc.self_mapping(ch) is None:
                continue
            gpa = doc.self_mapping(ch).gpa
            found = None
            for region, (rgpa, rn) in sorted(my_maps.items()):
                if region in used or rn != ch.n_granules:
                    continue
                if gpa is not None and rgpa != gpa:
                    continue
                found = region
                break
            if found is None:
                fails.add("MISSING_SHARED_MARKING")
            else:
                used.add(found)
                binding[ch.name] = found
        if set(my_maps) - used:
            fails.add("MISSING_SHARED_MARKING")

        # duplicate physical backing across channel identities
        for ch_name, region in binding.items():
            for other in self.committed:
                for o_name, o_region in self.bindings.get(other, {}).items():
                    if o_region == region and o_name != ch_name:
                        fails.add("DUPLICATE_PA")

        # peer resolution
        resolutions: Dict[str, Optional[str]] = {}
        for peer in sorted(p.local_id for p in doc.peers if p.local_id != doc.self_id):
            decl = doc.peer(peer)
            peer_regions = {
                binding[ch.name]
                for ch in doc.mem_channels
                if ch.name in binding and ch.mapping_for(peer) is not None
            }
            sharers = self.sharers_of_regions(me, peer_regions)
            if decl.expected_rim is not None:
                cands = [
                    other
                    for other, _img in self.spec.realms
                    if other != me and self.live(other) and self.rims[other] == decl.expected_rim
                ]
                if len(cands) == 1:
                    resolutions[peer] = cands[0]
                elif len(cands) > 1:
                    narrowed = [c for c in cands if c in sharers]
                    if len(narrowed) == 1:
                        resolutions[peer] = narrowed[0]
                    else:
                        fails.add("AMBIGUOUS_PEER")
                        resolutions[peer] = None
                else:
                    resolutions[peer] = None
            else:
                committed = {s for s in sharers if s in self.committed}
                pending = sharers - committed
                if len(pending) > 1 or len(committed) > 1:
                    fails.add("AMBIGUOUS_PEER")
                    resolutions[peer] = None
                elif len(committed) == 1:
                    resolutions[peer] = next(iter(committed))
                else:
                    resolutions[peer] = None
        resolved = [r for r in resolutions.values() if r is not None]
        if len(resolved) != len(set(resolved)):
            fails.add("AMBIGUOUS_PEER")

        # pairwise rules against every committed counterpart
        counterparts = {r for r in resolved if r in self.committed}
        counterparts |= {
            s for s in self.sharers_of_regions(me, set(binding.values())) if s in self.committed
        }
        local_of = {gid: local for local, gid in resolutions.items() if gid}
        for other in sorted(counterparts):
            fails |= self._pair_rules(me, doc, binding, other, local_of.get(other))
        return fails

    def _pair_rules(self, me, doc, binding, other, local_for_other) -> Set[str]:
        fails: Set[str] = set()
        o_doc = self.doc(other)
        o_binding = self.bindings.get(other, {})

        for ch in doc.mem_channels:
            o_ch = o_doc.channel(ch.name)
            if o_ch is None:
                continue
            if ch.size != o_ch.size or ch.type is not o_ch.type:
                fails.add("SIZE_MISMATCH")

        shared = [
            name
            for name, region in binding.items()
            if region in set(o_binding.values())
        ]
        for name in shared:
            ch = doc.channel(name)
            my_m = doc.self_mapping(ch)
            o_ch = o_doc.channel(name)
            if o_ch is None:
                fails.add("RIGHTS_ESCALATION")
                continue
            grant = self.entry_for(o_doc, other, name, self.rims[me])
            if grant is None:
                grant = o_ch.any_mapping
                if grant is None:
                    fails.add("RIGHTS_ESCALATION")
                elif grant.gpa is not None and my_m.gpa is not None and grant.gpa != my_m.gpa:
                    fails.add("GPA_MISMATCH")
                if grant is not None and not my_m.prot <= grant.prot:
                    # deferred to the connect step for ANY coverage
                    pass
            else:
                if not my_m.prot <= grant.prot:
                    fails.add("RIGHTS_ESCALATION")
                if grant.gpa is not None and my_m.gpa is not None and grant.gpa != my_m.gpa:
                    fails.add("GPA_MISMATCH")
            o_self = o_doc.self_mapping(o_ch)
            if o_self is not None:
                rev = ch.mapping_for(local_for_other) if local_for_other else None
                if rev is None:
                    rev_any = ch.any_mapping
                    if rev_any is None:
                        fails.add("RIGHTS_ESCALATION")
                    elif not o_self.prot <= rev_any.prot:
                        fails.add("RIGHTS_ESCALATION")
                else:
                    if not o_self.prot <= rev.prot:
                        fails.add("RIGHTS_ESCALATION")
                    if rev.gpa is not None and o_self.gpa is not None and rev.gpa != o_self.gpa:
                        fails.add("GPA_MISMATCH")

        if local_for_other is not None:
            decl = doc.peer(local_for_other)
            if decl.is_gateway != o_doc.self_peer.is_gateway:
                fails.add("GATEWAY_VIOLATION")
            if not decl.is_gateway:
                for ch in o_doc.mem_channels:
                    if ch.type is ChannelType.UNPROTECTED and o_doc.self_mapping(ch):
                        fails.add("GATEWAY_VIOLATION")
            if decl.strict:
                my_names = {ch.name for ch in doc.mem_channels}
                if {c.name for c in o_doc.participating_channels()} - my_names:
                    fails.add("STRICT_VIOLATION")
                if {p.local_id for p in o_doc.peers} - {p.local_id for p in doc.peers}:
                    fails.add("STRICT_VIOLATION")
            # reverse direction
            my_local_there = [
                p.local_id
                for p in o_doc.peers
                if p.expected_rim == self.rims[me] and p.local_id != o_doc.self_id
            ]
            if len(my_local_there) == 1:
                o_decl = o_doc.peer(my_local_there[0])
                if o_decl.is_gateway != doc.self_peer.is_gateway:
                    fails.add("GATEWAY_VIOLATION")
                if not o_decl.is_gateway:
                    for ch in doc.mem_channels:
                        if ch.type is ChannelType.UNPROTECTED and doc.self_mapping(ch):
                            fails.add("GATEWAY_VIOLATION")
                if o_decl.strict:
                    o_names = {ch.name for ch in o_doc.mem_channels}
                    if {c.name for c in doc.participating_channels()} - o_names:
                        fails.add("STRICT_VIOLATION")
                    if {p.local_id for p in doc.peers} - {p.local_id for p in o_doc.peers}:
                        fails.add("STRICT_VIOLATION")
        return fails

    def run(self) -> Outcome:
        outcome = Outcome()
        for me in self.spec.upload_order:
            fails = self.check_upload(me)
            if fails:
                self.terminated[me] = fails
                outcome.terminated[me] = fails
                if me in self.maps:
                    del self.maps[me]  # shared entries dropped at termination
            else:
                self.committed.add(me)
                outcome.committed.add(me)
                doc = self.doc(me)
                binding = {}
                used: Set[str] = set()
                for ch in doc.mem_channels:
                    if ch.type is not ChannelType.PROTECTED or doc.self_mapping(ch) is None:
                        continue
                    gpa = doc.self_mapping(ch).gpa
                    for region, (rgpa, rn) in sorted(self.maps.get(me, {}).items()):
                        if region not in used and rn == ch.n_granules and (gpa is None or rgpa == gpa):
                            binding[ch.name] = region
                            used.add(region)
                            break
                self.bindings[me] = binding
        # activation: at least two live committed realms bound to the region
        region_users: Dict[str, Dict[str, str]] = {}
        for realm in outcome.committed:
            for name, region in self.bindings.get(realm, {}).items():
                region_users.setdefault(region, {})[realm] = name
        for region, users in region_users.items():
            if len(users) >= 2:
                outcome.active |= set(users.values())
        return outcome


def brute_check(spec: TopologySpec) -> Outcome:
    return _Checker(spec).run()


def expected_flows(spec: TopologySpec, outcome: Outcome, gids: Dict[str, int]) -> FlowMatrix:
    """The flow matrix the spec implies, for cross-checking the byte oracle."""
    checker = _Checker(spec)
    checker_outcome = checker.run()
    live = [name for name, _ in spec.realms if name not in checker_outcome.terminated]
    matrix: FlowMatrix = {}
    for name in live:
        row = {HOST_KEY: False}
        for other in live:
            if other != name:
                row[gids[other]] = False
        matrix[gids[name]] = row

    # active protected channels: writers reach readers
    for region, users in _region_users(checker, checker_outcome).items():
        if len(users) < 2:
            continue
        writers, readers = [], []
        for realm, ch_name in users.items():
            doc = checker.doc(realm)
            prot = doc.self_mapping(doc.channel(ch_name)).prot
            if "W" in prot:
                writers.append(realm)
            if "R" in prot:
                readers.append(realm)
        for w in writers:
            for r in readers:
                if w != r:
                    matrix[gids[w]][gids[r]] = True

    # unprotected regions: writers reach the host (and readers of the region)
    for name in live:
        doc = checker.docs.get(name)
        committed = name in checker_outcome.committed
        for region, gpa, n in checker.unprot.get(name, ()):
            if committed:
                covered = any(
                    ch.type is ChannelType.UNPROTECTED
                    and doc.self_mapping(ch) is not None
                    and doc.self_mapping(ch).gpa == gpa
                    and ch.n_granules == n
                    for ch in doc.mem_channels
                )
                if not covered:
                    continue
                prot = next(
                    doc.self_mapping(ch).prot
                    for ch in doc.mem_channels
                    if ch.type is ChannelType.UNPROTECTED
                    and doc.self_mapping(ch) is not None
                    and doc.self_mapping(ch).gpa == gpa
                )
            else:
                prot = frozenset("RW")
            if "W" in prot:
                matrix[gids[name]][HOST_KEY] = True
    return matrix


def _region_users(checker: _Checker, outcome: Outcome) -> Dict[str, Dict[str, str]]:
    region_users: Dict[str, Dict[str, str]] = {}
    for realm in outcome.committed:
        for name, region in checker.bindings.get(realm, {}).items():
            region_users.setdefault(region, {})[realm] = name
    return region_users


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

_DEFECTS = [
    "size_mismatch",
    "rights_escalation",
    "missing_marking",
    "leftover_marking",
    "duplicate_pa",
    "strict_violation",
    "gateway_violation",
    "ambiguous_peer",
    "gpa_mismatch",
]


def random_topology(seed: int) -> TopologySpec:
    rng = random.Random(seed)
    n_realms = rng.randint(2, 4)
    names = [f"R{i}" for i in range(n_realms)]
    images = {name: f"image-{name}-{seed}" for name in names}

    n_channels = rng.randint(1, min(4, 1 + n_realms))
    channels = []
    for c in range(n_channels):
        a, b = rng.sample(names, 2)
        style = rng.choice(["feed", "duplex", "mixed"])
        if style == "feed":
            prots = {a: "W", b: "R"}
        elif style == "duplex":
            prots = {a: "RW", b: "RW"}
        else:
            prots = {a: "RW", b: "R"}
        channels.append(
            {
                "name": f"C{c}",
                "granules": rng.randint(1, 2),
                "gpa": 0x3000_0000 + c * 0x10000,
                "prots": prots,
            }
        )

    gateway = rng.choice(names) if rng.random() < 0.5 else None
    use_rims = rng.random() < 0.8 or n_realms > 2

    defect = rng.choice(_DEFECTS) if rng.random() < 0.5 else None
    # these defects are only observable when peers are named by measurement
    if defect in ("ambiguous_peer", "strict_violation", "gateway_violation"):
        use_rims = True

    docs: Dict[str, dict] = {}
    for name in names:
        peers: Dict[str, object] = {"Self": name, name: {
            "is_gateway": name == gateway, "strict": False}}
        mem: Dict[str, object] = {}
        for ch in channels:
            mappings = {}
            for member, prot in ch["prots"].items():
                key = "SELF" if member == name else member
                mappings[key] = {"gpa": ch["gpa"], "prot": prot}
                if member != name and member not in peers:
                    entry = {"is_gateway": member == gateway, "strict": False}
                    if use_rims:
                        entry["hash"] = RIM_PLACEHOLDER + member
                    peers[member] = entry
            mem[ch["name"]] = {
                "size": ch["granules"] * GRANULE_SIZE,
                "type": "PROTECTED",
                "mappings": mappings,
            }
        docs[name] = {"Peers": peers, "MemChannels": mem, "TransChannels": {}}

    protected_maps = []
    for ch in channels:
        for member in ch["prots"]:
            protected_maps.append((member, ch["name"], ch["gpa"], ch["granules"]))

    unprotected_maps = []
    if gateway is not None:
        gpa = 0x7000_0000
        unprotected_maps.append((gateway, f"IO-{gateway}", gpa, 1))
        docs[gateway]["MemChannels"]["IO"] = {
            "size": GRANULE_SIZE,
            "type": "UNPROTECTED",
            "mappings": {"SELF": {"gpa": gpa, "prot": "RW"}},
        }

    order = list(names)
    rng.shuffle(order)
    if rng.random() < 0.2:
        order = order[:-1]  # one realm never uploads

    realms = [(name, images[name]) for name in names]
    spec = TopologySpec(
        seed=seed,
        realms=realms,
        protected_maps=protected_maps,
        unprotected_maps=unprotected_maps,
        docs={},
        upload_order=order,
        defect=defect,
    )
    _inject_defect(rng, spec, docs, channels, names, images, gateway)
    spec.docs = {name: _dump(docs[name]) for name in names}
    return spec


def _dump(doc: dict) -> str:
    import json

    return json.dumps(doc)


def _inject_defect(rng, spec, docs, channels, names, images, gateway) -> None:
    defect = spec.defect
    if defect is None:
        return
    ch = rng.choice(channels)
    members = sorted(ch["prots"])
    victim = rng.choice(members)
    # the victim must upload, and last among the channel members, so the
    # defect is observable against an already-committed counterpart
    order = [n for n in spec.upload_order if n != victim]
    if any(m in order for m in members if m != victim):
        order.append(victim)
        spec.upload_order = order
    else:
        others = [m for m in members if m != victim]
        spec.upload_order = others + [n for n in order if n not in others] + [victim]

    doc = docs[victim]
    if defect == "size_mismatch":
        # declaration disagrees with the region (and with the peers' documents)
        doc["MemChannels"][ch["name"]]["size"] = (ch["granules"] + 1) * GRANULE_SIZE
    elif defect == "rights_escalation":
        doc["MemChannels"][ch["name"]]["mappings"]["SELF"]["prot"] = "RWX"
    elif defect == "missing_marking":
        spec.protected_maps = [
            (r, reg, gpa, n)
            for (r, reg, gpa, n) in spec.protected_maps
            if not (r == victim and reg == ch["name"])
        ]
    elif defect == "leftover_marking":
        spec.protected_maps.append((victim, f"extra-{ch['name']}", 0x6000_0000, 1))
    elif defect == "duplicate_pa":
        renamed = ch["name"] + "x"
        doc["MemChannels"][renamed] = doc["MemChannels"].pop(ch["name"])
    elif defect == "strict_violation":
        other = next(m for m in members if m != victim)
        docs[other]["Peers"][victim]["strict"] = True
        extra_gpa = 0x6100_0000
        doc["MemChannels"]["HIDDEN"] = {
            "size": GRANULE_SIZE,
            "type": "PROTECTED",
            "mappings": {"SELF": {"gpa": extra_gpa, "prot": "RW"}},
        }
        spec.protected_maps.append((victim, "HIDDEN", extra_gpa, 1))
    elif defect == "gateway_violation":
        other = next(m for m in members if m != victim)
        # the counterpart promises the group that the victim is no gateway
        docs[other]["Peers"][victim]["is_gateway"] = False
        docs[victim]["Peers"][victim]["is_gateway"] = True
        gpa = 0x7200_0000
        docs[victim]["MemChannels"]["IO2"] = {
            "size": GRANULE_SIZE,
            "type": "UNPROTECTED",
            "mappings": {"SELF": {"gpa": gpa, "prot": "RW"}},
        }
        spec.unprotected_maps.append((victim, f"IO2-{victim}", gpa, 1))
    elif defect == "ambiguous_peer":
        other = next(m for m in members if m != victim)
        twin = "TWIN"
        spec.realms.append((twin, images[other]))  # same identity as `other`
        spec.protected_maps.append((twin, ch["name"], ch["gpa"], ch["granules"]))
    elif defect == "gpa_mismatch":
        doc["MemChannels"][ch["name"]]["mappings"]["SELF"]["gpa"] = ch["gpa"] + 0x8000_0000
        spec.protected_maps = [
            (r, reg, gpa + 0x8000_0000 if (r == victim and reg == ch["name"]) else gpa, n)
            for (r, reg, gpa, n) in spec.protected_maps
        ]
