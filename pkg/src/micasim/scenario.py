"""Declarative scenario files and their deterministic runner.

A scenario is a JSON document (docs/scenario.md): realm definitions with
memory slots and inline policy documents, an ordered action list with
expected outcomes, and optional end-state flow expectations.  Running one
builds a fresh platform, performs the actions, and produces a report that
is byte-identical across runs: the monitor event log, one pass/fail entry
per expectation, the final flow-oracle matrix, and the confinement check
(no committed non-gateway realm may reach the host).

Policy documents may reference peer measurements as ``@rim:<realm>``;
the runner substitutes the real measurement at upload time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from .attestation import verify_group_token
from .errors import (
    BadBlob,
    MicaError,
    MonitorCallError,
    PolicyError,
    PolicyRefused,
    ScenarioParseError,
    TokenError,
)
from .granules import FAULT, GRANULE_SIZE
from .host import Host
from .monitor import ExitEvent
from .oracle import (
    HOST_KEY,
    flow_matrix,
    gateway_confinement_holds,
    monitor_reachability,
)
from .policy import TransType

RIM_PLACEHOLDER = "@rim:"

_VALID_EXPECTS = frozenset(
    {"ok", "fault", "terminated", "verdict:Allow", "verdict:Scrub", "verdict:Block"}
)


def _parse_int(value, what: str) -> int:
    if isinstance(value, bool):
        raise ScenarioParseError(f"{what} must be an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            raise ScenarioParseError(f"{what}: bad integer {value!r}") from None
    raise ScenarioParseError(f"{what} must be an integer")


@dataclass
class ActionResult:
    index: int
    op: str
    expect: str
    outcome: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "op": self.op,
            "expect": self.expect,
            "outcome": self.outcome,
            "pass": self.passed,
            "detail": self.detail,
        }


@dataclass
class ScenarioReport:
    name: str
    actions: List[ActionResult] = field(default_factory=list)
    flow: Dict[str, Dict[str, bool]] = field(default_factory=dict)
    flow_expectations: List[dict] = field(default_factory=list)
    confinement_ok: bool = True
    oracle_agreement: bool = True
    event_log: List[dict] = field(default_factory=list)
    signer_seed: str = ""

    @property
    def passed(self) -> bool:
        return (
            all(a.passed for a in self.actions)
            and all(e["pass"] for e in self.flow_expectations)
            and self.confinement_ok
            and self.oracle_agreement
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "signer_seed": self.signer_seed,
            "actions": [a.to_dict() for a in self.actions],
            "flow_matrix": self.flow,
            "flow_expectations": self.flow_expectations,
            "confinement_ok": self.confinement_ok,
            "oracle_agreement": self.oracle_agreement,
            "event_log": self.event_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


class ScenarioRunner:
    def __init__(self, doc: dict):
        if not isinstance(doc, dict) or "name" not in doc or "realms" not in doc:
            raise ScenarioParseError("scenario needs at least 'name' and 'realms'")
        self.doc = doc
        config = doc.get("config", {})
        self.signer_seed = config.get("signer_seed", "micasim-default")
        self.host = Host(
            num_granules=_parse_int(config.get("granules", 1024), "config.granules"),
            signer_seed=self.signer_seed,
        )
        self.gids: Dict[str, int] = {}
        self.names: Dict[int, str] = {}
        self.policies: Dict[str, str] = {}
        self.tokens: Dict[str, bytes] = {}
        self._build_realms()

    # -- setup -----------------------------------------------------------------

    def _build_realms(self) -> None:
        for spec in self.doc["realms"]:
            if "name" not in spec:
                raise ScenarioParseError("realm without a name")
            name = spec["name"]
            if name in self.gids:
                raise ScenarioParseError(f"realm {name!r} declared twice")
            image = spec.get("image", name).encode("utf-8")
            n_private = _parse_int(spec.get("private_granules", 2), f"{name}.private_granules")
            gid = self.host.new_realm(image, n_private)
            self.gids[name] = gid
            self.names[gid] = name
            if "policy" in spec:
                self.policies[name] = json.dumps(spec["policy"])
        # slots after all realms exist, so shared regions can interleave
        for spec in self.doc["realms"]:
            gid = self.gids[spec["name"]]
            for slot in spec.get("slots", []):
                self._add_slot(spec["name"], gid, slot)

    def _add_slot(self, name: str, gid: int, slot: dict) -> None:
        attr = slot.get("attribute")
        ipa = _parse_int(slot.get("ipa"), f"{name}.slot.ipa")
        n = _parse_int(slot.get("granules", 1), f"{name}.slot.granules")
        if attr == "private_shared":
            if "channel" not in slot:
                raise ScenarioParseError(f"{name}: private_shared slot needs a channel")
            self.host.map_protected_channel(gid, slot["channel"], ipa, n)
        elif attr == "shared":
            region = slot.get("region") or slot.get("channel")
            if region is None:
                raise ScenarioParseError(f"{name}: shared slot needs a region")
            rights = frozenset(slot.get("rights", "RW"))
            self.host.map_unprotected_region(gid, region, ipa, n, rights)
        else:
            raise ScenarioParseError(f"{name}: unknown slot attribute {attr!r}")

    # -- actions ------------------------------------------------------------------

    def _gid(self, action: dict) -> int:
        name = action.get("realm")
        if name not in self.gids:
            raise ScenarioParseError(f"unknown realm {name!r}")
        return self.gids[name]

    def _data(self, action: dict, gid: int) -> bytes:
        data = action.get("data", "auto")
        if data == "auto":
            return gid.to_bytes(8, "little") * 16
        return bytes.fromhex(data)

    def _region_pa(self, action: dict) -> int:
        region = action.get("region") or action.get("channel")
        if region is None:
            raise ScenarioParseError("host access needs a region or channel")
        pas = self.host.region_pas(region)
        return pas[_parse_int(action.get("index", 0), "index")]

    def _tag_of(self, data: bytes, realm: str) -> bool:
        gid = self.gids.get(realm)
        return gid is not None and data[:8] == gid.to_bytes(8, "little")

    def _perform(self, action: dict) -> tuple:
        op = action.get("op")
        mon = self.host.mon
        if op == "upload_policy":
            name = action["realm"]
            text = action.get("policy_text") or self.policies.get(name)
            if text is None:
                raise ScenarioParseError(f"realm {name!r} has no policy to upload")
            for other, gid in self.gids.items():
                text = text.replace(RIM_PLACEHOLDER + other, mon.realms[gid].rim.hex())
            try:
                self.host.upload_policy(self.gids[name], text)
                return "ok", ""
            except (PolicyRefused, BadBlob) as exc:
                return "terminated", str(exc)
            except (MonitorCallError, PolicyError) as exc:
                return "fault", str(exc)
        if op == "connect_any":
            try:
                mon.connect_any(self._gid(action), action["channel"])
                return "ok", ""
            except MonitorCallError as exc:
                return "fault", str(exc)
        if op in ("realm_write", "realm_read"):
            gid = self._gid(action)
            ipa = _parse_int(action.get("ipa"), "ipa")
            if op == "realm_write":
                result = mon.realm_write(gid, ipa, self._data(action, gid))
                return ("fault", "") if result is FAULT else ("ok", "")
            result = mon.realm_read(gid, ipa, _parse_int(action.get("len", 64), "len"))
            if result is FAULT:
                return "fault", ""
            if "expect_tag" in action and not self._tag_of(result, action["expect_tag"]):
                return "ok", f"tag mismatch: wanted {action['expect_tag']}"
            return "ok", ""
        if op in ("host_read", "host_write"):
            pa = self._region_pa(action)
            if op == "host_write":
                data = bytes.fromhex(action["data"]) if "data" in action else b"\xd0"
                result = mon.host_write(pa, data)
                return ("fault", "") if result is FAULT else ("ok", "")
            result = mon.host_read(pa)
            if result is FAULT:
                return "fault", ""
            if "expect_tag" in action and not self._tag_of(result, action["expect_tag"]):
                return "ok", f"tag mismatch: wanted {action['expect_tag']}"
            return "ok", ""
        if op == "realm_exit":
            kind = TransType(action.get("kind", "call"))
            event = ExitEvent(
                self._gid(action),
                kind,
                _parse_int(action.get("id", 0), "id"),
                tuple(action.get("payload", [])),
            )
            verdict = mon.realm_exit(event)
            return f"verdict:{verdict.action.value.title()}", ""
        if op == "attest":
            gid = self._gid(action)
            nonce = bytes.fromhex(action.get("nonce", "00" * 32))
            try:
                token = self.host.fetch_group_token(gid, nonce)
            except MicaError as exc:
                return "fault", str(exc)
            self.tokens[action.get("store", action["realm"])] = token
            if action.get("send"):
                rd = mon.realms[gid]
                if rd.policy is None or not rd.policy.self_peer.is_gateway:
                    # only gateways may send a token off-platform
                    return "fault", f"realm {action['realm']} is not a gateway"
            return "ok", ""
        if op == "verify":
            token = self.tokens.get(action.get("token"))
            if token is None:
                raise ScenarioParseError(f"no stored token {action.get('token')!r}")
            nonce = bytes.fromhex(action.get("nonce", "00" * 32))
            try:
                verify_group_token(token, self.host.mon.signer, nonce)
                return "ok", ""
            except TokenError as exc:
                return "fault", str(exc)
        raise ScenarioParseError(f"unknown action op {op!r}")

    # -- run -------------------------------------------------------------------------

    def run(self) -> ScenarioReport:
        report = ScenarioReport(name=self.doc["name"], signer_seed=self.signer_seed)
        for index, action in enumerate(self.doc.get("actions", [])):
            expect = action.get("expect", "ok")
            if expect not in _VALID_EXPECTS:
                raise ScenarioParseError(f"action {index}: bad expect {expect!r}")
            outcome, detail = self._perform(action)
            passed = outcome == expect and "mismatch" not in detail
            report.actions.append(
                ActionResult(index, action["op"], expect, outcome, passed, detail)
            )

        matrix = flow_matrix(self.host.mon)
        derived = monitor_reachability(self.host.mon)
        report.oracle_agreement = matrix == derived
        report.confinement_ok = gateway_confinement_holds(self.host.mon, matrix)
        report.flow = {
            self.names[src]: {
                (sink if sink == HOST_KEY else self.names[sink]): value
                for sink, value in row.items()
            }
            for src, row in matrix.items()
        }
        for clause in self.doc.get("expect_flows", []):
            source, sink = clause.get("source"), clause.get("sink")
            wanted = bool(clause.get("flow"))
            actual = self.flow_of(report, source, sink)
            report.flow_expectations.append(
                {"source": source, "sink": sink, "flow": wanted, "actual": actual,
                 "pass": actual == wanted}
            )
        report.event_log = list(self.host.mon.log.records)
        return report

    @staticmethod
    def flow_of(report: ScenarioReport, source: str, sink: str) -> Optional[bool]:
        return report.flow.get(source, {}).get(sink)


def load_scenario(source: Union[str, Path, dict]) -> dict:
    if isinstance(source, dict):
        return source
    try:
        text = Path(source).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"scenario is not valid JSON: {exc}") from None


def run_scenario(source: Union[str, Path, dict]) -> ScenarioReport:
    return ScenarioRunner(load_scenario(source)).run()
