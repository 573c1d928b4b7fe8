"""Command-line front end.

Subcommands:
  run       execute a scenario file; exit 0 only if every expectation holds
  validate  parse a policy document, print blob length and digest
  attest    run a scenario, then export a group token from one realm
  verify    check a token file against an anchor and nonce
  sizes     token-size table across chain topologies

Usage errors exit 2 (argparse default); failed expectations or failed
verification exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attestation import HmacSigner, verify_group_token
from .errors import MicaError, PolicyError, ScenarioError
from .host import token_size_table
from .policy import encode_policy, parse_policy, policy_digest
from .scenario import ScenarioRunner, load_scenario


def _cmd_run(args) -> int:
    runner = ScenarioRunner(load_scenario(args.scenario))
    report = runner.run()
    if args.log:
        Path(args.log).write_text(runner.host.mon.log.to_jsonl(), encoding="utf-8")
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    for action in report.actions:
        marker = "ok" if action.passed else "FAIL"
        print(f"[{marker}] action {action.index}: {action.op} -> {action.outcome}")
    for clause in report.flow_expectations:
        marker = "ok" if clause["pass"] else "FAIL"
        print(
            f"[{marker}] flow {clause['source']} -> {clause['sink']}: "
            f"expected {clause['flow']}, observed {clause['actual']}"
        )
    print(f"confinement: {'ok' if report.confinement_ok else 'FAIL'}")
    print(f"oracle agreement: {'ok' if report.oracle_agreement else 'FAIL'}")
    print(f"scenario {report.name}: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def _cmd_validate(args) -> int:
    try:
        text = Path(args.policy).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = parse_policy(text)
        blob = encode_policy(cfg)
    except PolicyError as exc:
        print(f"invalid policy: {exc}", file=sys.stderr)
        return 1
    print(f"self: {cfg.self_id}")
    print(f"peers: {len(cfg.peers)}")
    print(f"mem channels: {len(cfg.mem_channels)}")
    print(f"trans channels: {len(cfg.trans_channels)}")
    print(f"blob length: {len(blob)} bytes")
    print(f"digest: {policy_digest(blob).hex()}")
    return 0


def _cmd_attest(args) -> int:
    runner = ScenarioRunner(load_scenario(args.scenario))
    report = runner.run()
    if not report.passed:
        print("scenario expectations failed; not attesting", file=sys.stderr)
        return 1
    name = getattr(args, "from")
    gid = runner.gids.get(name)
    if gid is None:
        print(f"error: no realm named {name!r} in the scenario", file=sys.stderr)
        return 1
    rd = runner.host.mon.realms[gid]
    if rd.policy is None or not rd.policy.self_peer.is_gateway:
        print(f"error: realm {name!r} is not a gateway; it cannot send tokens off-platform",
              file=sys.stderr)
        return 1
    nonce = bytes.fromhex(args.nonce)
    try:
        token = runner.host.fetch_group_token(gid, nonce)
    except MicaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    Path(args.output).write_bytes(token)
    if args.log:
        Path(args.log).write_text(runner.host.mon.log.to_jsonl(), encoding="utf-8")
    print(f"wrote {len(token)} bytes to {args.output}")
    return 0


def _cmd_verify(args) -> int:
    try:
        token = Path(args.token).read_bytes()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    anchor = HmacSigner.from_seed(args.anchor)
    try:
        group = verify_group_token(token, anchor, bytes.fromhex(args.nonce))
    except MicaError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(group.to_report(), indent=2, sort_keys=True))
    return 0


def _cmd_sizes(args) -> int:
    rows = token_size_table(args.realms)
    previous = None
    print(f"{'realms':>6} {'token bytes':>12} {'first diff':>11}")
    for n, size in rows:
        diff = "" if previous is None else str(size - previous)
        print(f"{n:>6} {size:>12} {diff:>11}")
        previous = size
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="micasim",
        description="Deterministic confidential-computing platform simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--log", help="write the monitor event log (JSON lines)")
    p_run.add_argument("--report", help="write the full scenario report (JSON)")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="parse and encode a policy document")
    p_val.add_argument("policy")
    p_val.set_defaults(func=_cmd_validate)

    p_att = sub.add_parser("attest", help="run a scenario and export a group token")
    p_att.add_argument("scenario")
    p_att.add_argument("--from", required=True, help="realm sending the token (a gateway)")
    p_att.add_argument("-o", "--output", required=True)
    p_att.add_argument("--nonce", default="00" * 32, help="32-byte hex nonce")
    p_att.add_argument("--log", help="write the monitor event log")
    p_att.set_defaults(func=_cmd_attest)

    p_ver = sub.add_parser("verify", help="verify a group token file")
    p_ver.add_argument("token")
    p_ver.add_argument("--anchor", required=True, help="signer seed acting as trust anchor")
    p_ver.add_argument("--nonce", required=True, help="expected 32-byte hex nonce")
    p_ver.set_defaults(func=_cmd_verify)

    p_sizes = sub.add_parser("sizes", help="token-size table for chain topologies")
    p_sizes.add_argument("--realms", type=int, default=6)
    p_sizes.set_defaults(func=_cmd_sizes)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
