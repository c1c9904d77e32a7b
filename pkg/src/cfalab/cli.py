"""Command-line interface: ``python -m cfalab <command>`` or ``cfalab <command>``.

Exit codes: 0 success / accepted, 1 rejected, 2 lint findings or usage
error, 3 search exhausted, 4 prover fault (a report is still written).
"""
from __future__ import annotations

import argparse
import json
import os
import random
import sys
from pathlib import Path

from . import corpus
from .attacks import AttackError, flip_bit, parse_attack
from .dominators import compute_dominators
from .engine import AttestationReport, KeyPair
from .executor import DEFAULT_FUEL, ExecutionFault, execute, expected_counts
from .instrument import DEFAULT_RESERVED, IndirectTargetList, build_itl, plan_instrumentation, scan_code
from .ir import ParseError, ValidationError, load_program
from .protocol import DEFAULT_ADDR, ENV_ADDR, VerifierClient, VerifierEndpoint, VerifierServer, parse_addr
from .schemes import size_report, to_csv
from .verifier import DEFAULT_NODE_BUDGET, Verdict, VerifierContext, artifact_digest, verify

BUILTIN_PROGRAMS = {
    "crc32": corpus.CRC32_SOURCE,
    "syringe": corpus.SYRINGE_SOURCE,
    "diamond": corpus.DIAMOND_SOURCE,
    "loop": corpus.LOOP_SOURCE,
    "dispatch": corpus.DISPATCH_SOURCE,
    "straight": corpus.STRAIGHT_SOURCE,
}


class CliError(Exception):
    def __init__(self, msg: str, code: int = 2):
        super().__init__(msg)
        self.code = code


def _read_program(ref: str):
    """A path, or ``builtin:<name>`` for a bundled program."""
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in BUILTIN_PROGRAMS:
            raise CliError(f"unknown builtin {name!r}; have {sorted(BUILTIN_PROGRAMS)}")
        text = BUILTIN_PROGRAMS[name]
    else:
        text = Path(ref).read_text(encoding="utf-8")
    try:
        return load_program(text)
    except ParseError as exc:
        raise CliError(f"{ref}: parse error at {exc.line}:{exc.col}: {exc}") from None
    except ValidationError as exc:
        raise CliError(f"{ref}: invalid program [{exc.rule}]: {exc}") from None


def _parse_inputs(items: list[str] | None) -> dict[str, int]:
    out: dict[str, int] = {}
    for item in items or []:
        if item.lstrip().startswith("{"):
            out.update({k: int(v) for k, v in json.loads(item).items()})
            continue
        reg, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"bad input {item!r}; expected r<k>=<int>")
        out[reg.strip()] = int(val, 0)
    return out


def _load_keys(path: str | None) -> KeyPair:
    if not path:
        raise CliError("--keys is required")
    try:
        return KeyPair.from_bytes(Path(path).read_bytes())
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _reserved(arg: str | None) -> tuple[str, ...]:
    return tuple(r.strip() for r in arg.split(",")) if arg else DEFAULT_RESERVED


def _artifacts(cfg, train: list[dict[str, int]] | None, itl_path: str | None = None):
    plan = plan_instrumentation(cfg, compute_dominators(cfg))
    if itl_path:
        itl = IndirectTargetList.from_json(json.loads(Path(itl_path).read_text()))
    else:
        itl = build_itl(cfg, train or None)
    return plan, itl


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    rng = random.Random(args.seed) if args.seed is not None else None
    raw = rng.randbytes(48) if rng else os.urandom(48)
    Path(args.out).write_bytes(raw)
    return 0


def cmd_instrument(args) -> int:
    cfg = _read_program(args.program)
    train = [_parse_inputs([t]) for t in args.train or []]
    lint = scan_code(cfg, _reserved(args.reserved))
    plan, itl = _artifacts(cfg, train)
    out = {
        "program_digest": artifact_digest(cfg, plan, itl).hex(),
        "plan": plan.to_json(),
        "itl": itl.to_json(),
        "lint": lint.to_json(),
        "direct_sites": [
            {"block": b, "addr": f"{cfg.blocks[b].start_addr:#010x}"} for b in sorted(plan.direct_report_blocks, key=lambda b: cfg.blocks[b].start_addr)
        ],
    }
    if args.cfg_json:
        Path(args.cfg_json).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    _emit(out)
    if not lint.clean and not args.allow_dirty:
        return 2
    return 0


def _nonce(args) -> bytes:
    if args.nonce:
        raw = bytes.fromhex(args.nonce)
        if len(raw) != 16:
            raise CliError("--nonce must be 32 hex digits")
        return raw
    if args.seed is not None:
        return random.Random(args.seed).randbytes(16)
    return os.urandom(16)


def cmd_attest(args) -> int:
    cfg = _read_program(args.program)
    keys = _load_keys(args.keys)
    inputs = _parse_inputs(args.input)
    plan, itl = _artifacts(cfg, [_parse_inputs([t]) for t in args.train or []], args.itl)
    nonce = _nonce(args)
    attack = None
    if args.attack:
        try:
            attack = parse_attack(args.attack, cfg, seed=args.seed or 0)
        except AttackError as exc:
            raise CliError(str(exc)) from None
    exec_attack = attack if attack is not None and attack.kind not in ("signature-flip", "replay") else None
    code = 0
    fault = None
    try:
        report, log = execute(
            cfg, plan, itl, keys, nonce, inputs, fuel=args.fuel, max_illegal=args.max_illegal,
            attack=exec_attack, record_events=bool(args.log),
        )
    except ExecutionFault as exc:
        report, log, fault, code = exc.report, exc.log, exc.reason, 4
    raw = report.to_bytes()
    if attack is not None and attack.kind == "signature-flip":
        raw = flip_bit(raw, attack.bit)
    Path(args.out).write_bytes(raw)
    if args.log and log is not None:
        Path(args.log).write_text(
            json.dumps(
                {"n": log.n, "m": log.m, "l": log.l, "fault": log.fault,
                 "events": [[k, f"{s:#010x}", f"{d:#010x}"] for k, s, d in (log.events or [])]},
            )
        )
    summary = report.to_json()
    summary.update({"fault": fault, "auth_size": report.auth_size, "attack": str(attack) if attack else None})
    _emit(summary)
    return code


def cmd_verify(args) -> int:
    cfg = _read_program(args.program)
    keys = _load_keys(args.keys)
    plan, itl = _artifacts(cfg, [_parse_inputs([t]) for t in args.train or []], args.itl)
    nonce = bytes.fromhex(args.nonce) if args.nonce else None
    exp = None
    if args.input:
        exp = expected_counts(cfg, plan, itl, _parse_inputs(args.input), fuel=args.fuel)
    ctx = VerifierContext(cfg, plan, itl, keys, expected_nonce=nonce, expected_counts=exp, node_budget=args.budget)
    raw = Path(args.report).read_bytes()
    try:
        report = AttestationReport.from_bytes(raw)
    except ValueError:
        verdict = Verdict(False, "bad-signature")
    else:
        verdict = verify(report, ctx)
    out = verdict.to_json()
    if not args.witness:
        out.pop("witness", None)
        out.pop("witness_truncated", None)
    _emit(out)
    if verdict.accepted:
        return 0
    return 3 if verdict.reason == "search-exhausted" else 1


def _compare_targets(args):
    """(name, source, inputs) triples for ``compare``."""
    inputs = _parse_inputs(args.input)
    targets = []
    for ref in args.programs:
        if ref == "family:unique":
            for u in (0, 3, 73):
                targets.append((f"unique-u{u}", corpus.unique_blocks_source(u, iterations=args.iterations), {}))
        elif ref == "family:loop-scaling":
            for k in (10, 100, 1000, 10000):
                targets.append((f"loop-k{k}", corpus.loop_scaling_source(k), {}))
        elif ref == "family:alternating":
            targets.append(("alternating-5", corpus.alternating_loop_source(5), {}))
        elif ref.startswith("builtin:"):
            name = ref.split(":", 1)[1]
            if name not in BUILTIN_PROGRAMS:
                raise CliError(f"unknown builtin {name!r}")
            targets.append((name, BUILTIN_PROGRAMS[name], inputs))
        else:
            targets.append((Path(ref).stem, Path(ref).read_text(encoding="utf-8"), inputs))
    return targets


def cmd_compare(args) -> int:
    keys = KeyPair.from_bytes(random.Random(args.seed or 0).randbytes(48))
    nonce = bytes(16)
    rows = []
    for name, src, inputs in _compare_targets(args):
        try:
            cfg = load_program(src)
        except (ParseError, ValidationError) as exc:
            raise CliError(f"{name}: {exc}") from None
        plan, itl = _artifacts(cfg, [inputs])
        report, log = execute(cfg, plan, itl, keys, nonce, inputs, fuel=args.fuel)
        rows.append(size_report(name, cfg, log, report))
    text = to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _endpoint_for(args) -> tuple[VerifierEndpoint, bytes]:
    cfg = _read_program(args.program)
    keys = _load_keys(args.keys)
    plan, itl = _artifacts(cfg, [_parse_inputs([t]) for t in args.train or []], args.itl)
    exp = expected_counts(cfg, plan, itl, _parse_inputs(args.input), fuel=args.fuel) if args.input else None
    digest = artifact_digest(cfg, plan, itl)
    rng = random.Random(args.seed).randbytes if args.seed is not None else None
    endpoint = VerifierEndpoint(args.session_log, rng=rng)
    endpoint.register(digest, VerifierContext(cfg, plan, itl, keys, expected_counts=exp, node_budget=args.budget))
    return endpoint, digest


def cmd_serve(args) -> int:
    endpoint, digest = _endpoint_for(args)
    server = VerifierServer(parse_addr(args.addr), endpoint)
    print(json.dumps({"listening": server.address, "program_digest": digest.hex()}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_challenge(args) -> int:
    """Prover side of one attestation round over TCP."""
    cfg = _read_program(args.program)
    keys = _load_keys(args.keys)
    plan, itl = _artifacts(cfg, [_parse_inputs([t]) for t in args.train or []], args.itl)
    digest = artifact_digest(cfg, plan, itl)
    inputs = _parse_inputs(args.input)
    with VerifierClient(args.addr) as client:
        ch = client.request_challenge(digest)
        try:
            report, _ = execute(cfg, plan, itl, keys, ch.nonce, inputs, fuel=args.fuel,
                                max_illegal=args.max_illegal, record_events=False)
        except ExecutionFault as exc:
            report = exc.report
        raw = report.to_bytes()
        verdict = client.submit_report(raw)
        if args.replay:
            verdict = {"first": verdict, "replay": client.submit_report(raw)}
    _emit(verdict)
    final = verdict["replay"] if args.replay else verdict
    if final.get("accepted"):
        return 0
    return 3 if final.get("reason") == "search-exhausted" else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfalab", description="Control-flow attestation laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, keys=True):
        sp.add_argument("--seed", type=int, default=None, help="seed for nonces and keys")
        sp.add_argument("--fuel", type=int, default=DEFAULT_FUEL, help="maximum executed blocks")
        if keys:
            sp.add_argument("--keys", help="48-byte key file: 16 bytes k_m then 32 bytes k_a")
        sp.add_argument("--train", action="append", help="training inputs for the ITL (repeatable)")
        sp.add_argument("--itl", help="use this ITL JSON instead of building one")

    sp = sub.add_parser("keygen", help="write a random key file")
    sp.add_argument("out")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_keygen)

    sp = sub.add_parser("instrument", help="plan instrumentation, build the ITL, scan the code")
    sp.add_argument("program", help="program file or builtin:<name>")
    sp.add_argument("--train", action="append")
    sp.add_argument("--reserved", help="comma-separated reserved registers (default r10,r11)")
    sp.add_argument("--allow-dirty", action="store_true", help="exit 0 even with lint findings")
    sp.add_argument("--cfg-json", help="also write the CFG export here")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_instrument)

    sp = sub.add_parser("attest", help="run the prover and write a signed report")
    sp.add_argument("program")
    sp.add_argument("--input", action="append", help="r<k>=<int> or a JSON object (repeatable)")
    sp.add_argument("--nonce", help="challenge nonce, 32 hex digits")
    sp.add_argument("--attack", help="attack spec, e.g. 'loop-count-delta(inner_body,+7)'")
    sp.add_argument("--max-illegal", type=int, default=16)
    sp.add_argument("--out", default="report.bin")
    sp.add_argument("--log", help="write the execution log JSON here")
    common(sp)
    sp.set_defaults(func=cmd_attest)

    sp = sub.add_parser("verify", help="verify a report; exit 0 accepted, 1 rejected, 3 search exhausted")
    sp.add_argument("report")
    sp.add_argument("program")
    sp.add_argument("--nonce", help="expected nonce, 32 hex digits")
    sp.add_argument("--input", action="append", help="known inputs: check counts against a benign run")
    sp.add_argument("--budget", type=int, default=DEFAULT_NODE_BUDGET)
    sp.add_argument("--witness", action="store_true", help="include the witness path")
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("compare", help="authenticator sizes of all schemes as CSV")
    sp.add_argument("programs", nargs="+", help="files, builtin:<name>, family:unique|loop-scaling|alternating")
    sp.add_argument("--input", action="append")
    sp.add_argument("--iterations", type=int, default=10, help="loop iterations for family:unique")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    sp.set_defaults(func=cmd_compare)

    for name, fn, help_ in (
        ("serve", cmd_serve, "run the verifier service"),
        ("challenge", cmd_challenge, "request a challenge, attest and submit over TCP"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("program")
        sp.add_argument("--addr", default=None, help=f"host:port (default ${ENV_ADDR} or {DEFAULT_ADDR})")
        sp.add_argument("--input", action="append")
        sp.add_argument("--max-illegal", type=int, default=16)
        sp.add_argument("--budget", type=int, default=DEFAULT_NODE_BUDGET)
        if name == "serve":
            sp.add_argument("--session-log", default="sessions.jsonl")
        else:
            sp.add_argument("--replay", action="store_true", help="submit the report a second time")
        common(sp)
        sp.set_defaults(func=fn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
