"""Attack descriptions and report-level tampering.

Execution-level attacks (``illegal-indirect``, ``branch-swap``,
``loop-count-delta``, ``return-corrupt``) are passed to
:func:`cfalab.executor.execute`, which perturbs the run itself so the signed
report is genuine and detection has to come from the verifier's analysis.
``signature-flip`` and ``replay`` act on the finished report or its delivery.

Textual form, as accepted by the CLI::

    illegal-indirect(0x10000443)
    branch-swap(main.check_plus)
    loop-count-delta(inner_body,+7)
    return-corrupt(0)
    signature-flip(17)
    replay
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .ir import Op, ProgramCFG

EXECUTION_KINDS = ("illegal-indirect", "branch-swap", "loop-count-delta", "return-corrupt")
REPORT_KINDS = ("signature-flip", "replay")
KINDS = EXECUTION_KINDS + REPORT_KINDS

_SPEC_RE = re.compile(r"^\s*([a-z-]+)\s*(?:\((.*)\))?\s*$")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    addr: int | None = None  # illegal-indirect
    block: str | None = None  # branch-swap / loop-count-delta (block id)
    delta: int = 0  # loop-count-delta
    depth: int = 0  # return-corrupt: index of the corrupted return
    offset: int = 4  # return-corrupt: displacement applied to the return address
    bit: int = 0  # signature-flip: bit index into the canonical report bytes
    seed: int = 0

    def __str__(self) -> str:
        if self.kind == "illegal-indirect":
            return f"illegal-indirect({self.addr:#010x})"
        if self.kind == "branch-swap":
            return f"branch-swap({self.block})"
        if self.kind == "loop-count-delta":
            return f"loop-count-delta({self.block},{self.delta:+d})"
        if self.kind == "return-corrupt":
            return f"return-corrupt({self.depth})"
        if self.kind == "signature-flip":
            return f"signature-flip({self.bit})"
        return self.kind


def resolve_block(cfg: ProgramCFG, name: str) -> str:
    """Accept ``func.label`` or a label that is unique across the program."""
    if name in cfg.blocks:
        return name
    hits = [bid for bid, b in cfg.blocks.items() if b.label == name]
    if len(hits) == 1:
        return hits[0]
    if not hits:
        raise AttackError(f"no block named {name!r}")
    raise AttackError(f"block label {name!r} is ambiguous: {sorted(hits)}")


def parse_attack(text: str, cfg: ProgramCFG | None = None, seed: int = 0) -> AttackSpec:
    m = _SPEC_RE.match(text)
    if not m or m.group(1) not in KINDS:
        raise AttackError(f"unknown attack {text!r}; expected one of {', '.join(KINDS)}")
    kind = m.group(1)
    args = [a.strip() for a in m.group(2).split(",")] if m.group(2) else []

    def need(n: int) -> None:
        if len(args) != n:
            raise AttackError(f"{kind} takes {n} argument(s), got {len(args)}")

    try:
        if kind == "illegal-indirect":
            need(1)
            spec = AttackSpec(kind, addr=int(args[0], 0), seed=seed)
        elif kind in ("branch-swap", "loop-count-delta"):
            need(1 if kind == "branch-swap" else 2)
            block = resolve_block(cfg, args[0]) if cfg is not None else args[0]
            delta = int(args[1], 0) if kind == "loop-count-delta" else 0
            spec = AttackSpec(kind, block=block, delta=delta, seed=seed)
        elif kind == "return-corrupt":
            need(1)
            spec = AttackSpec(kind, depth=int(args[0], 0), seed=seed)
        elif kind == "signature-flip":
            need(1)
            spec = AttackSpec(kind, bit=int(args[0], 0), seed=seed)
        else:
            need(0)
            spec = AttackSpec(kind, seed=seed)
    except ValueError as exc:
        if isinstance(exc, AttackError):
            raise
        raise AttackError(f"bad argument in {text!r}: {exc}") from None
    if cfg is not None:
        check_attack(spec, cfg)
    return spec


def check_attack(spec: AttackSpec, cfg: ProgramCFG) -> None:
    """Reject specs whose parameters do not name suitable program elements."""
    if spec.kind == "branch-swap":
        term = cfg.blocks[spec.block].terminator
        if term is None or term.op is not Op.COND_BRANCH:
            raise AttackError(f"{spec.block} does not end in a conditional branch")
    elif spec.kind == "loop-count-delta":
        if spec.delta == 0:
            raise AttackError("loop-count-delta needs a non-zero delta")
        if not any(
            cfg.blocks[b].terminator is not None
            and cfg.blocks[b].terminator.op is Op.COND_BRANCH
            and spec.block in cfg.cond_targets(b)
            and len(set(cfg.cond_targets(b))) == 2
            for b in cfg.blocks
        ):
            raise AttackError(f"{spec.block} is not the destination of a conditional branch")
    elif spec.kind == "illegal-indirect":
        if not any(
            b.terminator is not None and b.terminator.op in (Op.INDIRECT_CALL, Op.INDIRECT_JUMP)
            for b in cfg.blocks.values()
        ):
            raise AttackError("program has no indirect transfer to hijack")
    elif spec.kind == "return-corrupt" and spec.depth < 0:
        raise AttackError("return depth must be non-negative")


def flip_bit(raw: bytes, bit: int) -> bytes:
    """Flip one bit of the canonical report bytes (bit 0 = LSB of byte 0)."""
    bit %= len(raw) * 8
    out = bytearray(raw)
    out[bit >> 3] ^= 1 << (bit & 7)
    return bytes(out)
