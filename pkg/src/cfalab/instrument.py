"""Instrumentation-site selection, the indirect target list and the code scanner."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .dominators import DominatorInfo
from .ir import KEY_REGS, Op, ProgramCFG

DEFAULT_RESERVED = ("r10", "r11")


@dataclass(frozen=True)
class InstrumentationPlan:
    direct_report_blocks: frozenset[str]
    indirect_sites: frozenset[tuple[str, str]]  # (block id, "icall" | "ijmp")
    return_sites: frozenset[str]
    skipped_blocks: dict[str, str]  # block id -> reason

    def to_json(self) -> dict:
        return {
            "direct_report_blocks": sorted(self.direct_report_blocks),
            "indirect_sites": sorted([list(s) for s in self.indirect_sites]),
            "return_sites": sorted(self.return_sites),
            "skipped_blocks": dict(sorted(self.skipped_blocks.items())),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, data: Mapping) -> "InstrumentationPlan":
        return cls(
            frozenset(data["direct_report_blocks"]),
            frozenset(tuple(s) for s in data["indirect_sites"]),
            frozenset(data["return_sites"]),
            dict(data["skipped_blocks"]),
        )


def _exit_only(cfg: ProgramCFG, bid: str) -> bool:
    ins = cfg.blocks[bid].instructions
    return len(ins) == 1 and ins[0].op is Op.EXIT


def plan_instrumentation(cfg: ProgramCFG, dom: DominatorInfo) -> InstrumentationPlan:
    """Pick the blocks that report to the engine.

    Every destination of a conditional branch reports its start address,
    except a destination made of a lone ``exit`` whose sibling destination
    does report: program termination is observed by the engine directly.
    Branch sources, joins and straight-line blocks are left alone.
    """
    direct: set[str] = set()
    exit_skips: set[str] = set()
    degenerate: set[str] = set()
    for bid, blk in cfg.blocks.items():
        term = blk.terminator
        if term is None or term.op is not Op.COND_BRANCH:
            continue
        taken, fall = cfg.cond_targets(bid)
        if taken == fall:
            degenerate.add(taken)
            continue
        for s, sibling in ((taken, fall), (fall, taken)):
            if _exit_only(cfg, s) and not _exit_only(cfg, sibling):
                exit_skips.add(s)
            else:
                direct.add(s)

    skipped: dict[str, str] = {}
    for bid, blk in cfg.blocks.items():
        if bid in direct:
            continue
        term = blk.terminator
        if bid in exit_skips:
            skipped[bid] = "exit-only"
        elif bid in degenerate:
            skipped[bid] = "unique-successor"
        elif term is not None and term.op is Op.COND_BRANCH:
            taken, fall = cfg.cond_targets(bid)
            if dom.idom.get(taken) == bid and dom.idom.get(fall) == bid:
                skipped[bid] = "dominator"
            else:
                skipped[bid] = "branch-source"
        else:
            skipped[bid] = "not-branch-target"

    indirect = set()
    returns = set()
    for bid, blk in cfg.blocks.items():
        term = blk.terminator
        if term is None:
            continue
        if term.op in (Op.INDIRECT_CALL, Op.INDIRECT_JUMP):
            indirect.add((bid, term.op.value))
        elif term.op is Op.RETURN:
            returns.add(bid)
    return InstrumentationPlan(frozenset(direct), frozenset(indirect), frozenset(returns), skipped)


@dataclass(frozen=True)
class IndirectTargetList:
    targets: frozenset[int]
    provenance: dict[int, str] = field(default_factory=dict)  # "static" | "dynamic"

    def __contains__(self, addr: int) -> bool:
        return addr in self.targets

    def to_json(self) -> dict:
        return {"targets": [{"addr": a, "provenance": self.provenance[a]} for a in sorted(self.targets)]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, data: Mapping) -> "IndirectTargetList":
        prov = {int(t["addr"]): t["provenance"] for t in data["targets"]}
        return cls(frozenset(prov), prov)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, partial: IndirectTargetList):
        super().__init__(msg)
        self.partial = partial


def build_itl(
    cfg: ProgramCFG,
    training_runs: Iterable[Mapping[str, int]] | None = None,
    fuel: int = 1_000_000,
) -> IndirectTargetList:
    """Static constant propagation per function, then dynamic training runs."""
    prov: dict[int, str] = {}
    for targets in cfg.static_indirect_targets.values():
        for t in targets:
            prov[t] = "static"
    if training_runs:
        from .executor import ExecutionFault, observe_indirect_targets

        for inputs in training_runs:
            try:
                seen = observe_indirect_targets(cfg, inputs, fuel=fuel)
            except ExecutionFault as exc:
                for t in exc.observed:
                    prov.setdefault(t, "dynamic")
                raise TrainingError(f"training run failed: {exc}", IndirectTargetList(frozenset(prov), prov)) from exc
            for t in seen:
                prov.setdefault(t, "dynamic")
    return IndirectTargetList(frozenset(prov), prov)


@dataclass(frozen=True)
class LintReport:
    findings: tuple[tuple[str, str, str], ...]  # (location, rule id, message)

    @property
    def clean(self) -> bool:
        return not self.findings

    def to_json(self) -> dict:
        return {
            "clean": self.clean,
            "findings": [{"location": l, "rule": r, "message": m} for l, r, m in self.findings],
        }


def scan_code(cfg: ProgramCFG, reserved: tuple[str, ...] = DEFAULT_RESERVED) -> LintReport:
    """Flag writes to the measurement accumulators or the key slots."""
    findings = []
    for bid, blk in cfg.blocks.items():
        for i, ins in enumerate(blk.instructions):
            if ins.op not in (Op.SET_REG, Op.COMPUTE) or ins.reg is None:
                continue
            loc = f"{bid}+{i * 4}"
            if ins.reg in KEY_REGS:
                findings.append((loc, "key-register-write", f"'{ins.text}' writes the measurement key slot"))
            elif ins.reg in reserved:
                findings.append((loc, "reserved-register-write", f"'{ins.text}' writes reserved {ins.reg}"))
    return LintReport(tuple(findings))
