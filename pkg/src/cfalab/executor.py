"""Abstract execution of an instrumented program (the prover side).

Blocks are compiled to Python closures over a 32-entry register file. On each
block entry the engine hooks fire according to the instrumentation plan:
planned branch destinations report their start address and extend the forward
chain, indirect sites report and measure their dynamic destination, and
returns extend the backward chain with the address they return to.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

from .engine import (
    AttestationReport,
    EngineState,
    IllegalOverflow,
    KeyPair,
    init_engine,
)
from .expr import MASK32, NUM_REGS, register_index
from .instrument import IndirectTargetList, InstrumentationPlan, scan_code
from .ir import INSN_SIZE, Op, ProgramCFG, resolve_value

DEFAULT_FUEL = 10**8

# terminator codes
T_FALL, T_COND, T_JUMP, T_CALL, T_ICALL, T_IJMP, T_RET, T_EXIT = range(8)


class ExecutionFault(RuntimeError):
    """Execution stopped early. ``report``/``log`` hold what was produced."""

    def __init__(self, reason: str, report: AttestationReport | None = None, log: "ExecutionLog | None" = None):
        super().__init__(reason)
        self.reason = reason
        self.report = report
        self.log = log
        self.observed: list[int] = []


@dataclass
class ExecutionLog:
    """Ground-truth control transfers: (kind, source end address, destination)."""

    events: list[tuple[str, int, int]] | None = field(default_factory=list)
    n: int = 0  # conditional and indirect forward branch instances
    m: int = 0  # returns
    direct_reports: int = 0
    indirect_reports: int = 0
    steps: int = 0
    fault: str | None = None

    @property
    def l(self) -> int:
        return self.n + self.m


@dataclass
class _Block:
    index: int
    id: str
    start: int
    instrumented: bool
    body: Callable | None  # all non-terminator instructions at once
    steps: tuple  # per-instruction callables (None for no-ops), for mid-block entry
    term: int
    a: object = None
    b: object = None
    end: int = 0
    n_insns: int = 0


def _compile_op(cfg: ProgramCFG, bid: str, ins) -> str | None:
    if ins.op is Op.SET_REG:
        if not ins.reg.startswith("r"):
            return None
        return f"R[{register_index(ins.reg)}] = {resolve_value(cfg, bid, ins.value)}"
    if ins.op is Op.COMPUTE and ins.reg is not None and ins.reg.startswith("r"):
        return f"R[{register_index(ins.reg)}] = {ins.expr.code}"
    return None


_GLOBALS = {"__builtins__": {"int": int, "bool": bool}}


def _make_fn(lines: list[str]) -> Callable | None:
    if not lines:
        return None
    src = "def _f(R):\n" + "".join(f"    {l}\n" for l in lines)
    ns: dict = {}
    exec(src, dict(_GLOBALS), ns)
    return ns["_f"]


class CompiledProgram:
    def __init__(self, cfg: ProgramCFG, plan: InstrumentationPlan | None):
        self.cfg = cfg
        self.plan = plan
        ids = [b for fn in cfg.functions.values() for b in fn.blocks]
        self.index = {bid: i for i, bid in enumerate(ids)}
        self.blocks: list[_Block] = []
        direct = plan.direct_report_blocks if plan is not None else frozenset()
        for bid in ids:
            blk = cfg.blocks[bid]
            lines = [_compile_op(cfg, bid, ins) for ins in blk.instructions if not ins.is_terminator]
            steps = tuple(_make_fn([l]) if l else None for l in lines)
            cb = _Block(
                index=self.index[bid],
                id=bid,
                start=blk.start_addr,
                instrumented=bid in direct,
                body=_make_fn([l for l in lines if l]),
                steps=steps,
                term=T_FALL,
                end=blk.end_addr,
                n_insns=len(blk.instructions),
            )
            term = blk.terminator
            follow = cfg.fallthrough(bid)
            if term is None:
                cb.term, cb.a = T_FALL, self.index[follow]
            elif term.op is Op.COND_BRANCH:
                taken, fall = cfg.cond_targets(bid)
                cb.term, cb.a, cb.b = T_COND, term.expr._fn, (self.index[taken], self.index[fall])
            elif term.op is Op.JUMP:
                cb.term, cb.a = T_JUMP, self.index[f"{blk.function}.{term.target}"]
            elif term.op is Op.CALL:
                cb.term, cb.a, cb.b = T_CALL, self.index[cfg.functions[term.target].entry], self.index[follow]
            elif term.op is Op.INDIRECT_CALL:
                cb.term, cb.a, cb.b = T_ICALL, register_index(term.reg), self.index[follow]
            elif term.op is Op.INDIRECT_JUMP:
                cb.term, cb.a = T_IJMP, register_index(term.reg)
            elif term.op is Op.RETURN:
                cb.term = T_RET
            else:
                cb.term = T_EXIT
            self.blocks.append(cb)
        self.entry = self.index[cfg.entry]

    def land(self, addr: int) -> tuple[int, int] | None:
        """(block index, instruction offset) for an arbitrary code address."""
        blk = self.cfg.block_containing(addr)
        if blk is None or (addr - blk.start_addr) % INSN_SIZE:
            return None
        return self.index[blk.id], (addr - blk.start_addr) // INSN_SIZE


class _CountingEngine:
    """Engine stand-in that only counts; used for expectations and training."""

    def __init__(self, itl: IndirectTargetList | None):
        self.counts: dict[int, int] = {}
        self.illegal: list[int] = []
        self.itl = itl
        self.indirect_seen: list[int] = []

    def report_direct(self, dest: int) -> None:
        self.counts[dest] = self.counts.get(dest, 0) + 1

    def report_indirect(self, dest: int) -> None:
        self.indirect_seen.append(dest)
        if self.itl is None or dest in self.itl.targets:
            self.report_direct(dest)
        else:
            self.illegal.append(dest)

    def measure_forward(self, dest: int) -> None:
        pass

    def measure_backward(self, ret_addr: int) -> None:
        pass


class _Hooks:
    """Execution-level attack state (see :mod:`cfalab.attacks`)."""

    def __init__(self, attack, prog: CompiledProgram, limit: int | None):
        self.kind = attack.kind
        self.attack = attack
        self.applied = False
        self.returns_seen = 0
        self.extra = 0
        self.limit = limit
        self.block = prog.index[attack.block] if attack.block is not None else None
        self.block_start = prog.blocks[self.block].start if self.block is not None else None
        if self.kind == "loop-count-delta":
            self.extra = attack.delta if attack.delta > 0 else 0


def _run(
    prog: CompiledProgram,
    inputs: Mapping,
    engine,
    fuel: int,
    log: ExecutionLog | None,
    hooks: _Hooks | None = None,
) -> str | None:
    """Run to Exit. Returns a fault reason or None."""
    R = [0] * NUM_REGS
    for k, v in inputs.items():
        R[register_index(k) if isinstance(k, str) else int(k)] = int(v) & MASK32
    blocks = prog.blocks
    events = log.events if log is not None and log.events is not None else None
    report_direct = engine.report_direct
    measure_forward = engine.measure_forward
    stack: list[int] = []
    bi, off = prog.entry, 0
    steps = 0
    n = m = direct = indirect = 0
    fault = None
    try:
        while True:
            steps += 1
            if steps > fuel:
                fault = "fuel-exhausted"
                break
            b = blocks[bi]
            if off == 0:
                if b.instrumented:
                    s = b.start
                    report_direct(s)
                    measure_forward(s)
                    direct += 1
                if b.body is not None:
                    b.body(R)
            else:
                for fn in b.steps[off:]:
                    if fn is not None:
                        fn(R)
                off = 0
            t = b.term
            if t == T_COND:
                taken = b.a(R)
                if hooks is not None:
                    taken = _steer(hooks, b, taken, engine)
                n += 1
                bi = b.b[0] if taken else b.b[1]
                if events is not None:
                    events.append(("cond-taken" if taken else "cond-fallthrough", b.end, blocks[bi].start))
            elif t == T_JUMP or t == T_FALL:
                bi = b.a
                if events is not None:
                    events.append(("jump" if t == T_JUMP else "fallthrough", b.end, blocks[bi].start))
            elif t == T_CALL:
                stack.append(b.b)
                bi = b.a
                if events is not None:
                    events.append(("call", b.end, blocks[bi].start))
            elif t == T_RET:
                if not stack:
                    fault = "return-stack-underflow"
                    break
                cont = stack.pop()
                ret_addr = blocks[cont].start
                if hooks is not None and hooks.kind == "return-corrupt":
                    if hooks.returns_seen == hooks.attack.depth:
                        ret_addr = (ret_addr + hooks.attack.offset) & MASK32
                        hooks.applied = True
                    hooks.returns_seen += 1
                engine.measure_backward(ret_addr)
                m += 1
                if events is not None:
                    events.append(("return", b.end, ret_addr))
                if ret_addr != blocks[cont].start:
                    landing = prog.land(ret_addr)
                    if landing is None:
                        fault = "invalid-return-target"
                        break
                    bi, off = landing
                else:
                    bi = cont
            elif t == T_ICALL or t == T_IJMP:
                dest = R[b.a]
                if hooks is not None and hooks.kind == "illegal-indirect" and not hooks.applied:
                    dest = hooks.attack.addr
                    hooks.applied = True
                measure_forward(dest)
                engine.report_indirect(dest)
                indirect += 1
                n += 1
                if events is not None:
                    events.append(("indirect-call" if t == T_ICALL else "indirect-jump", b.end, dest))
                landing = prog.land(dest)
                if landing is None:
                    fault = "invalid-indirect-target"
                    break
                if t == T_ICALL:
                    stack.append(b.b)
                bi, off = landing
            else:
                if events is not None:
                    events.append(("exit", b.end, b.end))
                break
    except IllegalOverflow:
        fault = "illegal-overflow"
    except ZeroDivisionError:
        fault = "division-by-zero"
    if log is not None:
        log.n, log.m, log.steps = n, m, steps
        log.direct_reports, log.indirect_reports = direct, indirect
        log.fault = fault
    return fault


def _steer(hooks: _Hooks, b: _Block, taken: int, engine) -> int:
    if hooks.kind == "branch-swap":
        if b.index == hooks.block and not hooks.applied:
            hooks.applied = True
            return 0 if taken else 1
        return taken
    if hooks.kind == "loop-count-delta":
        succ = b.b
        if hooks.block not in succ or succ[0] == succ[1]:
            return taken
        to_body = (succ[0] if taken else succ[1]) == hooks.block
        body_taken = 1 if succ[0] == hooks.block else 0
        if not to_body and hooks.extra > 0:
            hooks.extra -= 1
            hooks.applied = True
            return body_taken
        if to_body and hooks.limit is not None:
            if engine.counts_for(hooks.block_start) >= hooks.limit:
                hooks.applied = True
                return 1 - body_taken
    return taken


def _normalize_inputs(inputs: Mapping | None) -> dict:
    return dict(inputs or {})


def execute(
    cfg: ProgramCFG,
    plan: InstrumentationPlan,
    itl: IndirectTargetList,
    keys: KeyPair,
    nonce: bytes,
    inputs: Mapping | None = None,
    fuel: int = DEFAULT_FUEL,
    max_illegal: int = 16,
    attack=None,
    record_events: bool = True,
    compiled: CompiledProgram | None = None,
) -> tuple[AttestationReport, ExecutionLog]:
    """Run the program from its entry block and return the signed report.

    Raises :class:`ExecutionFault` on fuel exhaustion, illegal-target
    overflow, return-stack underflow or a jump into the middle of an
    instruction; the partial, signed report is attached to the exception.
    """
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    lint = scan_code(cfg)
    if not lint.clean:
        raise ValueError(f"program fails the code scan: {lint.findings[0][1]} at {lint.findings[0][0]}")
    prog = compiled or CompiledProgram(cfg, plan)
    inputs = _normalize_inputs(inputs)
    hooks = None
    if attack is not None and attack.kind in ("illegal-indirect", "branch-swap", "loop-count-delta", "return-corrupt"):
        limit = None
        if attack.kind == "loop-count-delta" and attack.delta < 0:
            base = expected_counts(cfg, plan, itl, inputs, fuel=fuel, compiled=prog)
            start = cfg.blocks[attack.block].start_addr
            limit = max(base.get(start, 0) + attack.delta, 0)
        hooks = _Hooks(attack, prog, limit)
    engine = init_engine(keys, nonce, itl, max_illegal)
    engine.counts_for = lambda addr: engine.trace.counts.get(addr, 0)  # type: ignore[attr-defined]
    log = ExecutionLog(events=[] if record_events else None)
    fault = _run(prog, inputs, engine, fuel, log, hooks)
    report = engine.finalize()
    if fault is not None:
        engine.aborted = fault
        raise ExecutionFault(fault, report, log)
    return report, log


def expected_counts(
    cfg: ProgramCFG,
    plan: InstrumentationPlan,
    itl: IndirectTargetList,
    inputs: Mapping | None,
    fuel: int = DEFAULT_FUEL,
    compiled: CompiledProgram | None = None,
) -> dict[int, int]:
    """Occurrence counts a benign run on ``inputs`` would report.

    This is the verifier's offline expectation when it knows the inputs.
    """
    prog = compiled or CompiledProgram(cfg, plan)
    eng = _CountingEngine(itl)
    fault = _run(prog, _normalize_inputs(inputs), eng, fuel, None)
    if fault is not None:
        raise ExecutionFault(fault)
    return eng.counts


def observe_indirect_targets(cfg: ProgramCFG, inputs: Mapping | None, fuel: int = DEFAULT_FUEL) -> list[int]:
    """Indirect destinations seen on one run (dynamic ITL training)."""
    prog = CompiledProgram(cfg, None)
    eng = _CountingEngine(None)
    fault = _run(prog, _normalize_inputs(inputs), eng, fuel, None)
    bad = [d for d in eng.indirect_seen if cfg.block_at(d) is None]
    if fault is not None or bad:
        exc = ExecutionFault(fault or "invalid-indirect-target")
        exc.observed = [d for d in eng.indirect_seen if cfg.block_at(d) is not None]
        raise exc
    return eng.indirect_seen
