"""Control-flow IR: instructions, basic blocks, the textual loader and the CFG.

Programs are written in a small line-oriented language::

    # comment
    func main {
      block entry:
        set r5 = 0
      block cond:
        cbr done if r5 >= r0
      block body @0x10000441:
        compute r5 = r5 + 1; jmp cond
      block done:
        exit
    }

Blocks without an explicit ``@addr`` are laid out in declaration order from
``0x10000000`` at 4 bytes per instruction. A block's ``end_addr`` is the
address of its last instruction.
"""
from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .expr import Expr, ExprError, register_index

BASE_ADDR = 0x1000_0000
INSN_SIZE = 4
MASK32 = 0xFFFFFFFF
KEY_REGS = ("pac_key0", "pac_key1", "pac_key2", "pac_key3")


class ParseError(ValueError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col
        self.msg = msg


class ValidationError(ValueError):
    def __init__(self, rule: str, msg: str):
        super().__init__(f"{rule}: {msg}")
        self.rule = rule


class Op(enum.Enum):
    COMPUTE = "compute"
    COND_BRANCH = "cbr"
    JUMP = "jmp"
    CALL = "call"
    INDIRECT_CALL = "icall"
    INDIRECT_JUMP = "ijmp"
    RETURN = "ret"
    EXIT = "exit"
    SET_REG = "set"
    LOOP_HINT = "loophint"


TERMINATORS = frozenset(
    {Op.COND_BRANCH, Op.JUMP, Op.CALL, Op.INDIRECT_CALL, Op.INDIRECT_JUMP, Op.RETURN, Op.EXIT}
)


class EdgeKind(str, enum.Enum):
    COND_TAKEN = "cond-taken"
    COND_FALLTHROUGH = "cond-fallthrough"
    JUMP = "jump"
    FALLTHROUGH = "fallthrough"
    CALL_CONTINUATION = "call-continuation"
    CALL = "call"
    INDIRECT = "indirect"
    RETURN = "return"


@dataclass(frozen=True)
class Instruction:
    op: Op
    target: str | None = None  # label (cbr/jmp) or function (call)
    reg: str | None = None  # written register (set/compute) or read register (icall/ijmp)
    expr: Expr | None = None  # branch condition or computed value
    value: str | None = None  # raw `set` operand: literal, @name or @name+off

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    @property
    def text(self) -> str:
        op = self.op
        if op is Op.COMPUTE:
            if self.reg is None:
                return "compute" if self.expr is None else f"compute {self.expr.source}"
            return f"compute {self.reg} = {self.expr.source}"
        if op is Op.COND_BRANCH:
            return f"cbr {self.target} if {self.expr.source}"
        if op in (Op.JUMP, Op.CALL):
            return f"{op.value} {self.target}"
        if op in (Op.INDIRECT_CALL, Op.INDIRECT_JUMP):
            return f"{op.value} {self.reg}"
        if op is Op.SET_REG:
            return f"set {self.reg} = {self.value}"
        return op.value


@dataclass(frozen=True)
class BasicBlock:
    id: str
    function: str
    label: str
    start_addr: int
    end_addr: int
    instructions: tuple[Instruction, ...]

    @property
    def terminator(self) -> Instruction | None:
        last = self.instructions[-1]
        return last if last.is_terminator else None

    @property
    def size(self) -> int:
        return INSN_SIZE * len(self.instructions)

    def contains(self, addr: int) -> bool:
        return self.start_addr <= addr < self.start_addr + self.size


@dataclass(frozen=True)
class Edge:
    src_addr: int
    dst_addr: int
    kind: EdgeKind
    src: str  # block id
    dst: str | None  # block id, None for unresolved indirect targets


@dataclass(frozen=True)
class Function:
    name: str
    entry: str
    blocks: tuple[str, ...]
    edges: tuple[Edge, ...]  # intra-function edges


@dataclass(frozen=True)
class ProgramCFG:
    functions: dict[str, Function]
    blocks: dict[str, BasicBlock]
    interproc_edges: tuple[Edge, ...]
    entry: str
    exits: frozenset[int]
    static_indirect_targets: dict[str, frozenset[int]] = field(default_factory=dict)

    # -- lookup helpers -------------------------------------------------

    def __post_init__(self):
        by_addr = {b.start_addr: b for b in self.blocks.values()}
        object.__setattr__(self, "_by_addr", by_addr)
        object.__setattr__(self, "_sorted_starts", sorted(by_addr))
        succ: dict[str, list[Edge]] = {bid: [] for bid in self.blocks}
        pred: dict[str, list[Edge]] = {bid: [] for bid in self.blocks}
        for fn in self.functions.values():
            for e in fn.edges:
                succ[e.src].append(e)
                pred[e.dst].append(e)
        object.__setattr__(self, "_succ", {k: tuple(v) for k, v in succ.items()})
        object.__setattr__(self, "_pred", {k: tuple(v) for k, v in pred.items()})

    @property
    def edges(self) -> tuple[Edge, ...]:
        intra = tuple(e for fn in self.functions.values() for e in fn.edges)
        return intra + self.interproc_edges

    def block_at(self, addr: int) -> BasicBlock | None:
        """Block whose start address is ``addr``."""
        return self._by_addr.get(addr)

    def block_containing(self, addr: int) -> BasicBlock | None:
        import bisect

        i = bisect.bisect_right(self._sorted_starts, addr) - 1
        if i < 0:
            return None
        blk = self._by_addr[self._sorted_starts[i]]
        return blk if blk.contains(addr) else None

    def intra_successors(self, block_id: str) -> tuple[Edge, ...]:
        return self._succ[block_id]

    def intra_predecessors(self, block_id: str) -> tuple[Edge, ...]:
        return self._pred[block_id]

    def function_blocks(self, name: str) -> list[BasicBlock]:
        return [self.blocks[b] for b in self.functions[name].blocks]

    def fallthrough(self, block_id: str) -> str | None:
        blk = self.blocks[block_id]
        order = self.functions[blk.function].blocks
        i = order.index(block_id)
        return order[i + 1] if i + 1 < len(order) else None

    def cond_targets(self, block_id: str) -> tuple[str, str]:
        """(taken, fallthrough) successors of a block ending in ``cbr``."""
        blk = self.blocks[block_id]
        return f"{blk.function}.{blk.terminator.target}", self.fallthrough(block_id)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    # -- serialization ----------------------------------------------------

    def to_json(self) -> dict:
        def edge(e: Edge) -> dict:
            return {"src": e.src, "dst": e.dst, "src_addr": e.src_addr, "dst_addr": e.dst_addr, "kind": e.kind.value}

        funcs = {}
        for name, fn in self.functions.items():
            funcs[name] = {
                "entry": fn.entry,
                "blocks": [
                    {
                        "id": b.id,
                        "label": b.label,
                        "start_addr": b.start_addr,
                        "end_addr": b.end_addr,
                        "instructions": [i.text for i in b.instructions],
                    }
                    for b in self.function_blocks(name)
                ],
                "edges": [edge(e) for e in fn.edges],
            }
        return {
            "entry": self.entry,
            "exits": sorted(self.exits),
            "functions": funcs,
            "interproc_edges": [edge(e) for e in self.interproc_edges],
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_FUNC_RE = re.compile(rf"^func\s+({_IDENT})$")
_BLOCK_RE = re.compile(rf"^block\s+({_IDENT})\s*(?:@\s*(0[xX][0-9a-fA-F]+|\d+))?\s*:\s*(.*)$")
_SET_RE = re.compile(rf"^set\s+(\S+)\s*=\s*(.+)$")
_COMPUTE_ASSIGN_RE = re.compile(r"^compute\s+(r\d+|pac_key\d)\s*=(?!=)\s*(.+)$")
_CBR_RE = re.compile(rf"^cbr\s+({_IDENT})\s+if\s+(.+)$")
_VALUE_RE = re.compile(rf"^@({_IDENT}(?:\.{_IDENT})?)\s*(?:\+\s*(0[xX][0-9a-fA-F]+|\d+))?$")


@dataclass
class _BlockDecl:
    label: str
    addr: int | None
    instrs: list[Instruction]
    line: int
    col: int


@dataclass
class _FuncDecl:
    name: str
    blocks: list[_BlockDecl]
    line: int


def _check_reg(name: str, line: int, col: int, allow_key: bool = False) -> str:
    if allow_key and name in KEY_REGS:
        return name
    try:
        register_index(name)
    except ExprError:
        raise ParseError(line, col, f"bad register {name!r}") from None
    return name


def _parse_instruction(text: str, line: int, col: int) -> Instruction:
    words = text.split()
    head = words[0]
    try:
        if head == "compute":
            if len(words) == 1:
                return Instruction(Op.COMPUTE)
            m = _COMPUTE_ASSIGN_RE.match(text)
            if m:
                reg = _check_reg(m.group(1), line, col, allow_key=True)
                return Instruction(Op.COMPUTE, reg=reg, expr=Expr(m.group(2)))
            return Instruction(Op.COMPUTE, expr=Expr(text[len("compute"):]))
        if head == "cbr":
            m = _CBR_RE.match(text)
            if not m:
                raise ParseError(line, col, "expected 'cbr <label> if <condition>'")
            return Instruction(Op.COND_BRANCH, target=m.group(1), expr=Expr(m.group(2)))
        if head in ("jmp", "call"):
            if len(words) != 2 or not re.fullmatch(_IDENT, words[1]):
                raise ParseError(line, col, f"expected '{head} <name>'")
            return Instruction(Op.JUMP if head == "jmp" else Op.CALL, target=words[1])
        if head in ("icall", "ijmp"):
            if len(words) != 2:
                raise ParseError(line, col, f"expected '{head} r<k>'")
            reg = _check_reg(words[1], line, col)
            return Instruction(Op.INDIRECT_CALL if head == "icall" else Op.INDIRECT_JUMP, reg=reg)
        if head == "set":
            m = _SET_RE.match(text)
            if not m:
                raise ParseError(line, col, "expected 'set r<k> = <value>'")
            reg = _check_reg(m.group(1), line, col, allow_key=True)
            value = m.group(2).strip()
            if not (_VALUE_RE.match(value) or re.fullmatch(r"0[xX][0-9a-fA-F]+|\d+", value)):
                raise ParseError(line, col, f"bad set operand {value!r}")
            if not value.startswith("@") and int(value, 0) > MASK32:
                raise ParseError(line, col, f"value {value} exceeds 32 bits")
            return Instruction(Op.SET_REG, reg=reg, value=value)
        if head in ("ret", "exit", "loophint") and len(words) == 1:
            return Instruction({"ret": Op.RETURN, "exit": Op.EXIT, "loophint": Op.LOOP_HINT}[head])
    except ExprError as exc:
        raise ParseError(line, col, str(exc)) from None
    raise ParseError(line, col, f"unknown instruction {text!r}")


def _pieces(text: str) -> Iterator[tuple[str, int, int]]:
    """Yield (piece, line, col) split on newlines, ';', '{' and '}'."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        start = 0
        for i, ch in enumerate(line + ";"):
            if ch in ";{}":
                piece = line[start:i]
                stripped = piece.strip()
                if stripped:
                    yield stripped, lineno, start + 1 + (len(piece) - len(piece.lstrip()))
                if ch in "{}":
                    yield ch, lineno, i + 1
                start = i + 1


def parse_program(text: str) -> list[_FuncDecl]:
    funcs: list[_FuncDecl] = []
    cur: _FuncDecl | None = None
    expect_open = False
    for piece, line, col in _pieces(text):
        if expect_open:
            if piece != "{":
                raise ParseError(line, col, "expected '{'")
            expect_open = False
            continue
        if piece == "}":
            if cur is None:
                raise ParseError(line, col, "unmatched '}'")
            funcs.append(cur)
            cur = None
            continue
        if piece == "{":
            raise ParseError(line, col, "unexpected '{'")
        if cur is None:
            m = _FUNC_RE.match(piece)
            if not m:
                raise ParseError(line, col, f"expected 'func <name>', got {piece!r}")
            cur = _FuncDecl(m.group(1), [], line)
            expect_open = True
            continue
        m = _BLOCK_RE.match(piece)
        if m:
            addr = int(m.group(2), 0) if m.group(2) else None
            if addr is not None and addr > MASK32:
                raise ParseError(line, col, "address exceeds 32 bits")
            cur.blocks.append(_BlockDecl(m.group(1), addr, [], line, col))
            rest = m.group(3).strip()
            if rest:
                cur.blocks[-1].instrs.append(_parse_instruction(rest, line, col + piece.index(rest)))
            continue
        if piece.startswith("block"):
            raise ParseError(line, col, "expected 'block <label> [@addr]:'")
        if not cur.blocks:
            raise ParseError(line, col, "instruction outside of a block")
        cur.blocks[-1].instrs.append(_parse_instruction(piece, line, col))
    if cur is not None or expect_open:
        raise ParseError(len(text.splitlines()) or 1, 1, "unterminated function")
    return funcs


# ---------------------------------------------------------------------------
# CFG construction
# ---------------------------------------------------------------------------


def _resolve(value: str, func: str, labels: dict[str, dict[str, str]], blocks: dict[str, BasicBlock]) -> int | None:
    """Resolve a `set` operand to a 32-bit value; None when a name is unknown."""
    m = _VALUE_RE.match(value)
    if not m:
        return int(value, 0)
    name, off = m.group(1), int(m.group(2), 0) if m.group(2) else 0
    if "." in name:
        fname, label = name.split(".", 1)
        bid = labels.get(fname, {}).get(label)
    elif name in labels[func]:
        bid = labels[func][name]
    elif name in labels:
        bid = next(iter(labels[name].values()), None)
    else:
        bid = None
    if bid is None:
        return None
    return (blocks[bid].start_addr + off) & MASK32


def resolve_value(cfg: ProgramCFG, block_id: str, value: str) -> int:
    labels: dict[str, dict[str, str]] = {
        name: {cfg.blocks[b].label: b for b in fn.blocks} for name, fn in cfg.functions.items()
    }
    resolved = _resolve(value, cfg.blocks[block_id].function, labels, cfg.blocks)
    assert resolved is not None
    return resolved


def build_cfg(decls: list[_FuncDecl], base: int = BASE_ADDR) -> ProgramCFG:
    if not decls:
        raise ValidationError("empty-program", "no functions")
    names = [f.name for f in decls]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ValidationError("duplicate-function", f"function(s) {sorted(dup)} declared twice")

    labels: dict[str, dict[str, str]] = {}
    blocks: dict[str, BasicBlock] = {}
    order: dict[str, list[str]] = {}
    cur = base
    for fd in decls:
        if not fd.blocks:
            raise ValidationError("empty-function", f"function {fd.name} has no blocks")
        labels[fd.name] = {}
        order[fd.name] = []
        for bd in fd.blocks:
            if bd.label in labels[fd.name]:
                raise ValidationError("duplicate-label", f"{fd.name}.{bd.label} declared twice")
            if not bd.instrs:
                raise ValidationError("empty-block", f"{fd.name}.{bd.label} has no instructions")
            for ins in bd.instrs[:-1]:
                if ins.is_terminator:
                    raise ValidationError(
                        "terminator-not-last", f"{fd.name}.{bd.label}: '{ins.text}' must end the block"
                    )
            start = bd.addr if bd.addr is not None else cur
            size = INSN_SIZE * len(bd.instrs)
            if start + size - 1 > MASK32:
                raise ValidationError("address-range", f"{fd.name}.{bd.label} exceeds the 32-bit space")
            bid = f"{fd.name}.{bd.label}"
            blocks[bid] = BasicBlock(bid, fd.name, bd.label, start, start + size - INSN_SIZE, tuple(bd.instrs))
            labels[fd.name][bd.label] = bid
            order[fd.name].append(bid)
            cur = start + size

    spans = sorted((b.start_addr, b.start_addr + b.size, b.id) for b in blocks.values())
    for (s0, e0, b0), (s1, _, b1) in zip(spans, spans[1:]):
        if s1 == s0:
            raise ValidationError("duplicate-address", f"{b0} and {b1} share start address {s0:#x}")
        if s1 < e0:
            raise ValidationError("overlapping-blocks", f"{b0} overlaps {b1}")

    def nxt(fname: str, bid: str) -> str | None:
        seq = order[fname]
        i = seq.index(bid)
        return seq[i + 1] if i + 1 < len(seq) else None

    # static indirect targets: `set rk = <value>` feeding `icall/ijmp rk` in the same function
    by_start = {b.start_addr: b for b in blocks.values()}
    static_targets: dict[str, frozenset[int]] = {}
    for fd in decls:
        sets: dict[str, set[int]] = {}
        for bid in order[fd.name]:
            for ins in blocks[bid].instructions:
                if ins.op is Op.SET_REG:
                    val = _resolve(ins.value, fd.name, labels, blocks)
                    if val is None:
                        raise ValidationError("dangling-target", f"{bid}: unknown name in '{ins.text}'")
                    sets.setdefault(ins.reg, set()).add(val)
        for bid in order[fd.name]:
            term = blocks[bid].terminator
            if term is not None and term.op in (Op.INDIRECT_CALL, Op.INDIRECT_JUMP):
                static_targets[bid] = frozenset(v for v in sets.get(term.reg, ()) if v in by_start)

    functions: dict[str, Function] = {}
    interproc: list[Edge] = []
    call_sites: dict[str, list[str]] = {name: [] for name in names}  # callee -> continuation blocks
    exits: set[int] = set()
    for fd in decls:
        edges: list[Edge] = []
        for bid in order[fd.name]:
            blk = blocks[bid]
            term = blk.terminator
            follow = nxt(fd.name, bid)

            def add(dst: str, kind: EdgeKind) -> None:
                edges.append(Edge(blk.end_addr, blocks[dst].start_addr, kind, bid, dst))

            if term is None:
                if follow is None:
                    raise ValidationError("missing-fallthrough", f"{bid} falls off the end of {fd.name}")
                add(follow, EdgeKind.FALLTHROUGH)
            elif term.op in (Op.COND_BRANCH, Op.JUMP):
                tgt = labels[fd.name].get(term.target)
                if tgt is None:
                    raise ValidationError("dangling-target", f"{bid}: no block {term.target!r} in {fd.name}")
                if term.op is Op.JUMP:
                    add(tgt, EdgeKind.JUMP)
                else:
                    if follow is None:
                        raise ValidationError("missing-fallthrough", f"{bid}: cbr needs a fallthrough block")
                    add(tgt, EdgeKind.COND_TAKEN)
                    add(follow, EdgeKind.COND_FALLTHROUGH)
            elif term.op in (Op.CALL, Op.INDIRECT_CALL):
                if follow is None:
                    raise ValidationError("missing-fallthrough", f"{bid}: call needs a continuation block")
                add(follow, EdgeKind.CALL_CONTINUATION)
                if term.op is Op.CALL:
                    if term.target not in labels:
                        raise ValidationError("dangling-target", f"{bid}: no function {term.target!r}")
                    callee_entry = order[term.target][0]
                    interproc.append(
                        Edge(blk.end_addr, blocks[callee_entry].start_addr, EdgeKind.CALL, bid, callee_entry)
                    )
                    call_sites[term.target].append(follow)
                else:
                    for t in sorted(static_targets[bid]):
                        tb = by_start[t]
                        interproc.append(Edge(blk.end_addr, t, EdgeKind.INDIRECT, bid, tb.id))
                        if order[tb.function][0] == tb.id:
                            call_sites[tb.function].append(follow)
            elif term.op is Op.INDIRECT_JUMP:
                for t in sorted(static_targets[bid]):
                    tb = by_start[t]
                    if tb.function == fd.name:
                        add(tb.id, EdgeKind.INDIRECT)
                    else:
                        interproc.append(Edge(blk.end_addr, t, EdgeKind.INDIRECT, bid, tb.id))
            elif term.op is Op.EXIT:
                exits.add(blk.start_addr)
        functions[fd.name] = Function(fd.name, order[fd.name][0], tuple(order[fd.name]), tuple(edges))

    for fd in decls:
        for bid in order[fd.name]:
            term = blocks[bid].terminator
            if term is not None and term.op is Op.RETURN:
                for cont in call_sites[fd.name]:
                    interproc.append(Edge(blocks[bid].end_addr, blocks[cont].start_addr, EdgeKind.RETURN, bid, cont))

    if not exits:
        raise ValidationError("missing-exit", "no block terminates with 'exit'")

    for name, fn in functions.items():
        seen = {fn.entry}
        work = [fn.entry]
        succ: dict[str, list[str]] = {}
        for e in fn.edges:
            succ.setdefault(e.src, []).append(e.dst)
        while work:
            for d in succ.get(work.pop(), ()):
                if d not in seen:
                    seen.add(d)
                    work.append(d)
        missing = [b for b in fn.blocks if b not in seen]
        if missing:
            raise ValidationError("unreachable-block", f"{missing[0]} is unreachable from {name} entry")

    entry_fn = "main" if "main" in functions else decls[0].name
    return ProgramCFG(
        functions=functions,
        blocks=blocks,
        interproc_edges=tuple(interproc),
        entry=functions[entry_fn].entry,
        exits=frozenset(exits),
        static_indirect_targets=static_targets,
    )


def load_program(text: str, base: int = BASE_ADDR) -> ProgramCFG:
    """Parse and validate a program; raises ParseError or ValidationError."""
    return build_cfg(parse_program(text), base)


def iter_blocks(cfg: ProgramCFG) -> Iterable[BasicBlock]:
    for fn in cfg.functions.values():
        for bid in fn.blocks:
            yield cfg.blocks[bid]
