"""Ball-Larus acyclic path numbering.

Back edges (edges whose destination dominates their source) are removed and
replaced by a dummy edge from the virtual entry to the loop header and a dummy
edge from the latch to the virtual exit. Summing the increments along any
entry-to-exit path of the resulting DAG gives a distinct number in
``[0, num_paths)``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .dominators import DominatorInfo, compute_dominators
from .ir import Op, ProgramCFG

ENTRY = "<entry>"
EXIT = "<exit>"

EdgeKey = tuple[str, str, str]  # (src, dst, kind)


class IrreducibleCFG(ValueError):
    def __init__(self, function: str):
        super().__init__(f"irreducible-cfg: {function}")
        self.function = function


@dataclass(frozen=True)
class BallLarusNumbering:
    function: str
    increments: dict[EdgeKey, int]
    num_paths: int
    # back edge -> (increment of its dummy latch->exit edge, reset value on re-entry)
    backedge_resets: dict[EdgeKey, tuple[int, int]]
    dag: dict[str, tuple[EdgeKey, ...]]

    def increment(self, src: str, dst: str, kind: str) -> int:
        return self.increments[(src, dst, kind)]


def _dag(cfg: ProgramCFG, name: str, dom: DominatorInfo):
    fn = cfg.functions[name]
    out: dict[str, list[EdgeKey]] = {ENTRY: [(ENTRY, fn.entry, "entry")], EXIT: []}
    for bid in fn.blocks:
        out[bid] = []
    back: list[EdgeKey] = []
    for e in fn.edges:
        key = (e.src, e.dst, e.kind.value)
        if dom.dominates(e.dst, e.src):
            back.append(key)
            out[ENTRY].append((ENTRY, e.dst, f"dummy-entry:{e.src}:{e.kind.value}"))
            out[e.src].append((e.src, EXIT, f"dummy-exit:{e.dst}:{e.kind.value}"))
        else:
            out[e.src].append(key)
    for bid in fn.blocks:
        term = cfg.blocks[bid].terminator
        if term is not None and term.op in (Op.RETURN, Op.EXIT, Op.INDIRECT_JUMP):
            out[bid].append((bid, EXIT, "exit"))
    return out, back


def _topo_order(out: dict[str, list[EdgeKey]], name: str) -> list[str]:
    indeg = {n: 0 for n in out}
    for edges in out.values():
        for _, d, _ in edges:
            indeg[d] += 1
    ready = [n for n, k in indeg.items() if k == 0]
    order = []
    while ready:
        n = ready.pop()
        order.append(n)
        for _, d, _ in out[n]:
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    if len(order) != len(out):
        raise IrreducibleCFG(name)
    return order


def ball_larus_number(cfg: ProgramCFG, function: str, dom: DominatorInfo | None = None) -> BallLarusNumbering:
    if function not in cfg.functions:
        raise KeyError(function)
    dom = dom or compute_dominators(cfg)
    out, back = _dag(cfg, function, dom)
    order = _topo_order(out, function)
    num: dict[str, int] = {EXIT: 1}
    inc: dict[EdgeKey, int] = {}
    for node in reversed(order):
        if node == EXIT:
            continue
        total = 0
        for key in out[node]:
            inc[key] = total
            total += num[key[1]]
        num[node] = total
    resets = {}
    for src, dst, kind in back:
        resets[(src, dst, kind)] = (
            inc[(src, EXIT, f"dummy-exit:{dst}:{kind}")],
            inc[(ENTRY, dst, f"dummy-entry:{src}:{kind}")],
        )
    return BallLarusNumbering(
        function=function,
        increments=inc,
        num_paths=num[ENTRY],
        backedge_resets=resets,
        dag={n: tuple(e) for n, e in out.items()},
    )
