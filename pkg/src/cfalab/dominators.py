"""Dominator and post-dominator trees, back edges and natural loops.

Immediate dominators use the iterative scheme of Cooper, Harvey and Kennedy
over reverse postorder, applied per function to the intra-function edges.
"""
from __future__ import annotations

from dataclasses import dataclass

from .ir import Op, ProgramCFG

VIRTUAL_EXIT = "<exit>"


@dataclass(frozen=True)
class DominatorInfo:
    idom: dict[str, str | None]  # entry blocks map to None
    ipostdom: dict[str, str | None]  # None: post-dominated only by the virtual exit

    def dominates(self, a: str, b: str) -> bool:
        """True if ``a`` dominates ``b`` (reflexive)."""
        node: str | None = b
        while node is not None:
            if node == a:
                return True
            node = self.idom.get(node)
        return False


def _reverse_postorder(entry: str, succ: dict[str, list[str]]) -> list[str]:
    seen = {entry}
    post: list[str] = []
    stack = [(entry, iter(succ.get(entry, ())))]
    while stack:
        node, it = stack[-1]
        for s in it:
            if s not in seen:
                seen.add(s)
                stack.append((s, iter(succ.get(s, ()))))
                break
        else:
            post.append(node)
            stack.pop()
    return post[::-1]


def immediate_dominators(entry: str, succ: dict[str, list[str]]) -> dict[str, str | None]:
    """idom map for nodes reachable from ``entry`` in the graph ``succ``."""
    rpo = _reverse_postorder(entry, succ)
    index = {n: i for i, n in enumerate(rpo)}
    preds: dict[str, list[str]] = {n: [] for n in rpo}
    for n in rpo:
        for s in succ.get(n, ()):
            if s in preds:
                preds[s].append(n)
    idom: dict[str, str] = {entry: entry}

    def intersect(a: str, b: str) -> str:
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for n in rpo[1:]:
            new = None
            for p in preds[n]:
                if p in idom:
                    new = p if new is None else intersect(p, new)
            if new is not None and idom.get(n) != new:
                idom[n] = new
                changed = True
    out: dict[str, str | None] = {n: d for n, d in idom.items()}
    out[entry] = None
    return out


def function_graph(cfg: ProgramCFG, name: str) -> dict[str, list[str]]:
    succ: dict[str, list[str]] = {b: [] for b in cfg.functions[name].blocks}
    for e in cfg.functions[name].edges:
        if e.dst not in succ[e.src]:
            succ[e.src].append(e.dst)
    return succ


def _exit_blocks(cfg: ProgramCFG, name: str, succ: dict[str, list[str]]) -> list[str]:
    out = []
    for bid in cfg.functions[name].blocks:
        term = cfg.blocks[bid].terminator
        if not succ[bid] or (term is not None and term.op in (Op.RETURN, Op.EXIT, Op.INDIRECT_JUMP)):
            out.append(bid)
    return out


def compute_dominators(cfg: ProgramCFG) -> DominatorInfo:
    idom: dict[str, str | None] = {}
    ipostdom: dict[str, str | None] = {}
    for name, fn in cfg.functions.items():
        succ = function_graph(cfg, name)
        idom.update(immediate_dominators(fn.entry, succ))
        rev: dict[str, list[str]] = {VIRTUAL_EXIT: _exit_blocks(cfg, name, succ)}
        for src, dsts in succ.items():
            for d in dsts:
                rev.setdefault(d, []).append(src)
        pdom = immediate_dominators(VIRTUAL_EXIT, rev)
        for bid in fn.blocks:
            d = pdom.get(bid)
            ipostdom[bid] = None if d in (None, VIRTUAL_EXIT) else d
    return DominatorInfo(idom, ipostdom)


def back_edges(cfg: ProgramCFG, dom: DominatorInfo) -> set[tuple[str, str]]:
    """Intra-function edges whose destination dominates their source."""
    out = set()
    for fn in cfg.functions.values():
        for e in fn.edges:
            if dom.dominates(e.dst, e.src):
                out.add((e.src, e.dst))
    return out


def natural_loops(cfg: ProgramCFG, dom: DominatorInfo) -> dict[str, frozenset[str]]:
    """Header -> body blocks (header included), merging back edges per header."""
    loops: dict[str, set[str]] = {}
    for src, hdr in back_edges(cfg, dom):
        body = loops.setdefault(hdr, {hdr})
        work = [src]
        while work:
            n = work.pop()
            if n in body:
                continue
            body.add(n)
            work.extend(e.src for e in cfg.intra_predecessors(n))
    return {h: frozenset(b) for h, b in loops.items()}
