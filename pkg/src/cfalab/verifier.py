"""Report authentication and the backtracking abstract-execution search.

The search walks the CFG from the program entry with a working copy of the
reported occurrence counts. Every entry into a planned branch destination
consumes one count and extends the forward chain; every indirect transfer
consumes one count of its chosen ITL target; every return extends the
backward chain with the address it returns to. A path is accepted when it
reaches an ``exit`` with all counts consumed and both chains equal to the
reported measurements.

Choice points (conditional branches and indirect transfers) are explored
depth first. Only the index of the alternative taken at each choice point is
kept; full state snapshots are taken at a bounded set of choice points and
backtracking restores the nearest one and replays the stored choices. This
keeps memory linear in the number of choice points with a small constant, so
reports covering millions of loop iterations can be checked.
"""
from __future__ import annotations

import hashlib
import hmac
import random
import struct
from array import array
from dataclasses import dataclass, field
from typing import Mapping

from .dominators import compute_dominators, natural_loops
from .engine import AttestationReport, KeyPair, measurer, signature_matches
from .instrument import IndirectTargetList, InstrumentationPlan
from .ir import Op, ProgramCFG

DEFAULT_NODE_BUDGET = 10**7
DEFAULT_WITNESS_LIMIT = 100_000
ORACLE_BUDGET = 10**6

REASONS = (
    "ok",
    "bad-signature",
    "stale-nonce",
    "illegal-targets",
    "trace-mismatch",
    "measurement-mismatch",
    "search-exhausted",
)

_DENSE_CHECKPOINTS = 2048  # checkpoint every choice point below this depth
_CHECKPOINT_STRIDE = 1024  # then every this many
_MEMO_DEPTH = 1 << 18  # failure memo only for choice points this shallow
_MASK64 = (1 << 64) - 1

T_FALL, T_COND, T_JUMP, T_CALL, T_ICALL, T_IJMP, T_RET, T_EXIT = range(8)


def artifact_digest(cfg: ProgramCFG, plan: InstrumentationPlan, itl: IndirectTargetList) -> bytes:
    """Digest binding a report to the exact program, plan and ITL."""
    h = hashlib.sha256()
    for part in (cfg.serialize(), plan.dumps().encode(), itl.dumps().encode()):
        h.update(struct.pack("<I", len(part)))
        h.update(part)
    return h.digest()


@dataclass
class VerifierContext:
    cfg: ProgramCFG
    plan: InstrumentationPlan
    itl: IndirectTargetList
    keys: KeyPair
    expected_nonce: bytes | None = None
    expected_counts: Mapping[int, int] | None = None  # benign counts for known inputs
    node_budget: int = DEFAULT_NODE_BUDGET
    program_digest: bytes | None = None
    witness_limit: int = DEFAULT_WITNESS_LIMIT

    def __post_init__(self):
        if self.program_digest is not None and self.program_digest != artifact_digest(self.cfg, self.plan, self.itl):
            raise ValueError("program digest does not match the supplied CFG, plan and ITL")

    @property
    def entry(self) -> str:
        return self.cfg.entry

    @property
    def exits(self) -> frozenset[int]:
        return self.cfg.exits


@dataclass
class Verdict:
    accepted: bool
    reason: str
    m_f: int | None = None  # recomputed chains, when the search got that far
    m_b: int | None = None
    nodes_expanded: int = 0
    witness: list[str] | None = None
    witness_truncated: bool = False

    def to_json(self) -> dict:
        out = {
            "accepted": self.accepted,
            "reason": self.reason,
            "m_f": None if self.m_f is None else f"{self.m_f:#010x}",
            "m_b": None if self.m_b is None else f"{self.m_b:#010x}",
            "nodes_expanded": self.nodes_expanded,
        }
        if self.witness is not None:
            out["witness"] = self.witness
            out["witness_truncated"] = self.witness_truncated
        return out


def verify_signature(report: AttestationReport, key, expected_nonce: bytes | None) -> bool:
    """Signature over the canonical bytes is valid and the nonce is the expected one."""
    if not signature_matches(report, key):
        return False
    return expected_nonce is None or hmac.compare_digest(report.nonce, expected_nonce)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


@dataclass
class _VB:
    id: str
    start: int
    instrumented: bool
    term: int
    a: object = None
    b: object = None
    loop: tuple[int, int] | None = None  # (in-loop successor, exiting successor)


class _Graph:
    """Per-program tables for the search; built once per context."""

    def __init__(self, ctx: VerifierContext):
        cfg, plan = ctx.cfg, ctx.plan
        ids = [b for fn in cfg.functions.values() for b in fn.blocks]
        index = {bid: i for i, bid in enumerate(ids)}
        dom = compute_dominators(cfg)
        loops = natural_loops(cfg, dom)
        self.blocks: list[_VB] = []
        for bid in ids:
            blk = cfg.blocks[bid]
            vb = _VB(bid, blk.start_addr, bid in plan.direct_report_blocks, T_FALL)
            term = blk.terminator
            follow = cfg.fallthrough(bid)
            if term is None:
                vb.a = index[follow]
            elif term.op is Op.COND_BRANCH:
                taken, fall = cfg.cond_targets(bid)
                vb.term, vb.a = T_COND, (index[taken], index[fall])
                if taken != fall:
                    vb.loop = _loop_exit_shape(bid, taken, fall, loops, index)
            elif term.op is Op.JUMP:
                vb.term, vb.a = T_JUMP, index[f"{blk.function}.{term.target}"]
            elif term.op is Op.CALL:
                vb.term, vb.a, vb.b = T_CALL, index[cfg.functions[term.target].entry], index[follow]
            elif term.op is Op.INDIRECT_CALL:
                vb.term, vb.b = T_ICALL, index[follow]
            elif term.op is Op.INDIRECT_JUMP:
                vb.term = T_IJMP
            elif term.op is Op.RETURN:
                vb.term = T_RET
            else:
                vb.term = T_EXIT
            self.blocks.append(vb)
        self.entry = index[cfg.entry]
        by_start = {vb.start: i for i, vb in enumerate(self.blocks)}
        self.itl_targets = sorted((a, by_start[a]) for a in ctx.itl.targets if a in by_start)
        self.valid_addrs = {vb.start for vb in self.blocks if vb.instrumented} | {a for a, _ in self.itl_targets}


def _loop_exit_shape(bid, taken, fall, loops, index):
    best = None
    for body in loops.values():
        if bid in body and (taken in body) != (fall in body):
            if best is None or len(body) < len(best):
                best = body
    if best is None:
        return None
    inside, outside = (taken, fall) if taken in best else (fall, taken)
    return index[inside], index[outside]


class _Search:
    def __init__(self, ctx: VerifierContext, graph: _Graph, report: AttestationReport):
        self.ctx = ctx
        self.g = graph
        self.report = report
        self.mac = measurer(ctx.keys.measurement)
        rng = random.Random(0x5EED)
        self.zob = {a: rng.getrandbits(64) for a in report.trace.counts}
        self.nodes = 0
        self.exit_zero: tuple[int, int] | None = None

    def run(self) -> Verdict:
        g, mac = self.g, self.mac
        blocks = g.blocks
        target_f, target_b = self.report.m_f, self.report.m_b
        budget = self.ctx.node_budget
        limit = self.ctx.witness_limit
        zob = self.zob
        itl_targets = g.itl_targets

        # live state
        res = dict(self.report.trace.counts)
        total = sum(res.values())
        zh = 0
        for a, c in res.items():
            zh = (zh + c * zob[a]) & _MASK64
        m_f = m_b = 0
        stack: list[int] = []
        iters: dict[int, int] = {}
        bi = g.entry
        path: list[str] = []
        plen = 0

        choices = array("I")
        ncands = array("I")
        memo_keys: list = []
        failed: set = set()
        checkpoints: list[tuple] = []
        depth = 0
        resume = False  # restored at a choice point: skip entry actions
        nodes = 0

        while True:
            dead = False
            if not resume:
                nodes += 1
                if nodes > budget:
                    self.nodes = nodes
                    return self._verdict(False, "search-exhausted")
                b = blocks[bi]
                if plen < limit:
                    path.append(b.id)
                plen += 1
                if b.instrumented:
                    s = b.start
                    r = res.get(s, 0)
                    if r == 0:
                        dead = True
                    else:
                        res[s] = r - 1
                        total -= 1
                        zh = (zh - zob[s]) & _MASK64
                        m_f = mac(m_f, s)
                if not dead:
                    t = b.term
                    if t == T_FALL or t == T_JUMP:
                        bi = b.a
                        continue
                    if t == T_CALL:
                        stack.append(b.b)
                        bi = b.a
                        continue
                    if t == T_RET:
                        if not stack:
                            dead = True
                        else:
                            bi = stack.pop()
                            m_b = mac(m_b, blocks[bi].start)
                            continue
                    elif t == T_EXIT:
                        if total == 0:
                            self.exit_zero = (m_f, m_b)
                            if m_f == target_f and m_b == target_b:
                                self.nodes = nodes
                                v = self._verdict(True, "ok", m_f, m_b)
                                v.witness = path
                                v.witness_truncated = plen > limit
                                return v
                        dead = True
            else:
                resume = False
                b = blocks[bi]

            if not dead:
                # choice point
                t = b.term
                if t == T_COND:
                    s0, s1 = b.a
                    if s0 == s1:
                        cands = (s0,)
                    else:
                        v0, v1 = blocks[s0], blocks[s1]
                        ok0 = not v0.instrumented or res.get(v0.start, 0) > 0
                        ok1 = not v1.instrumented or res.get(v1.start, 0) > 0
                        if ok0 and ok1:
                            lp = b.loop
                            if lp is not None and v0.instrumented and v1.instrumented:
                                inside, outside = lp
                                k = iters.get(bi, 0)
                                r_in = res[blocks[inside].start]
                                r_out = res[blocks[outside].start]
                                cands = (inside, outside) if k * r_out < k + r_in else (outside, inside)
                            elif v1.instrumented and not v0.instrumented:
                                cands = (s1, s0)
                            else:
                                cands = (s0, s1)
                        elif ok0:
                            cands = (s0,)
                        elif ok1:
                            cands = (s1,)
                        else:
                            cands = ()
                else:  # indirect transfer
                    cands = tuple(i for a, i in itl_targets if res.get(a, 0) > 0)

                if not cands:
                    dead = True
                else:
                    if depth < len(choices):
                        k = choices[depth]
                    else:
                        if depth < _MEMO_DEPTH:
                            key = (bi, zh, total, tuple(stack), m_f, m_b)
                            if key in failed:
                                dead = True
                            else:
                                memo_keys.append(key)
                        if not dead:
                            if depth < _DENSE_CHECKPOINTS or depth % _CHECKPOINT_STRIDE == 0:
                                checkpoints.append(
                                    (depth, bi, dict(res), total, zh, m_f, m_b, list(stack), dict(iters), plen)
                                )
                            choices.append(0)
                            ncands.append(len(cands))
                            k = 0
                    if not dead:
                        nxt = cands[k]
                        depth += 1
                        if t == T_COND:
                            lp = b.loop
                            if lp is not None:
                                if nxt == lp[0]:
                                    iters[bi] = iters.get(bi, 0) + 1
                                else:
                                    iters[bi] = 0
                            bi = nxt
                        else:
                            a = blocks[nxt].start
                            res[a] -= 1
                            total -= 1
                            zh = (zh - zob[a]) & _MASK64
                            m_f = mac(m_f, a)
                            if t == T_ICALL:
                                stack.append(b.b)
                            bi = nxt
                        continue

            # backtrack
            while choices and choices[-1] + 1 >= ncands[-1]:
                d = len(choices) - 1
                choices.pop()
                ncands.pop()
                if d < len(memo_keys):
                    failed.add(memo_keys.pop())
            if not choices:
                self.nodes = nodes
                if self.exit_zero is not None:
                    return self._verdict(False, "measurement-mismatch", *self.exit_zero)
                return self._verdict(False, "trace-mismatch")
            choices[-1] += 1
            d = len(choices) - 1
            while checkpoints[-1][0] > d:
                checkpoints.pop()
            cp = checkpoints[-1]
            depth, bi = cp[0], cp[1]
            res = dict(cp[2])
            total, zh, m_f, m_b = cp[3], cp[4], cp[5], cp[6]
            stack = list(cp[7])
            iters = dict(cp[8])
            plen = cp[9]
            del path[min(plen, limit):]
            resume = True

    def _verdict(self, ok, reason, m_f=None, m_b=None) -> Verdict:
        return Verdict(ok, reason, m_f, m_b, self.nodes)


_GRAPHS: dict[int, tuple[VerifierContext, _Graph]] = {}


def _graph_for(ctx: VerifierContext) -> _Graph:
    hit = _GRAPHS.get(id(ctx))
    if hit is not None and hit[0] is ctx:
        return hit[1]
    g = _Graph(ctx)
    if len(_GRAPHS) > 64:
        _GRAPHS.clear()
    _GRAPHS[id(ctx)] = (ctx, g)
    return g


def verify(report: AttestationReport, ctx: VerifierContext) -> Verdict:
    """Decide whether ``report`` describes a legitimate execution."""
    if not signature_matches(report, ctx.keys.attestation):
        return Verdict(False, "bad-signature")
    if ctx.expected_nonce is not None and not hmac.compare_digest(report.nonce, ctx.expected_nonce):
        return Verdict(False, "stale-nonce")
    if report.trace.illegal:
        return Verdict(False, "illegal-targets")
    counts = {a: c for a, c in report.trace.counts.items() if c}
    if ctx.expected_counts is not None:
        expected = {a: c for a, c in ctx.expected_counts.items() if c}
        if expected != counts:
            return Verdict(False, "trace-mismatch")
    g = _graph_for(ctx)
    if any(a not in g.valid_addrs for a in counts):
        return Verdict(False, "trace-mismatch")
    return _Search(ctx, g, report).run()


def verify_bytes(raw: bytes, ctx: VerifierContext) -> Verdict:
    """Like :func:`verify` on wire bytes; malformed reports cannot authenticate."""
    try:
        report = AttestationReport.from_bytes(raw)
    except ValueError:
        return Verdict(False, "bad-signature")
    return verify(report, ctx)


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


class OracleBudgetExceeded(RuntimeError):
    def __init__(self, budget: int):
        super().__init__(f"oracle-budget-exceeded: more than {budget} nodes")


def _oracle_mac(k_m: bytes, prev: int, dest: int) -> int:
    digest = hmac.new(k_m, prev.to_bytes(4, "little") + dest.to_bytes(4, "little"), hashlib.sha256).digest()
    return int.from_bytes(digest[:4], "little")


def enumerate_paths_oracle(ctx: VerifierContext, report: AttestationReport, budget: int = ORACLE_BUDGET) -> bool:
    """Exhaustively enumerate CFG paths that fit the reported counts.

    No ordering, pruning beyond count exhaustion, or memoization: every
    successor of every branch and every ITL target is tried. Intended for
    small programs only.
    """
    body = report.body()
    if not hmac.compare_digest(hmac.new(ctx.keys.attestation.k_a, body, hashlib.sha256).digest(), report.signature):
        return False
    if ctx.expected_nonce is not None and report.nonce != ctx.expected_nonce:
        return False
    if report.trace.illegal:
        return False
    if ctx.expected_counts is not None:
        if {a: c for a, c in ctx.expected_counts.items() if c} != {a: c for a, c in report.trace.counts.items() if c}:
            return False
    cfg, plan = ctx.cfg, ctx.plan
    k_m = ctx.keys.measurement.k_m
    addrs = sorted(report.trace.counts)
    slot = {a: i for i, a in enumerate(addrs)}
    start_counts = tuple(report.trace.counts[a] for a in addrs)
    itl = sorted(ctx.itl.targets)

    def take(counts: tuple, addr: int):
        i = slot.get(addr)
        if i is None or counts[i] == 0:
            return None
        return counts[:i] + (counts[i] - 1,) + counts[i + 1 :]

    # (block id, counts, m_f, m_b, call stack of continuation ids)
    work = [(cfg.entry, start_counts, 0, 0, ())]
    nodes = 0
    while work:
        bid, counts, m_f, m_b, calls = work.pop()
        nodes += 1
        if nodes > budget:
            raise OracleBudgetExceeded(budget)
        blk = cfg.blocks[bid]
        if bid in plan.direct_report_blocks:
            counts = take(counts, blk.start_addr)
            if counts is None:
                continue
            m_f = _oracle_mac(k_m, m_f, blk.start_addr)
        term = blk.terminator
        op = term.op if term is not None else None
        if op is None:
            work.append((cfg.fallthrough(bid), counts, m_f, m_b, calls))
        elif op is Op.COND_BRANCH:
            for s in set(cfg.cond_targets(bid)):
                work.append((s, counts, m_f, m_b, calls))
        elif op is Op.JUMP:
            work.append((f"{blk.function}.{term.target}", counts, m_f, m_b, calls))
        elif op is Op.CALL:
            callee = cfg.functions[term.target].entry
            work.append((callee, counts, m_f, m_b, calls + (cfg.fallthrough(bid),)))
        elif op in (Op.INDIRECT_CALL, Op.INDIRECT_JUMP):
            pushed = calls + (cfg.fallthrough(bid),) if op is Op.INDIRECT_CALL else calls
            for t in itl:
                dest = cfg.block_at(t)
                c2 = take(counts, t)
                if dest is None or c2 is None:
                    continue
                work.append((dest.id, c2, _oracle_mac(k_m, m_f, t), m_b, pushed))
        elif op is Op.RETURN:
            if not calls:
                continue
            cont = calls[-1]
            m_b2 = _oracle_mac(k_m, m_b, cfg.blocks[cont].start_addr)
            work.append((cont, counts, m_f, m_b2, calls[:-1]))
        elif op is Op.EXIT:
            if not any(counts) and m_f == report.m_f and m_b == report.m_b:
                return True
    return False
